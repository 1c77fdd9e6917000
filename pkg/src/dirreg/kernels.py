"""Gaussian, Dirac and von Mises-Fisher kernels and their pairwise scalar products.

All vMF quantities are kept in log form; ``C_3(kappa)`` underflows near
``kappa ~ 700`` so nothing here exponentiates a normalising constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import DegenerateKernel, InvalidConcentration, InvalidDimension, ValidationError

SERIES_EPS = 1e-4
I0_SERIES_MAX = 15.0
LOG_4PI = math.log(4.0 * math.pi)
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class KernelParams:
    """Bandwidths and concentrations for the model (1) and target (2) kernels.

    ``h2 = 0`` selects Dirac kernels on target positions, ``kappa2 = 0`` on
    target normals (the "delta" cost variants).
    """

    h1: float
    h2: float
    kappa1: float
    kappa2: float

    def __post_init__(self):
        if not self.h1 > 0:
            raise ValidationError("h1 must be > 0")
        if self.h2 < 0:
            raise ValidationError("h2 must be >= 0")
        if not self.kappa1 > 0:
            raise InvalidConcentration("kappa1 must be > 0")
        if self.kappa2 < 0:
            raise InvalidConcentration("kappa2 must be >= 0")

    @classmethod
    def shared(cls, h: float, kappa: float) -> "KernelParams":
        return cls(h, h, kappa, kappa)


@dataclass(frozen=True)
class GaussianKernel:
    mean: np.ndarray
    h: float

    def __post_init__(self):
        if not self.h > 0:
            raise DegenerateKernel("Gaussian bandwidth must be > 0")

    def pdf(self, x):
        x = np.atleast_2d(x)
        d = x.shape[1]
        sq = np.sum((x - self.mean) ** 2, axis=1)
        return (2 * np.pi * self.h**2) ** (-d / 2) * np.exp(-sq / (2 * self.h**2))


@dataclass(frozen=True)
class VmfKernel:
    mean: np.ndarray
    kappa: float

    def __post_init__(self):
        if abs(np.linalg.norm(self.mean) - 1.0) > 1e-9:
            raise ValidationError("vMF mean direction must be a unit vector")
        if self.kappa < 0:
            raise InvalidConcentration("kappa must be >= 0")

    def log_pdf(self, u):
        u = np.atleast_2d(u)
        return log_cd(self.kappa, u.shape[1]) + self.kappa * (u @ self.mean)

    def pdf(self, u):
        return np.exp(self.log_pdf(u))


def _check_kappa(kappa):
    k = np.asarray(kappa, dtype=float)
    if np.any(k < 0) or np.any(np.isnan(k)):
        raise InvalidConcentration("concentration must be >= 0")
    return k


def log_c3(kappa):
    """``log C_3(kappa) = log(kappa / (4 pi sinh kappa))``, array-friendly.

    Small ``kappa`` uses ``sinh k ~ k (1 + k^2/6)``; otherwise
    ``log sinh k = k + log(1 - exp(-2k)) - log 2``.
    """
    k = _check_kappa(kappa)
    small = k <= SERIES_EPS
    ks = np.where(small, 1.0, k)
    big = np.log(ks) - LOG_4PI - (ks + np.log(-np.expm1(-2.0 * ks)) - math.log(2.0))
    tiny = -LOG_4PI - np.log1p(k * k / 6.0)
    out = np.where(small, tiny, big)
    return float(out) if out.ndim == 0 else out


def _log_i0(k):
    """log I_0 by power series below 15, three-term asymptotic expansion above."""
    k = np.asarray(k, dtype=float)
    out = np.empty_like(k)
    lo = k < I0_SERIES_MAX
    if np.any(lo):
        q = (k[lo] / 2.0) ** 2
        term = np.ones_like(q)
        total = np.ones_like(q)
        for j in range(1, 80):
            term = term * q / (j * j)
            total = total + term
        out[lo] = np.log(total)
    if np.any(~lo):
        kh = k[~lo]
        out[~lo] = kh - 0.5 * np.log(2 * np.pi * kh) + np.log1p(1 / (8 * kh) + 9 / (128 * kh * kh))
    return out


def _log_sphere_area(m: int) -> float:
    """log surface area of S^m (the unit sphere in R^{m+1})."""
    return math.log(2.0) + 0.5 * (m + 1) * math.log(math.pi) - math.lgamma(0.5 * (m + 1))


def _log_cd_quad(kappa: float, d: int) -> float:
    # integral over S^{d-1} of exp(k cos t) = |S^{d-2}| * int_0^pi exp(k cos t) sin^{d-2} t dt
    val, _ = integrate.quad(
        lambda t: math.exp(kappa * (math.cos(t) - 1.0)) * math.sin(t) ** (d - 2),
        0.0, math.pi, epsabs=0.0, epsrel=1e-12, limit=200,
    )
    return -(kappa + math.log(val) + _log_sphere_area(d - 2))


def log_cd(kappa, d: int):
    """log of the vMF normalising constant on S^{d-1}."""
    if d < 2:
        raise InvalidDimension(f"vMF needs d >= 2, got {d}")
    if d == 3:
        return log_c3(kappa)
    k = _check_kappa(kappa)
    if d == 2:
        out = -LOG_2PI - _log_i0(np.atleast_1d(k)).reshape(k.shape)
    else:
        out = np.vectorize(lambda x: _log_cd_quad(float(x), d), otypes=[float])(k)
    return float(out) if np.ndim(out) == 0 else out


def log_sp_gauss_gauss(sq_dist, h1: float, h2: float, d: int):
    """log of ``N(mu1; mu2, h1^2 + h2^2)`` given ``||mu1 - mu2||^2``."""
    s2 = h1 * h1 + h2 * h2
    if not s2 > 0:
        raise DegenerateKernel("h1 = h2 = 0 has no scalar product")
    return -0.5 * d * math.log(2 * math.pi * s2) - np.asarray(sq_dist) / (2 * s2)


def sp_gauss_gauss(mu1, mu2, h1: float, h2: float) -> float:
    """Scalar product of two isotropic Gaussians; ``h2 = 0`` is the Gaussian/Dirac case."""
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=float))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=float))
    sq = float(np.sum((mu1 - mu2) ** 2))
    return float(np.exp(log_sp_gauss_gauss(sq, h1, h2, mu1.size)))


def log_sp_vmf_vmf(mu1, mu2, kappa1, kappa2, d: int | None = None):
    """``log <vMF(mu1,k1) | vMF(mu2,k2)> = log C(k1) + log C(k2) - log C(||k1 mu1 + k2 mu2||)``.

    ``mu1``/``mu2`` may be stacks of unit vectors (broadcast along leading axes).
    The antipodal case ``k1 mu1 + k2 mu2 = 0`` falls out of the series branch of
    ``log_cd``.
    """
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = np.asarray(mu2, dtype=float)
    if d is None:
        d = mu1.shape[-1]
    k = np.linalg.norm(kappa1 * mu1 + kappa2 * mu2, axis=-1)
    out = log_cd(kappa1, d) + log_cd(kappa2, d) - log_cd(k, d)
    return float(out) if np.ndim(out) == 0 else out


def log_sp_vmf_dirac(mu, kappa, u, d: int | None = None):
    """``log <vMF(mu,k) | delta(u)> = log C(k) + k mu.u``."""
    mu = np.asarray(mu, dtype=float)
    u = np.asarray(u, dtype=float)
    if d is None:
        d = mu.shape[-1]
    out = log_cd(kappa, d) + kappa * np.sum(mu * u, axis=-1)
    return float(out) if np.ndim(out) == 0 else out

