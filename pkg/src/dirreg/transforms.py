"""Parametric transformation families: 2D/3D rotations and thin-plate splines.

Every transform exposes ``params()`` / ``with_params(vec)`` so the optimizer can
treat it as a flat latent vector, and ``to_dict()`` / :func:`from_dict` for the
JSON files consumed by the ``interpolate`` command.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (
    DegenerateShape,
    DimensionError,
    FamilyMismatch,
    GridMismatch,
    SingularJacobian,
    ValidationError,
)
from .geometry import BoundingBox, rotation_matrix_2d

SINGULAR_DET = 1e-12


def _offset(v, d):
    if v is None:
        return None
    v = np.asarray(v, dtype=float).reshape(d)
    return v


@dataclass(frozen=True, eq=False)
class Rotation2D:
    """Rotation by ``angle`` radians about the origin, optionally followed by a translation."""

    angle: float = 0.0
    offset: Optional[np.ndarray] = None

    family = "rot2"
    dim = 2
    unit_block = None

    def __post_init__(self):
        object.__setattr__(self, "angle", float(self.angle))
        object.__setattr__(self, "offset", _offset(self.offset, 2))

    def matrix(self) -> np.ndarray:
        return rotation_matrix_2d(self.angle)

    def params(self) -> np.ndarray:
        p = [self.angle]
        if self.offset is not None:
            p.extend(self.offset)
        return np.array(p, dtype=float)

    def with_params(self, p) -> "Rotation2D":
        p = np.asarray(p, dtype=float)
        return Rotation2D(p[0], None if self.offset is None else p[1:3])

    def to_dict(self) -> dict:
        d = {"family": self.family, "angle": self.angle}
        if self.offset is not None:
            d["offset"] = self.offset.tolist()
        return d


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def axis_angle_quaternion(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


@dataclass(frozen=True, eq=False)
class Rotation3D:
    """Rotation parameterised by a unit quaternion ``(w, x, y, z)``."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    offset: Optional[np.ndarray] = None

    family = "rot3"
    dim = 3
    unit_block = slice(0, 4)

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(4)
        nq = np.linalg.norm(q)
        if not nq > 0:
            raise ValidationError("zero quaternion")
        object.__setattr__(self, "quat", q / nq)
        object.__setattr__(self, "offset", _offset(self.offset, 3))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Rotation3D":
        return cls(axis_angle_quaternion(axis, angle))

    def matrix(self) -> np.ndarray:
        return quaternion_to_matrix(self.quat)

    def params(self) -> np.ndarray:
        if self.offset is None:
            return self.quat.copy()
        return np.concatenate([self.quat, self.offset])

    def with_params(self, p) -> "Rotation3D":
        p = np.asarray(p, dtype=float)
        return Rotation3D(p[:4], None if self.offset is None else p[4:7])

    def to_dict(self) -> dict:
        d = {"family": self.family, "quaternion": self.quat.tolist()}
        if self.offset is not None:
            d["offset"] = self.offset.tolist()
        return d


def tps_kernel(r, d: int):
    """Radial basis ``U(r)``: ``r^2 log r`` in 2D, ``r`` in 3D, with ``U(0) = 0``."""
    r = np.asarray(r, dtype=float)
    if d == 2:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = r * r * np.log(r)
        return np.where(r > 0, out, 0.0)
    return r.copy()


def tps_kernel_grad(diff, r, d: int):
    """Gradient of ``U(||x - c||)`` w.r.t. ``x``; ``diff = x - c`` has a trailing axis of size d."""
    if d == 2:
        with np.errstate(divide="ignore", invalid="ignore"):
            s = 2.0 * np.log(r) + 1.0
        s = np.where(r > 0, s, 0.0)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(r > 0, 1.0 / r, 0.0)
    return s[..., None] * diff


@dataclass(frozen=True, eq=False)
class Tps:
    """``x -> A x + t + sum_j w_j U(||x - c_j||)`` with fixed control points ``c_j``."""

    A: np.ndarray
    t: np.ndarray
    control_points: np.ndarray
    weights: np.ndarray

    family = "tps"
    unit_block = None

    def __post_init__(self):
        c = np.asarray(self.control_points, dtype=float)
        if c.ndim != 2 or c.shape[1] not in (2, 3):
            raise DimensionError("control points must be (N, 2) or (N, 3)")
        d = c.shape[1]
        A = np.asarray(self.A, dtype=float).reshape(d, d)
        t = np.asarray(self.t, dtype=float).reshape(d)
        w = np.asarray(self.weights, dtype=float)
        if w.shape != c.shape:
            raise ValidationError(f"weights shape {w.shape} must match control points {c.shape}")
        for name, val in (("A", A), ("t", t), ("control_points", c), ("weights", w)):
            object.__setattr__(self, name, val)

    @classmethod
    def identity(cls, control_points) -> "Tps":
        c = np.asarray(control_points, dtype=float)
        d = c.shape[1]
        return cls(np.eye(d), np.zeros(d), c, np.zeros_like(c))

    @property
    def dim(self) -> int:
        return self.control_points.shape[1]

    @property
    def n_params(self) -> int:
        n, d = self.control_points.shape
        return n * d + d * d + d

    def params(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.t, self.weights.ravel()])

    def with_params(self, p) -> "Tps":
        p = np.asarray(p, dtype=float)
        d = self.dim
        return Tps(p[: d * d], p[d * d : d * d + d], self.control_points, p[d * d + d :].reshape(-1, d))

    def bending_energy(self) -> float:
        """``trace(W^T K W)`` over the control-point kernel matrix."""
        c = self.control_points
        r = np.linalg.norm(c[:, None] - c[None], axis=-1)
        K = tps_kernel(r, self.dim)
        return float(np.einsum("ia,ij,ja->", self.weights, K, self.weights))

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "A": self.A.tolist(),
            "t": self.t.tolist(),
            "control_points": self.control_points.tolist(),
            "weights": self.weights.tolist(),
        }


Transform = Union[Rotation2D, Rotation3D, Tps]


def identity_like(family: str, dim: int | None = None, control_points=None, translation: bool = False):
    if family == "rot2":
        return Rotation2D(0.0, np.zeros(2) if translation else None)
    if family == "rot3":
        return Rotation3D(np.array([1.0, 0, 0, 0]), np.zeros(3) if translation else None)
    if family == "tps":
        if control_points is None:
            raise ValidationError("TPS identity needs control points")
        return Tps.identity(control_points)
    raise FamilyMismatch(f"unknown transform family {family!r}")


def from_dict(d: dict) -> Transform:
    fam = d.get("family")
    if fam == "rot2":
        return Rotation2D(d["angle"], d.get("offset"))
    if fam == "rot3":
        return Rotation3D(d["quaternion"], d.get("offset"))
    if fam == "tps":
        return Tps(d["A"], d["t"], d["control_points"], d["weights"])
    raise ValidationError(f"unknown transform family {fam!r}")


def _check_dim(t: Transform, pts):
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != t.dim:
        raise DimensionError(f"{t.family} transform is {t.dim}D, points have shape {pts.shape}")
    return pts


def apply_to_points(t: Transform, pts) -> np.ndarray:
    pts = _check_dim(t, pts)
    if isinstance(t, Tps):
        diff = pts[:, None, :] - t.control_points[None, :, :]
        U = tps_kernel(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)), t.dim)
        return pts @ t.A.T + t.t + U @ t.weights
    out = pts @ t.matrix().T
    if t.offset is not None:
        out = out + t.offset
    return out


def tps_jacobian(t: Tps, pts) -> np.ndarray:
    """Per-point Jacobian ``dphi/dx``, shape (n, d, d)."""
    pts = _check_dim(t, pts)
    diff = pts[:, None, :] - t.control_points[None, :, :]
    r = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    grad = tps_kernel_grad(diff, r, t.dim)
    return t.A[None] + np.einsum("ja,njb->nab", t.weights, grad)


def apply_to_normals(t: Transform, pts, nrm, mode: str = "jacobian", **recompute_kw) -> np.ndarray:
    """Map unit normals through ``t``.

    Rotations apply ``R u``. For a TPS, ``jacobian`` mode uses the inverse
    transpose of the local Jacobian; ``recompute`` re-estimates normals on the
    warped points (k-NN plane fit in 3D, spline in 2D) and orients them to agree
    with the input normals.
    """
    pts = _check_dim(t, pts)
    nrm = np.asarray(nrm, dtype=float)
    if nrm.shape != pts.shape:
        raise DimensionError("points and normals must have the same shape")
    if not isinstance(t, Tps):
        out = nrm @ t.matrix().T
        return out / np.linalg.norm(out, axis=1, keepdims=True)
    if mode == "recompute":
        from . import normals as _normals

        warped = apply_to_points(t, pts)
        if t.dim == 3:
            est = _normals.normals_knn_pca(warped, recompute_kw.get("k", 10))
        else:
            est = _normals.normals_spline2d(warped, closed=recompute_kw.get("closed", True))
        flip = np.sum(est * nrm, axis=1) < 0
        est[flip] *= -1
        return est
    if mode != "jacobian":
        raise ValidationError(f"unknown normal mode {mode!r}")
    J = tps_jacobian(t, pts)
    det = np.linalg.det(J)
    bad = np.flatnonzero(np.abs(det) < SINGULAR_DET)
    if bad.size:
        raise SingularJacobian(int(bad[0]), float(det[bad[0]]))
    out = np.linalg.solve(np.transpose(J, (0, 2, 1)), nrm[..., None])[..., 0]
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def interpolate(transforms: Sequence[Transform], alphas: Sequence[float]) -> Transform:
    """Linear blend ``sum_i alpha_i theta_i`` of same-family parameter vectors.

    Quaternions are sign-aligned with the first entry before blending and the
    result renormalised.
    """
    transforms = list(transforms)
    alphas = np.asarray(alphas, dtype=float)
    if len(transforms) == 0 or len(transforms) != len(alphas):
        raise ValidationError("need one alpha per transform")
    fam = transforms[0].family
    if any(t.family != fam for t in transforms):
        raise FamilyMismatch("cannot interpolate across transform families")
    if fam == "tps":
        c0 = transforms[0].control_points
        if any(t.control_points.shape != c0.shape or not np.array_equal(t.control_points, c0) for t in transforms):
            raise GridMismatch("TPS transforms use different control grids")
    sizes = {t.params().size for t in transforms}
    if len(sizes) != 1:
        raise FamilyMismatch("transforms have different parameter layouts")
    P = np.stack([t.params() for t in transforms])
    if fam == "rot3":
        ref = P[0, :4]
        P[:, :4] *= np.where(P[:, :4] @ ref < 0, -1.0, 1.0)[:, None]
    blended = alphas @ P
    if fam == "rot3" and np.linalg.norm(blended[:4]) == 0:
        raise ValidationError("quaternion blend is degenerate")
    return transforms[0].with_params(blended)


def default_grid_shape(box: BoundingBox) -> tuple:
    """4x3 in 2D (4 along the longer axis), 5x5x5 in 3D."""
    if box.lo.size == 3:
        return (5, 5, 5)
    return (4, 3) if box.extent[0] >= box.extent[1] else (3, 4)


def control_grid(box: BoundingBox, per_axis=None) -> np.ndarray:
    """Regular lattice spanning ``box`` including its corners."""
    d = box.lo.size
    if per_axis is None:
        per_axis = default_grid_shape(box)
    if np.isscalar(per_axis):
        per_axis = (int(per_axis),) * d
    per_axis = tuple(int(p) for p in per_axis)
    if len(per_axis) != d or min(per_axis) < 2:
        raise ValidationError("need >= 2 grid points on every axis")
    if np.any(box.extent <= 0):
        raise DegenerateShape("control grid over a box with zero extent")
    axes = [np.linspace(box.lo[k], box.hi[k], per_axis[k]) for k in range(d)]
    return np.array(list(itertools.product(*axes)), dtype=float)


def fit_tps(src, dst) -> Tps:
    """Interpolating TPS (with the usual side conditions) taking ``src[i]`` to ``dst[i]``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    n, d = src.shape
    K = tps_kernel(np.linalg.norm(src[:, None] - src[None], axis=-1), d)
    P = np.hstack([np.ones((n, 1)), src])
    L = np.zeros((n + d + 1, n + d + 1))
    L[:n, :n] = K
    L[:n, n:] = P
    L[n:, :n] = P.T
    rhs = np.zeros((n + d + 1, d))
    rhs[:n] = dst
    sol = np.linalg.solve(L, rhs)
    w, aff = sol[:n], sol[n:]
    return Tps(aff[1:].T, aff[0], src, w)
