"""L2 registration objectives between kernel density estimates.

Each cost is ``||p1||^2 - 2 <p1|p2>`` for KDEs built on positions (Gaussian),
normals (von Mises-Fisher or Dirac) or both (product kernels). In
``rigid_scalar_product`` mode ``||p1||^2`` is constant, so only the negated
cross sum is returned with constant factors dropped. When the largest possible
per-pair log term exceeds ``RIGID_KAPPA_SHIFT`` the sum is also scaled down by
a factor that depends on the concentrations alone, which keeps it finite
without moving the optimum. Every function
returns a value to *minimise*.

Per-pair terms are evaluated in log form and accumulated block by block with
a max shift; the row-block partition is fixed, so results do not depend on the
worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DimensionError, EmptyShape, MissingNormals, ValidationError
from .geometry import OrientedPointSet
from .kernels import KernelParams, log_cd
from .transforms import Tps, apply_to_normals, apply_to_points

FAMILIES = ("x", "x-delta", "u", "u-delta", "xu", "xu-delta")
MODES = ("full", "rigid_scalar_product")
_BLOCK_ELEMS = 1 << 16
RIGID_KAPPA_SHIFT = 650.0

_pool: ThreadPoolExecutor | None = None
_pool_size = 0


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("DIRREG_THREADS", "1")))
    except ValueError:
        return 1


def _executor(n: int) -> ThreadPoolExecutor:
    global _pool, _pool_size
    if _pool is None or _pool_size != n:
        _pool = ThreadPoolExecutor(max_workers=n)
        _pool_size = n
    return _pool


@dataclass(frozen=True)
class CorrespondenceSet:
    """One-to-one (model index, target index) pairs and the mixing weight that produced them."""

    pairs: np.ndarray
    alpha: float = float("nan")

    def __post_init__(self):
        p = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if len(np.unique(p[:, 0])) != len(p) or len(np.unique(p[:, 1])) != len(p):
            raise ValidationError("correspondences must be one-to-one")
        p.setflags(write=False)
        object.__setattr__(self, "pairs", p)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def model_index(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def target_index(self) -> np.ndarray:
        return self.pairs[:, 1]


@dataclass(frozen=True)
class CostSpec:
    family: str
    kernel: KernelParams
    mode: str = "full"
    correspondences: Optional[CorrespondenceSet] = None
    embed_2d: bool = True
    bending: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown cost family {self.family!r}; expected one of {FAMILIES}")
        if self.mode not in MODES:
            raise ValidationError(f"unknown cost mode {self.mode!r}")
        if self.bending < 0:
            raise ValidationError("bending weight must be >= 0")

    @property
    def uses_positions(self) -> bool:
        return self.family.startswith("x")

    @property
    def uses_normals(self) -> bool:
        return "u" in self.family

    @property
    def variant(self) -> str:
        return "dirac" if self.family.endswith("delta") else "vmf"

    def with_kernel(self, kernel: KernelParams) -> "CostSpec":
        return replace(self, kernel=kernel)

    def with_correspondences(self, corr) -> "CostSpec":
        return replace(self, correspondences=corr)


# ---------------------------------------------------------------------------
# pair-term machinery


def _lse_blocks(fn, n_rows: int, n_cols: int) -> float:
    """``log sum_{i,j} exp(fn(rows)[i, j])`` over fixed row blocks."""
    step = max(1, _BLOCK_ELEMS // max(n_cols, 1))
    blocks = [slice(s, min(s + step, n_rows)) for s in range(0, n_rows, step)]

    def one(sl):
        L = fn(sl)
        m = float(L.max())
        if not np.isfinite(m):
            return m, 0.0
        return m, float(np.exp(L - m).sum())

    workers = worker_count()
    if workers > 1 and len(blocks) > 1:
        parts = list(_executor(workers).map(one, blocks))
    else:
        parts = [one(sl) for sl in blocks]
    ms = np.array([p[0] for p in parts])
    M = ms.max()
    if not np.isfinite(M):
        return M
    ss = np.array([p[1] for p in parts])
    return M + math.log(float(np.sum(np.exp(ms - M) * ss)))


def _sq(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _log_gauss(a, b, s2: float, with_const: bool):
    d = a.shape[1]
    out = -_sq(a, b) / (2.0 * s2)
    if with_const:
        out = out - 0.5 * d * math.log(2.0 * math.pi * s2)
    return out


def _log_dir(ua, ub, k1: float, k2: float, variant: str, with_const: bool):
    """log directional factor: vMF x vMF or vMF x Dirac."""
    d = ua.shape[1]
    if variant == "dirac":
        out = k1 * (ua @ ub.T)
        return out + log_cd(k1, d) if with_const else out
    s = k1 * ua[:, None, :] + k2 * ub[None, :, :]
    out = -log_cd(np.sqrt(np.einsum("ijk,ijk->ij", s, s)), d)
    return out + log_cd(k1, d) + log_cd(k2, d) if with_const else out


def _log_dir_pairs(ua, ub, k1, k2, variant, with_const):
    """Same as :func:`_log_dir` but for aligned rows (correspondence mode)."""
    d = ua.shape[1]
    if variant == "dirac":
        out = k1 * np.sum(ua * ub, axis=1)
        return out + log_cd(k1, d) if with_const else out
    out = -log_cd(np.linalg.norm(k1 * ua + k2 * ub, axis=1), d)
    return out + log_cd(k1, d) + log_cd(k2, d) if with_const else out


def _lse(v) -> float:
    v = np.asarray(v, dtype=float)
    m = float(v.max())
    if not np.isfinite(m):
        return m
    return m + math.log(float(np.exp(v - m).sum()))


def _rigid_shift(k: KernelParams, use_u: bool, variant: str, d: int) -> float:
    """Largest attainable per-pair log term in rigid mode, less the allowed headroom."""
    if not use_u:
        return 0.0
    top = k.kappa1 if variant == "dirac" else -float(log_cd(k.kappa1 + k.kappa2, d))
    return max(0.0, top - RIGID_KAPPA_SHIFT)


def _prep(model: OrientedPointSet, target: OrientedPointSet, need_normals: bool, embed: bool):
    if len(model) == 0 or len(target) == 0:
        raise EmptyShape("cannot evaluate a cost on an empty shape")
    if model.dim != target.dim:
        raise DimensionError(f"model is {model.dim}D but target is {target.dim}D")
    if not need_normals:
        return model.points, None, target.points, None
    if model.normals is None or target.normals is None:
        raise MissingNormals("this cost needs normals on both shapes")
    um, ut = model.normals, target.normals
    if embed and um.shape[1] == 2:
        um = np.hstack([um, np.zeros((len(um), 1))])
        ut = np.hstack([ut, np.zeros((len(ut), 1))])
    return model.points, um, target.points, ut


def _evaluate(model, target, k: KernelParams, use_x: bool, use_u: bool, variant: str,
              mode: str, corr: Optional[CorrespondenceSet], embed: bool) -> float:
    xm, um, xt, ut = _prep(model, target, use_u, embed)
    full = mode == "full"
    s2_self = 2.0 * k.h1 * k.h1
    s2_cross = k.h1 * k.h1 + k.h2 * k.h2
    k2 = k.kappa2 if variant == "vmf" else 0.0

    if corr is not None:
        i, j = corr.model_index, corr.target_index
        if len(i) == 0:
            raise EmptyShape("empty correspondence set")
        n = len(i)
        cross = np.zeros(n)
        if use_x:
            d = xm.shape[1]
            sq = np.sum((xm[i] - xt[j]) ** 2, axis=1)
            cross += -sq / (2 * s2_cross) - (0.5 * d * math.log(2 * math.pi * s2_cross) if full else 0.0)
        if use_u:
            cross += _log_dir_pairs(um[i], ut[j], k.kappa1, k2, variant, full)
        log_cross = _lse(cross)
        if not full:
            return -math.exp(log_cross - _rigid_shift(k, use_u, variant, um.shape[1] if use_u else 0))
        self_terms = np.zeros(n)
        if use_x:
            self_terms += -0.5 * xm.shape[1] * math.log(2 * math.pi * s2_self)
        if use_u:
            self_terms += _log_dir_pairs(um[i], um[i], k.kappa1, k.kappa1, "vmf", True)
        return (math.exp(_lse(self_terms)) - 2.0 * math.exp(log_cross)) / (n * n)

    n1, n2 = len(xm), len(xt)

    def cross_block(sl):
        L = 0.0
        if use_x:
            L = L + _log_gauss(xm[sl], xt, s2_cross, full)
        if use_u:
            L = L + _log_dir(um[sl], ut, k.kappa1, k2, variant, full)
        return L

    log_cross = _lse_blocks(cross_block, n1, n2)
    if not full:
        return -math.exp(log_cross - _rigid_shift(k, use_u, variant, um.shape[1] if use_u else 0))

    def self_block(sl):
        L = 0.0
        if use_x:
            L = L + _log_gauss(xm[sl], xm, s2_self, True)
        if use_u:
            L = L + _log_dir(um[sl], um, k.kappa1, k.kappa1, "vmf", True)
        return L

    log_self = _lse_blocks(self_block, n1, n1)
    return math.exp(log_self) / (n1 * n1) - 2.0 * math.exp(log_cross) / (n1 * n2)


# ---------------------------------------------------------------------------
# public objectives


def cost_x(model, target, k: KernelParams, corr=None, mode: str = "full", embed_2d: bool = True) -> float:
    """Gaussian-position cost; ``k.h2 = 0`` gives the Dirac-target variant."""
    return _evaluate(model, target, k, True, False, "vmf", mode, corr, embed_2d)


def cost_u(model, target, k: KernelParams, variant: str = "vmf", mode: str = "full",
           corr=None, embed_2d: bool = True) -> float:
    """Normals-only cost with vMF (``variant="vmf"``) or Dirac target kernels."""
    return _evaluate(model, target, k, False, True, variant, mode, corr, embed_2d)


def cost_xu(model, target, k: KernelParams, variant: str = "vmf", mode: str = "full",
            corr=None, embed_2d: bool = True) -> float:
    """Product-kernel cost on positions and normals."""
    return _evaluate(model, target, k, True, True, variant, mode, corr, embed_2d)


def effective_kernel(spec: CostSpec) -> KernelParams:
    """Kernel with ``h2`` zeroed for the Dirac-position family."""
    if spec.family == "x-delta":
        return replace(spec.kernel, h2=0.0)
    return spec.kernel


def check_compatible(spec: CostSpec, transform) -> None:
    is_tps = isinstance(transform, Tps)
    if spec.mode == "rigid_scalar_product" and is_tps:
        raise ValidationError("rigid_scalar_product mode needs a rotation transform")
    if is_tps and spec.family in ("u", "u-delta"):
        raise ValidationError("normals-only costs cannot drive a non-rigid (TPS) transform")


def transform_shape(shape: OrientedPointSet, t, normal_mode: str = "jacobian") -> OrientedPointSet:
    pts = apply_to_points(t, shape.points)
    nrm = None
    if shape.normals is not None:
        nrm = apply_to_normals(t, shape.points, shape.normals, mode=normal_mode)
    return OrientedPointSet(pts, nrm)


def evaluate_spec(spec: CostSpec, model, target) -> float:
    """Evaluate the family named by ``spec`` on already-transformed shapes."""
    k = effective_kernel(spec)
    corr = spec.correspondences
    if spec.family in ("x", "x-delta"):
        return cost_x(model, target, k, corr, spec.mode, spec.embed_2d)
    if spec.family in ("u", "u-delta"):
        return cost_u(model, target, k, spec.variant, spec.mode, corr, spec.embed_2d)
    return cost_xu(model, target, k, spec.variant, spec.mode, corr, spec.embed_2d)


def cost_value(spec: CostSpec, model: OrientedPointSet, target: OrientedPointSet, t,
               normal_mode: str = "jacobian") -> float:
    """Apply ``t`` to the model, then evaluate the chosen cost (plus optional bending energy)."""
    check_compatible(spec, t)
    if spec.uses_normals and model.normals is None:
        raise MissingNormals("model has no normals")
    moved = transform_shape(model if spec.uses_normals else OrientedPointSet(model.points), t, normal_mode)
    val = evaluate_spec(spec, moved, target)
    if spec.bending > 0 and isinstance(t, Tps):
        val += spec.bending * t.bending_energy()
    return val
