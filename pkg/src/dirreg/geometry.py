"""Oriented point sets and the small geometric utilities shared by every module."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DegenerateShape, DimensionError, EmptyShape, ValidationError

NORMAL_TOL = 1e-9


def _frozen(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class OrientedPointSet:
    """Points in R^d (d = 2 or 3) with optional unit normals and connectivity.

    Parameters
    ----------
    points : (n, d) array
    normals : (n, d) array of unit vectors, optional
    faces : (f, 3) integer array of triangle vertex indices, optional (3D meshes)
    closed : bool, optional
        Polyline flag for ordered 2D curves: ``True`` closed, ``False`` open,
        ``None`` when the rows carry no ordering.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    faces: Optional[np.ndarray] = None
    closed: Optional[bool] = None

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.ndim != 2 or pts.shape[1] not in (2, 3):
            raise DimensionError(f"points must have shape (n, 2) or (n, 3), got {pts.shape}")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = _frozen(self.normals)
            if nrm.shape != pts.shape:
                raise DimensionError(f"normals shape {nrm.shape} does not match points {pts.shape}")
            if len(nrm):
                err = np.abs(np.linalg.norm(nrm, axis=1) - 1.0).max()
                if err > NORMAL_TOL:
                    raise ValidationError(f"normals are not unit length (max deviation {err:.3g})")
            object.__setattr__(self, "normals", nrm)
        if self.faces is not None:
            f = np.array(self.faces, dtype=np.int64, copy=True).reshape(-1, 3)
            if f.size and (f.min() < 0 or f.max() >= len(pts)):
                raise ValidationError("face index out of range")
            if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValidationError("face with repeated vertex")
            f.setflags(write=False)
            object.__setattr__(self, "faces", f)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points, normals=None) -> "OrientedPointSet":
        return replace(self, points=points, normals=normals)

    def take(self, index) -> "OrientedPointSet":
        """Row subset; faces are dropped since indices no longer apply."""
        index = np.asarray(index, dtype=np.int64)
        return OrientedPointSet(
            self.points[index],
            None if self.normals is None else self.normals[index],
            None,
            None,
        )


@dataclass(frozen=True, eq=False)
class BoundingBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo, hi = _frozen(self.lo), _frozen(self.hi)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValidationError("bounding box requires lo <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)


@dataclass(frozen=True)
class UnitBoxMap:
    """Record of ``x -> scale * (x - offset)``; invert with :meth:`inverse`."""

    scale: float
    offset: tuple

    def apply(self, pts):
        return self.scale * (np.asarray(pts, dtype=float) - np.asarray(self.offset))

    def inverse(self, pts):
        return np.asarray(pts, dtype=float) / self.scale + np.asarray(self.offset)


def _as_points(shape):
    return shape.points if isinstance(shape, OrientedPointSet) else np.asarray(shape, dtype=float)


def bounding_box(shape) -> BoundingBox:
    pts = _as_points(shape)
    if len(pts) == 0:
        raise EmptyShape("bounding box of an empty shape")
    return BoundingBox(pts.min(axis=0), pts.max(axis=0))


def subsample(shape: OrientedPointSet, m: int, seed: int = 0):
    """Choose ``min(m, n)`` points uniformly without replacement.

    Returns the subsampled shape and the source indices (sorted ascending).
    When ``m >= n`` the input is returned unchanged with indices ``0..n-1``.
    """
    if m < 1:
        raise ValidationError("subsample count must be >= 1")
    n = len(shape)
    if m >= n:
        return shape, np.arange(n)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=m, replace=False))
    return shape.take(idx), idx


def normalize_to_unit_box(shape: OrientedPointSet):
    """Uniformly scale and translate ``shape`` into [0, 1]^d, keeping aspect ratio.

    Normals are untouched: a uniform scale does not rotate them.
    """
    box = bounding_box(shape)
    longest = float(box.extent.max())
    if not longest > 0:
        raise DegenerateShape("shape has zero extent on every axis")
    rec = UnitBoxMap(1.0 / longest, tuple(box.lo.tolist()))
    if rec.scale == 1.0 and not np.any(box.lo):
        return shape, rec
    return replace(shape, points=rec.apply(shape.points)), rec


def rotation_matrix_2d(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def pairwise_sq_dists(a, b) -> np.ndarray:
    """Squared Euclidean distances between the rows of ``a`` and ``b``."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)
