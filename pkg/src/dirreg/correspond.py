"""Point correspondences from a blend of global and local structural distances."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .costs import CorrespondenceSet
from .errors import DimensionError, EmptyShape, InsufficientPoints, ValidationError
from .geometry import pairwise_sq_dists

DEFAULT_K = 5


def _minmax(M):
    lo, hi = M.min(), M.max()
    if hi > lo:
        return (M - lo) / (hi - lo)
    return np.zeros_like(M)


def _check(m, t):
    m = np.asarray(m, dtype=float)
    t = np.asarray(t, dtype=float)
    if len(m) == 0 or len(t) == 0:
        raise EmptyShape("correspondences between empty point sets")
    if m.shape[1] != t.shape[1]:
        raise DimensionError("point sets have different dimensions")
    return m, t


def global_distance(m, t) -> np.ndarray:
    """Squared distances, min-max normalised over the whole matrix."""
    m, t = _check(m, t)
    return _minmax(pairwise_sq_dists(m, t))


def neighbourhood_descriptor(pts, k: int) -> np.ndarray:
    """Sorted distances to the k nearest neighbours divided by their mean."""
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    desc = dist[:, 1:]
    mean = desc.mean(axis=1, keepdims=True)
    return desc / np.where(mean > 0, mean, 1.0)


def local_distance(m, t, k: int = DEFAULT_K) -> np.ndarray:
    m, t = _check(m, t)
    if k < 1 or k >= min(len(m), len(t)):
        raise InsufficientPoints(f"k = {k} must be in [1, min(n1, n2) - 1]")
    return _minmax(pairwise_sq_dists(neighbourhood_descriptor(m, k), neighbourhood_descriptor(t, k)))


def estimate(m, t, alpha: float, k: int = DEFAULT_K) -> CorrespondenceSet:
    """Hungarian assignment on ``alpha * local + (1 - alpha) * global``.

    With unequal sizes every point of the smaller set is matched.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError("alpha must lie in [0, 1]")
    m, t = _check(m, t)
    C = (1.0 - alpha) * global_distance(m, t)
    if alpha > 0:
        C = C + alpha * local_distance(m, t, k)
    rows, cols = linear_sum_assignment(C)
    return CorrespondenceSet(np.column_stack([rows, cols]), alpha)


def to_csv(corr: CorrespondenceSet, path) -> None:
    with open(path, "w") as fh:
        fh.write("i,j\n")
        for i, j in corr.pairs:
            fh.write(f"{i},{j}\n")


def from_csv(path) -> CorrespondenceSet:
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    return CorrespondenceSet(data)
