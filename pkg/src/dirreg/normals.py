"""Normal estimation for ordered curves, triangle meshes and raw 3D point clouds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from .errors import DegenerateCurve, InsufficientPoints, IsolatedVertex, ValidationError

METHODS = ("analytic", "spline2d", "mesh_face_avg", "knn_pca")


@dataclass(frozen=True)
class NormalEstimatorConfig:
    method: str = "knn_pca"
    k_neighbors: int = 10
    embed_2d_in_s2: bool = True
    closed: bool = True
    flip: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown normal method {self.method!r}")
        if self.method == "knn_pca" and self.k_neighbors < 3:
            raise ValidationError("knn_pca needs k_neighbors >= 3")


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def normals_spline2d(pts, closed: bool = True, flip: bool = False) -> np.ndarray:
    """Left-hand normals of a cubic spline through ordered 2D points.

    The spline is parameterised by cumulative chord length (periodic when
    ``closed``, natural otherwise). Tangents are rotated by -90 degrees, which
    points outward on counter-clockwise closed curves.
    """
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValidationError("spline normals need (n, 2) points")
    if len(pts) < 4:
        raise InsufficientPoints("spline normals need at least 4 points")
    loop = np.vstack([pts, pts[:1]]) if closed else pts
    seg = np.linalg.norm(np.diff(loop, axis=0), axis=1)
    if np.any(seg == 0):
        raise DegenerateCurve("duplicate consecutive points")
    s = np.concatenate([[0.0], np.cumsum(seg)])
    spline = CubicSpline(s, loop, bc_type="periodic" if closed else "natural")
    tan = spline(s[: len(pts)], 1)
    nrm = _unit(np.column_stack([tan[:, 1], -tan[:, 0]]))
    return -nrm if flip else nrm


def face_normals(pts, faces) -> np.ndarray:
    p = np.asarray(pts, dtype=float)
    f = np.asarray(faces, dtype=np.int64)
    cr = np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]])
    return _unit(cr)


def normals_mesh(pts, faces, fallback_k: int = 10) -> np.ndarray:
    """Per-vertex normal as the normalised unweighted mean of incident face normals.

    Vertices that belong to no face get a k-NN plane-fit normal instead; pass
    ``fallback_k=0`` to raise :class:`IsolatedVertex` for them.
    """
    pts = np.asarray(pts, dtype=float)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    fn = face_normals(pts, faces)
    acc = np.zeros_like(pts)
    for c in range(3):
        np.add.at(acc, faces[:, c], fn)
    counts = np.bincount(faces.ravel(), minlength=len(pts))
    isolated = np.flatnonzero(counts == 0)
    norm = np.linalg.norm(acc, axis=1)
    out = np.zeros_like(pts)
    ok = norm > 0
    out[ok] = acc[ok] / norm[ok, None]
    if isolated.size:
        if fallback_k <= 0 or len(pts) <= fallback_k:
            raise IsolatedVertex(isolated)
        est = normals_knn_pca(pts, fallback_k)
        out[isolated] = est[isolated]
    return out


def _plane_normals(pts, nbr_idx):
    nb = pts[nbr_idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def orient_normals_mst(pts, nrm, k: int) -> np.ndarray:
    """Make orientations consistent by flipping along a Euclidean MST of a k-NN graph.

    Each connected component is rooted at its point farthest from the global
    centroid (lowest index on ties) and the root normal is pointed away from the
    centroid.
    """
    pts = np.asarray(pts, dtype=float)
    nrm = np.array(nrm, dtype=float, copy=True)
    n = len(pts)
    tree = cKDTree(pts)
    dist, idx = tree.query(pts, k=min(k + 1, n))
    rows = np.repeat(np.arange(n), idx.shape[1] - 1)
    cols = idx[:, 1:].ravel()
    w = dist[:, 1:].ravel()
    # zero weights would vanish from the sparse graph
    w = np.where(w > 0, w, 1e-300)
    g = coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr()
    g = g.maximum(g.T)
    mst = minimum_spanning_tree(g)
    mst = mst + mst.T
    ncomp, labels = connected_components(mst, directed=False)
    centroid = pts.mean(axis=0)
    far = np.linalg.norm(pts - centroid, axis=1)
    for c in range(ncomp):
        members = np.flatnonzero(labels == c)
        root = int(members[np.argmax(far[members])])
        if np.dot(nrm[root], pts[root] - centroid) < 0:
            nrm[root] *= -1
        order, pred = breadth_first_order(mst, root, directed=False)
        for v in order[1:]:
            if np.dot(nrm[v], nrm[pred[v]]) < 0:
                nrm[v] *= -1
    return nrm


def normals_knn_pca(pts, k: int, orient: bool = True) -> np.ndarray:
    """Plane-fit normals from the ``k`` nearest neighbours (the point itself included)."""
    pts = np.asarray(pts, dtype=float)
    n = len(pts)
    if k < 3:
        raise ValidationError("k must be >= 3")
    if k >= n:
        raise InsufficientPoints(f"k = {k} needs more than {n} points")
    _, idx = cKDTree(pts).query(pts, k=k)
    nrm = _plane_normals(pts, idx)
    if orient:
        nrm = orient_normals_mst(pts, nrm, k)
    return _unit(nrm)


def embed_s1_in_s2(nrm) -> np.ndarray:
    nrm = np.asarray(nrm, dtype=float)
    return np.hstack([nrm, np.zeros((len(nrm), 1))])


def estimate(shape, config: NormalEstimatorConfig) -> np.ndarray:
    """Dispatch on ``config.method`` for an :class:`OrientedPointSet`."""
    if config.method == "spline2d":
        closed = shape.closed if shape.closed is not None else config.closed
        return normals_spline2d(shape.points, closed=closed, flip=config.flip)
    if config.method == "mesh_face_avg":
        if shape.faces is None:
            raise ValidationError("mesh normals need faces")
        return normals_mesh(shape.points, shape.faces, fallback_k=config.k_neighbors)
    if config.method == "knn_pca":
        return normals_knn_pca(shape.points, config.k_neighbors)
    raise ValidationError("analytic normals come from the curve generator, not from points")
