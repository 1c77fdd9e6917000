import numpy as np
import pytest

from dirreg.errors import DegenerateCurve, InsufficientPoints, IsolatedVertex, ValidationError
from dirreg.geometry import OrientedPointSet
from dirreg.harness import icosphere
from dirreg.normals import (
    NormalEstimatorConfig,
    embed_s1_in_s2,
    estimate,
    normals_knn_pca,
    normals_mesh,
    normals_spline2d,
)
from dirreg.transforms import Rotation3D


def _angles_deg(a, b):
    return np.degrees(np.arccos(np.clip(np.sum(a * b, axis=1), -1, 1)))


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = np.pi * (1 + 5**0.5) * i
    r = np.sqrt(1 - z * z)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def test_spline_circle_radial():
    t = 2 * np.pi * np.arange(50) / 50
    pts = np.column_stack([np.cos(t), np.sin(t)])
    nrm = normals_spline2d(pts, closed=True)
    assert _angles_deg(nrm, pts).max() < 1.0
    np.testing.assert_allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-12)


def test_spline_flip_and_clockwise():
    t = 2 * np.pi * np.arange(30) / 30
    pts = np.column_stack([np.cos(t), np.sin(t)])
    assert _angles_deg(normals_spline2d(pts, flip=True), -pts).max() < 1.0
    assert _angles_deg(normals_spline2d(pts[::-1]), -pts[::-1]).max() < 1.0


def test_spline_straight_segment():
    x = np.linspace(0, 1, 8)
    pts = np.column_stack([x, 2 * x + 1])
    nrm = normals_spline2d(pts, closed=False)
    expected = np.array([2.0, -1.0]) / np.sqrt(5)
    np.testing.assert_allclose(nrm, np.tile(expected, (8, 1)), atol=1e-12)


def test_spline_square_edge_interiors():
    s = np.linspace(0, 1, 21)[:-1]
    pts = np.vstack([
        np.column_stack([s, np.zeros_like(s)]),
        np.column_stack([np.ones_like(s), s]),
        np.column_stack([1 - s, np.ones_like(s)]),
        np.column_stack([np.zeros_like(s), 1 - s]),
    ])
    nrm = normals_spline2d(pts)
    # the middle of each edge is far enough from the corners to be axis aligned
    for idx, expected in ((10, (0, -1)), (30, (1, 0)), (50, (0, 1)), (70, (-1, 0))):
        np.testing.assert_allclose(nrm[idx], expected, atol=1e-2)


def test_spline_errors():
    with pytest.raises(DegenerateCurve):
        normals_spline2d([[0, 0], [1, 0], [1, 0], [0, 1], [-1, 0]])
    with pytest.raises(InsufficientPoints):
        normals_spline2d([[0, 0], [1, 0], [0, 1]])


def _cube_mesh():
    # each face of [-1, 1]^3 is split into 2x2 quads, each quad fanned around its centre
    verts, faces, index = [], [], {}

    def vid(p):
        key = tuple(np.round(p, 9))
        if key not in index:
            index[key] = len(verts)
            verts.append(np.array(p, dtype=float))
        return index[key]

    g = np.linspace(-1, 1, 3)
    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        for sign in (-1.0, 1.0):
            normal = np.zeros(3)
            normal[axis] = sign
            for a in range(2):
                for b in range(2):
                    ring = []
                    for da, db in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = normal.copy()
                        p[u_ax], p[v_ax] = g[a + da], g[b + db]
                        ring.append(vid(p))
                    c = normal.copy()
                    c[u_ax], c[v_ax] = (g[a] + g[a + 1]) / 2, (g[b] + g[b + 1]) / 2
                    ci = vid(c)
                    for q in range(4):
                        f = (ci, ring[q], ring[(q + 1) % 4])
                        e1, e2 = verts[f[1]] - verts[f[0]], verts[f[2]] - verts[f[0]]
                        faces.append(f if np.cross(e1, e2) @ normal > 0 else (f[0], f[2], f[1]))
    return np.array(verts), np.array(faces)


def test_mesh_cube():
    v, f = _cube_mesh()
    nrm = normals_mesh(v, f)
    for p, n in zip(v, nrm):
        nonzero = np.abs(p) == 1
        if nonzero.sum() == 1:
            np.testing.assert_allclose(n, p * nonzero, atol=1e-12)
        elif nonzero.sum() == 3:
            np.testing.assert_allclose(n, p / np.sqrt(3), atol=1e-12)


def test_mesh_flat_fan():
    t = 2 * np.pi * np.arange(6) / 6
    v = np.vstack([[0, 0, 0], np.column_stack([np.cos(t), np.sin(t), np.zeros(6)])])
    f = np.array([[0, 1 + i, 1 + (i + 1) % 6] for i in range(6)])
    np.testing.assert_allclose(normals_mesh(v, f), np.tile([0, 0, 1.0], (7, 1)), atol=1e-15)


def test_mesh_icosphere_radial():
    v, f = icosphere(3)
    assert _angles_deg(normals_mesh(v, f), v).max() < 2.0


def test_mesh_face_permutation_invariant():
    v, f = icosphere(2)
    rng = np.random.default_rng(0)
    a = normals_mesh(v, f)
    b = normals_mesh(v, f[rng.permutation(len(f))])
    np.testing.assert_allclose(a, b, atol=1e-14)
    perm = rng.permutation(len(v))
    inv = np.argsort(perm)
    c = normals_mesh(v[perm], inv[f])
    np.testing.assert_allclose(c, a[perm], atol=1e-14)


def test_mesh_isolated_vertex():
    v, f = icosphere(1)
    v = np.vstack([v, [[2.0, 0, 0]]])
    with pytest.raises(IsolatedVertex):
        normals_mesh(v, f, fallback_k=0)
    nrm = normals_mesh(v, f, fallback_k=5)
    assert np.all(np.isfinite(nrm))


def test_knn_plane():
    rng = np.random.default_rng(1)
    pts = np.column_stack([rng.uniform(size=(200, 2)), np.zeros(200)])
    nrm = normals_knn_pca(pts, 10)
    assert np.allclose(np.abs(nrm[:, 2]), 1.0)
    assert len(np.unique(np.sign(nrm[:, 2]))) == 1


def test_knn_sphere_outward():
    pts = _fibonacci_sphere(1000)
    nrm = normals_knn_pca(pts, 40)
    assert np.mean(_angles_deg(nrm, pts) < 10) >= 0.99
    np.testing.assert_allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-9)


def test_knn_parallel_planes():
    rng = np.random.default_rng(2)
    a = np.column_stack([rng.uniform(size=(150, 2)), np.zeros(150)])
    b = np.column_stack([rng.uniform(size=(150, 2)), np.full(150, 10.0)])
    nrm = normals_knn_pca(np.vstack([a, b]), 8)
    assert len(np.unique(np.sign(nrm[:150, 2]))) == 1
    assert len(np.unique(np.sign(nrm[150:, 2]))) == 1


def test_knn_rotation_equivariant():
    pts = _fibonacci_sphere(400) * np.array([1.0, 0.7, 0.5])
    R = Rotation3D.from_axis_angle([1, 1, 0], 0.8).matrix()
    a = normals_knn_pca(pts, 15)
    b = normals_knn_pca(pts @ R.T, 15)
    np.testing.assert_allclose(b, a @ R.T, atol=1e-9)


def test_knn_errors():
    pts = np.random.default_rng(3).normal(size=(5, 3))
    with pytest.raises(InsufficientPoints):
        normals_knn_pca(pts, 5)
    with pytest.raises(ValidationError):
        NormalEstimatorConfig("knn_pca", k_neighbors=2)


def test_embed():
    np.testing.assert_array_equal(embed_s1_in_s2([[1.0, 0.0], [0.0, -1.0]]), [[1, 0, 0], [0, -1, 0]])
    u = np.array([[0.6, 0.8]])
    np.testing.assert_array_equal(embed_s1_in_s2(u)[:, :2], u)


def test_estimate_dispatch():
    v, f = icosphere(2)
    shape = OrientedPointSet(v, faces=f)
    np.testing.assert_allclose(estimate(shape, NormalEstimatorConfig("mesh_face_avg")), normals_mesh(v, f))
    with pytest.raises(ValidationError):
        estimate(OrientedPointSet(v), NormalEstimatorConfig("mesh_face_avg"))
    with pytest.raises(ValidationError):
        estimate(shape, NormalEstimatorConfig("analytic"))
    with pytest.raises(ValidationError):
        NormalEstimatorConfig("magic")
