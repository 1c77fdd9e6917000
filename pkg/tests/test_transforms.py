import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dirreg.errors import DegenerateShape, DimensionError, FamilyMismatch, GridMismatch, SingularJacobian
from dirreg.geometry import BoundingBox
from dirreg.transforms import (
    Rotation2D,
    Rotation3D,
    Tps,
    apply_to_normals,
    apply_to_points,
    control_grid,
    fit_tps,
    from_dict,
    identity_like,
    interpolate,
    tps_jacobian,
    tps_kernel,
)


def _random_tps(rng, d=2, scale=0.1):
    c = control_grid(BoundingBox(np.zeros(d), np.ones(d)))
    return Tps(np.eye(d) + scale * rng.normal(size=(d, d)), scale * rng.normal(size=d), c,
               scale * rng.normal(size=c.shape))


def test_rotation2d_quarter_turn():
    np.testing.assert_allclose(apply_to_points(Rotation2D(np.pi / 2), [[1.0, 0.0]]), [[0.0, 1.0]], atol=1e-15)


def test_rotation2d_offset():
    out = apply_to_points(Rotation2D(0.0, [1.0, -2.0]), [[0.5, 0.5]])
    np.testing.assert_allclose(out, [[1.5, -1.5]])


def test_rotation3d_quaternion_matches_rodrigues():
    axis = np.array([1.0, 2.0, -0.5])
    axis /= np.linalg.norm(axis)
    ang = 0.7
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    R = np.eye(3) + math.sin(ang) * K + (1 - math.cos(ang)) * K @ K
    np.testing.assert_allclose(Rotation3D.from_axis_angle(axis, ang).matrix(), R, atol=1e-14)


def test_rotation3d_normalises_quaternion():
    r = Rotation3D([2.0, 0, 0, 0])
    assert np.linalg.norm(r.quat) == pytest.approx(1.0, abs=1e-15)


def test_rotations_preserve_distances_and_norms():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(30, 3))
    nrm = rng.normal(size=(30, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    r = Rotation3D(rng.normal(size=4))
    out = apply_to_points(r, pts)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
    np.testing.assert_allclose(d1, d0, atol=1e-12)
    un = apply_to_normals(r, pts, nrm)
    np.testing.assert_allclose(np.linalg.norm(un, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(un, nrm @ r.matrix().T, atol=1e-12)


def test_identity_tps_leaves_points_and_normals():
    rng = np.random.default_rng(2)
    pts = rng.uniform(size=(20, 2))
    nrm = rng.normal(size=(20, 2))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    t = Tps.identity(control_grid(BoundingBox(np.zeros(2), np.ones(2))))
    np.testing.assert_array_equal(apply_to_points(t, pts), pts)
    np.testing.assert_allclose(apply_to_normals(t, pts, nrm), nrm, atol=1e-15)


def test_tps_single_control_hand_value():
    t = Tps(np.eye(2), np.zeros(2), [[0.0, 0.0]], [[1.0, 0.0]])
    np.testing.assert_allclose(apply_to_points(t, [[math.e, 0.0]]), [[math.e + math.e ** 2, 0.0]], rtol=1e-14)


def test_tps_kernel_zero_radius():
    assert tps_kernel(0.0, 2) == 0.0
    assert tps_kernel(0.0, 3) == 0.0
    assert tps_kernel(math.e, 2) == pytest.approx(math.e ** 2)
    assert tps_kernel(2.5, 3) == 2.5


def test_tps_at_control_point_is_finite():
    t = _random_tps(np.random.default_rng(3))
    out = apply_to_points(t, t.control_points)
    assert np.all(np.isfinite(out))
    assert np.all(np.isfinite(tps_jacobian(t, t.control_points)))


def test_tps_zero_weights_is_affine():
    rng = np.random.default_rng(4)
    A, b = rng.normal(size=(3, 3)), rng.normal(size=3)
    c = control_grid(BoundingBox(np.zeros(3), np.ones(3)))
    t = Tps(A, b, c, np.zeros_like(c))
    pts = rng.normal(size=(10, 3))
    np.testing.assert_allclose(apply_to_points(t, pts), pts @ A.T + b, atol=1e-13)


@pytest.mark.parametrize("d", [2, 3])
def test_tps_jacobian_matches_finite_differences(d):
    rng = np.random.default_rng(5 + d)
    t = _random_tps(rng, d)
    pts = rng.uniform(0.05, 0.95, size=(6, d))
    J = tps_jacobian(t, pts)
    eps = 1e-6
    for k in range(d):
        e = np.zeros(d)
        e[k] = eps
        col = (apply_to_points(t, pts + e) - apply_to_points(t, pts - e)) / (2 * eps)
        np.testing.assert_allclose(J[:, :, k], col, atol=1e-7)


def test_affine_tps_normals_inverse_transpose():
    c = control_grid(BoundingBox(np.zeros(2), np.ones(2)))
    t = Tps(np.diag([2.0, 1.0]), np.zeros(2), c, np.zeros_like(c))
    pts = np.array([[0.3, 0.3], [0.6, 0.2]])
    nrm = np.array([[1.0, 0.0], [1 / math.sqrt(2), 1 / math.sqrt(2)]])
    out = apply_to_normals(t, pts, nrm)
    np.testing.assert_allclose(out[0], [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(out[1], np.array([0.5, 1.0]) / math.hypot(0.5, 1.0), atol=1e-15)


def test_rotation_tps_normals_equal_rotation():
    ang = 0.4
    R = Rotation2D(ang).matrix()
    c = control_grid(BoundingBox(np.zeros(2), np.ones(2)))
    t = Tps(R, np.zeros(2), c, np.zeros_like(c))
    rng = np.random.default_rng(6)
    pts = rng.uniform(size=(10, 2))
    nrm = rng.normal(size=(10, 2))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    np.testing.assert_allclose(apply_to_normals(t, pts, nrm), nrm @ R.T, atol=1e-13)


def test_tps_normals_stay_perpendicular_to_warped_tangents():
    rng = np.random.default_rng(7)
    t = _random_tps(rng, 2, scale=0.05)
    s = np.linspace(0, 1, 7)[1:-1]
    pts = np.column_stack([0.2 + 0.6 * s, 0.3 + 0.2 * s])
    tangent = np.array([0.6, 0.2])
    nrm = np.tile(np.array([-0.2, 0.6]) / math.hypot(0.2, 0.6), (len(s), 1))
    warped_tan = np.einsum("nab,b->na", tps_jacobian(t, pts), tangent)
    out = apply_to_normals(t, pts, nrm)
    np.testing.assert_allclose(np.sum(out * warped_tan, axis=1), 0.0, atol=1e-13)


def test_singular_jacobian():
    c = control_grid(BoundingBox(np.zeros(2), np.ones(2)))
    t = Tps(np.diag([1.0, 0.0]), np.zeros(2), c, np.zeros_like(c))
    with pytest.raises(SingularJacobian):
        apply_to_normals(t, [[0.5, 0.5]], [[1.0, 0.0]])


def test_recompute_mode_on_rotation_like_tps():
    theta = np.linspace(0, 2 * np.pi, 80, endpoint=False)
    pts = 0.5 + 0.3 * np.column_stack([np.cos(theta), np.sin(theta)])
    nrm = np.column_stack([np.cos(theta), np.sin(theta)])
    c = control_grid(BoundingBox(np.zeros(2), np.ones(2)))
    t = Tps(np.diag([1.5, 1.5]), np.zeros(2), c, np.zeros_like(c))
    out = apply_to_normals(t, pts, nrm, mode="recompute")
    assert np.min(np.sum(out * nrm, axis=1)) > math.cos(math.radians(1))


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        apply_to_points(Rotation2D(0.1), np.zeros((3, 3)))


def test_control_grid_counts():
    unit2 = BoundingBox(np.zeros(2), np.ones(2))
    unit3 = BoundingBox(np.zeros(3), np.ones(3))
    assert control_grid(unit3, 5).shape == (125, 3)
    assert control_grid(unit2, (4, 3)).shape == (12, 2)
    assert control_grid(unit2).shape == (12, 2)
    assert control_grid(unit3).shape == (125, 3)
    corners = control_grid(unit2, 2)
    assert {tuple(p) for p in corners} == {(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)}


def test_control_grid_degenerate():
    with pytest.raises(DegenerateShape):
        control_grid(BoundingBox(np.zeros(2), np.array([1.0, 0.0])), 3)


def test_latent_dimensions():
    assert Tps.identity(control_grid(BoundingBox(np.zeros(2), np.ones(2)))).n_params == 30
    assert Tps.identity(control_grid(BoundingBox(np.zeros(3), np.ones(3)))).n_params == 387


def test_params_round_trip():
    rng = np.random.default_rng(8)
    for t in (Rotation2D(0.3, [1, 2]), Rotation3D(rng.normal(size=4)), _random_tps(rng)):
        back = t.with_params(t.params())
        np.testing.assert_array_equal(back.params(), t.params())
        np.testing.assert_array_equal(from_dict(t.to_dict()).params(), t.params())


def test_interpolate_endpoints_and_linearity():
    rng = np.random.default_rng(9)
    ident = Tps.identity(control_grid(BoundingBox(np.zeros(2), np.ones(2))))
    a, b = _random_tps(rng), _random_tps(rng)
    pts = rng.uniform(size=(50, 2))
    np.testing.assert_array_equal(apply_to_points(interpolate([ident, a, b], [1, 0, 0]), pts), pts)
    np.testing.assert_array_equal(interpolate([ident, a, b], [0, 1, 0]).params(), a.params())
    t1 = Tps(np.eye(2), [2.0, 0.0], ident.control_points, np.zeros((12, 2)))
    t2 = Tps(np.eye(2), [0.0, 2.0], ident.control_points, np.zeros((12, 2)))
    np.testing.assert_allclose(interpolate([ident, t1, t2], [0, 0.5, 0.5]).t, [1.0, 1.0])


def test_interpolate_rotations():
    assert interpolate([Rotation2D(0.0), Rotation2D(1.0)], [0.5, 0.5]).angle == pytest.approx(0.5)
    q = Rotation3D.from_axis_angle([0, 0, 1], 1.0)
    flipped = Rotation3D(-q.quat)
    mid = interpolate([Rotation3D(), flipped], [0.5, 0.5])
    np.testing.assert_allclose(mid.matrix(), Rotation3D.from_axis_angle([0, 0, 1], 0.5).matrix(), atol=1e-12)


def test_interpolate_errors():
    with pytest.raises(FamilyMismatch):
        interpolate([Rotation2D(0.0), Rotation3D()], [0.5, 0.5])
    a = Tps.identity(control_grid(BoundingBox(np.zeros(2), np.ones(2))))
    b = Tps.identity(control_grid(BoundingBox(np.zeros(2), 2 * np.ones(2))))
    with pytest.raises(GridMismatch):
        interpolate([a, b], [0.5, 0.5])


def test_identity_like():
    assert identity_like("rot2").angle == 0.0
    assert identity_like("rot3", translation=True).offset.tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(FamilyMismatch):
        identity_like("affine")


def test_fit_tps_interpolates():
    rng = np.random.default_rng(10)
    src = rng.uniform(size=(9, 2))
    dst = src + 0.05 * rng.normal(size=src.shape)
    np.testing.assert_allclose(apply_to_points(fit_tps(src, dst), src), dst, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 1000))
def test_interpolation_is_continuous(alpha, seed):
    rng = np.random.default_rng(seed)
    ident = Tps.identity(control_grid(BoundingBox(np.zeros(2), np.ones(2))))
    t = _random_tps(rng)
    pts = rng.uniform(size=(5, 2))
    f = lambda a: apply_to_points(interpolate([ident, t], [1 - a, a]), pts)
    a2 = min(1.0, alpha + 1e-7)
    assert np.max(np.abs(f(a2) - f(alpha))) < 1e-5
