import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dirreg.errors import DegenerateShape, DimensionError, EmptyShape, ValidationError
from dirreg.geometry import (
    OrientedPointSet,
    bounding_box,
    normalize_to_unit_box,
    pairwise_sq_dists,
    subsample,
)


def test_bounding_box_two_points():
    box = bounding_box(OrientedPointSet([[0, 0], [1, 2]]))
    np.testing.assert_array_equal(box.lo, [0, 0])
    np.testing.assert_array_equal(box.hi, [1, 2])


def test_bounding_box_single_point_is_degenerate():
    box = bounding_box(OrientedPointSet([[3, 4]]))
    np.testing.assert_array_equal(box.lo, [3, 4])
    np.testing.assert_array_equal(box.hi, [3, 4])


def test_bounding_box_unit_square():
    box = bounding_box(OrientedPointSet([[0, 0], [1, 0], [0, 1], [1, 1]]))
    np.testing.assert_array_equal(box.lo, [0, 0])
    np.testing.assert_array_equal(box.hi, [1, 1])
    assert box.diagonal == pytest.approx(np.sqrt(2))


def test_bounding_box_empty():
    with pytest.raises(EmptyShape):
        bounding_box(OrientedPointSet(np.zeros((0, 2))))


def test_point_set_rejects_bad_dimension():
    with pytest.raises(DimensionError):
        OrientedPointSet(np.zeros((3, 4)))


def test_point_set_rejects_non_unit_normals():
    with pytest.raises(ValidationError):
        OrientedPointSet([[0, 0], [1, 1]], [[1, 0], [0, 0.9]])


def test_point_set_face_checks():
    pts = np.eye(3)
    OrientedPointSet(pts, faces=[[0, 1, 2]])
    with pytest.raises(ValidationError):
        OrientedPointSet(pts, faces=[[0, 1, 3]])
    with pytest.raises(ValidationError):
        OrientedPointSet(pts, faces=[[0, 1, 1]])


def test_point_set_is_read_only():
    s = OrientedPointSet([[0.0, 0.0], [1.0, 1.0]])
    with pytest.raises(ValueError):
        s.points[0, 0] = 5.0


def test_subsample_full():
    rng = np.random.default_rng(0)
    s = OrientedPointSet(rng.normal(size=(100, 3)))
    sub, idx = subsample(s, 100, seed=3)
    np.testing.assert_array_equal(idx, np.arange(100))
    np.testing.assert_array_equal(sub.points, s.points)


def test_subsample_more_than_available_returns_all():
    s = OrientedPointSet(np.arange(20.0).reshape(10, 2))
    sub, idx = subsample(s, 50, seed=0)
    assert len(sub) == 10


def test_subsample_deterministic_and_carries_normals():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(10, 2))
    nrm = rng.normal(size=(10, 2))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    s = OrientedPointSet(pts, nrm)
    a, ia = subsample(s, 3, seed=7)
    b, ib = subsample(s, 3, seed=7)
    np.testing.assert_array_equal(ia, ib)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.normals, nrm[ia])
    np.testing.assert_array_equal(a.points, pts[ia])
    assert len(np.unique(ia)) == 3


def test_subsample_large_count():
    s = OrientedPointSet(np.random.default_rng(2).normal(size=(5000, 3)))
    sub, idx = subsample(s, 1000, seed=0)
    assert len(sub) == 1000 and len(np.unique(idx)) == 1000


def test_normalize_square():
    s = OrientedPointSet([[2, 2], [4, 2], [2, 4], [4, 4]])
    out, rec = normalize_to_unit_box(s)
    np.testing.assert_allclose(out.points, [[0, 0], [1, 0], [0, 1], [1, 1]])
    assert rec.scale == pytest.approx(0.5)


def test_normalize_already_unit_is_identity():
    s = OrientedPointSet([[0, 0], [1, 0], [0, 1], [1, 1]])
    out, rec = normalize_to_unit_box(s)
    assert rec.scale == 1.0
    np.testing.assert_array_equal(rec.offset, [0, 0])
    np.testing.assert_array_equal(out.points, s.points)


def test_normalize_preserves_aspect():
    s = OrientedPointSet([[0, 0], [2, 0], [0, 1], [2, 1]])
    out, _ = normalize_to_unit_box(s)
    box = bounding_box(out)
    np.testing.assert_allclose(box.hi, [1, 0.5])


def test_normalize_degenerate():
    with pytest.raises(DegenerateShape):
        normalize_to_unit_box(OrientedPointSet([[1, 1], [1, 1]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (12, 3), elements=st.floats(-1e3, 1e3)))
def test_normalize_roundtrip(pts):
    if np.ptp(pts, axis=0).max() < 1e-6:
        return
    nrm = np.tile([0.0, 0.0, 1.0], (12, 1))
    s = OrientedPointSet(pts, nrm)
    out, rec = normalize_to_unit_box(s)
    assert out.points.min() >= -1e-12 and out.points.max() <= 1 + 1e-12
    np.testing.assert_allclose(rec.inverse(out.points), pts, atol=1e-12 * max(1.0, np.abs(pts).max()))
    np.testing.assert_array_equal(out.normals, nrm)


def test_pairwise_sq_dists_matches_direct():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
    direct = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    np.testing.assert_allclose(pairwise_sq_dists(a, b), direct, atol=1e-12)
