import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from implicit_keypoints.geometry import (
    GeometryError,
    KeypointSet,
    SphereField,
    TriangleMesh,
    label_of,
    sphere_sdf,
    sphere_sdf_gradient,
    stacked_udf,
)

R = 0.08


def brute_sdf(p, centers, r):
    return min(np.sqrt(sum((p[i] - c[i]) ** 2 for i in range(3))) for c in centers) - r


def test_sdf_at_center_is_minus_radius():
    f = SphereField.from_points([[0.3, -0.2, 0.1]], R)
    assert sphere_sdf([0.3, -0.2, 0.1], f) == -R


def test_sdf_on_surface_and_between_two_spheres():
    assert sphere_sdf([0.08, 0, 0], SphereField.from_points([[0, 0, 0]], R)) == 0.0
    f = SphereField.from_points([[0, 0, 0], [0.5, 0, 0]], R)
    assert_allclose(sphere_sdf([0.25, 0, 0], f), 0.17, atol=1e-15)


def test_sdf_empty_field_raises():
    with pytest.raises(GeometryError, match="empty field"):
        sphere_sdf([0, 0, 0], SphereField(KeypointSet(np.zeros((0, 3))), R))


def test_sdf_matches_brute_force(rng):
    centers = rng.uniform(-1, 1, (7, 3))
    pts = rng.uniform(-1, 1, (200, 3))
    f = SphereField.from_points(centers, R)
    got = sphere_sdf(pts, f)
    want = [brute_sdf(p, centers, R) for p in pts]
    assert_allclose(got, want, rtol=0, atol=1e-15)


def test_gradient_examples():
    f = SphereField.from_points([[0, 0, 0]], R)
    assert_array_equal(sphere_sdf_gradient([0.5, 0, 0], f), [1, 0, 0])
    assert_array_equal(sphere_sdf_gradient([0, -0.2, 0], f), [0, -1, 0])


def test_gradient_tie_takes_lowest_index():
    f = SphereField.from_points([[0, 0, 0], [0.5, 0, 0]], R)
    g = sphere_sdf_gradient([0.25, 0.1, 0], f)
    v = np.array([0.25, 0.1, 0])
    assert_allclose(g, v / np.linalg.norm(v), atol=1e-15)


def test_gradient_singular_at_center():
    f = SphereField.from_points([[0.1, 0.1, 0.1]], R)
    with pytest.raises(GeometryError, match="singular gradient"):
        sphere_sdf_gradient([0.1, 0.1, 0.1], f)


def test_gradient_matches_central_differences(rng):
    centers = rng.uniform(-0.8, 0.8, (5, 3))
    f = SphereField.from_points(centers, R)
    pts = rng.uniform(-1, 1, (300, 3))
    d = np.sort(np.linalg.norm(pts[:, None] - centers[None], axis=2), axis=1)
    pts = pts[(d[:, 1] - d[:, 0] > 1e-3) & (d[:, 0] > 1e-3)]
    h = 1e-5
    fd = np.stack([(sphere_sdf(pts + h * e, f) - sphere_sdf(pts - h * e, f)) / (2 * h) for e in np.eye(3)], axis=1)
    assert_allclose(sphere_sdf_gradient(pts, f), fd, atol=1e-6)


def test_eikonal_property_by_finite_differences(rng):
    centers = rng.uniform(-0.8, 0.8, (6, 3))
    f = SphereField.from_points(centers, R)
    pts = rng.uniform(-1, 1, (10000, 3))
    d = np.sort(np.linalg.norm(pts[:, None] - centers[None], axis=2), axis=1)
    pts = pts[(d[:, 0] > 1e-6) & (d[:, 1] - d[:, 0] > 1e-4)]
    h = 1e-6
    fd = np.stack([(sphere_sdf(pts + h * e, f) - sphere_sdf(pts - h * e, f)) / (2 * h) for e in np.eye(3)], axis=1)
    assert_allclose(np.linalg.norm(fd, axis=1), 1.0, atol=1e-4)


@given(st.integers(0, 2**31 - 1))
def test_sdf_is_one_lipschitz(seed):
    rng = np.random.default_rng(seed)
    f = SphereField.from_points(rng.uniform(-1, 1, (4, 3)), R)
    p, q = rng.uniform(-1.5, 1.5, (2, 50, 3))
    assert np.all(np.abs(sphere_sdf(p, f) - sphere_sdf(q, f)) <= np.linalg.norm(p - q, axis=1) + 1e-12)


def test_stacked_udf_examples():
    kps = KeypointSet([[0, 0, 0], [0.5, 0, 0]], labels=[3, 0], label_count=10)
    v = stacked_udf([0, 0, 0], kps)
    assert v.shape == (10,)
    assert v[3] == 0.0 and v[0] == 0.5
    absent = [k for k in range(10) if k not in (0, 3)]
    assert_array_equal(v[absent], 1.0)


def test_stacked_udf_fig3_layout(rng):
    pts = rng.uniform(-1, 1, (10, 3))
    kps = KeypointSet(pts, labels=np.arange(10), label_count=10)
    p = rng.uniform(-1, 1, 3)
    assert_allclose(stacked_udf(p, kps), np.linalg.norm(pts - p, axis=1), atol=1e-15)


def test_stacked_udf_shared_label_takes_minimum():
    kps = KeypointSet([[0, 0, 0], [0.3, 0, 0]], labels=[1, 1], label_count=2)
    assert_allclose(stacked_udf([0.25, 0, 0], kps), [1.0, 0.05], atol=1e-15)


def test_stacked_udf_unlabeled_raises():
    with pytest.raises(GeometryError, match="unlabeled keypoints"):
        stacked_udf([0, 0, 0], KeypointSet([[0, 0, 0]]))


def test_label_of_examples():
    assert label_of([0.3, 0.05, 1.0]) == 1
    assert label_of(np.ones(10)) == 0
    assert_array_equal(label_of([[0.3, 0.05], [0.2, 0.2]]), [1, 0])


@given(st.integers(0, 2**31 - 1))
def test_label_round_trip_at_keypoints(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 12))
    labels = rng.choice(16, size=k, replace=False)
    kps = KeypointSet(rng.uniform(-1, 1, (k, 3)), labels, 16)
    assert_array_equal(label_of(stacked_udf(kps.points, kps)), labels)


def test_keypointset_validation():
    with pytest.raises(GeometryError):
        KeypointSet([[0, 0, 0]], labels=[5], label_count=3)
    with pytest.raises(GeometryError):
        KeypointSet([[0, 0, np.nan]])
    with pytest.raises(GeometryError):
        KeypointSet([[0, 0, 0], [1, 1, 1]], labels=[0])
    assert KeypointSet([[0, 0, 0]], labels=[4]).label_count == 5


def test_translated_keeps_labels():
    kps = KeypointSet([[0, 0, 0]], [2], 4).translated([1, 2, 3])
    assert_array_equal(kps.points, [[1, 2, 3]])
    assert kps.labels.tolist() == [2] and kps.label_count == 4


def test_mesh_validation():
    with pytest.raises(GeometryError):
        TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))
    assert TriangleMesh.empty().is_empty
