import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from transnet.geometry import (CORNER_SIGNS, AxisPair, CameraIntrinsics, DegenerateAxesError, GeometryError,
                               InvalidDepthError, Pose, angle_between_degrees, axis_angle, backproject,
                               box_corners, correction_angles, is_rotation, orthogonalize_axes, project,
                               ray_direction, rotation_from_axes, rotation_geodesic_degrees,
                               symmetric_rotation_error_degrees)

K500 = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
KID = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 1, 1)


def test_ray_principal_point():
    np.testing.assert_allclose(ray_direction(K500, 320, 240), [0, 0, 1])
    np.testing.assert_allclose(ray_direction(KID, 0, 0), [0, 0, 1])


def test_ray_off_axis_hand_computed():
    np.testing.assert_allclose(ray_direction(K500, 820, 240), [np.sqrt(0.5), 0, np.sqrt(0.5)], atol=1e-12)


def test_backproject_examples():
    np.testing.assert_allclose(backproject(K500, 320, 240, 2.0), [0, 0, 2])
    np.testing.assert_allclose(backproject(K500, 820, 240, 2.0), [2, 0, 2])
    p1, p3 = backproject(K500, 100, 50, 1.0), backproject(K500, 100, 50, 3.0)
    np.testing.assert_allclose(p3, 3 * p1, rtol=1e-15)


def test_backproject_rejects_nonpositive_depth():
    with pytest.raises(InvalidDepthError):
        backproject(K500, 0, 0, 0.0)


def test_rays_are_unit_vectors():
    rng = np.random.default_rng(0)
    u, v = rng.uniform(0, 640, 10_000), rng.uniform(0, 480, 10_000)
    assert np.max(np.abs(np.linalg.norm(ray_direction(K500, u, v), axis=-1) - 1)) < 1e-12


def test_backproject_projects_back():
    rng = np.random.default_rng(1)
    u, v, d = rng.uniform(0, 640, 1000), rng.uniform(0, 480, 1000), rng.uniform(0.1, 5, 1000)
    uv = project(K500, backproject(K500, u, v, d))
    assert np.max(np.abs(uv - np.stack([u, v], -1))) < 1e-9


def test_orthogonalize_already_orthogonal():
    ax, az = orthogonalize_axes(AxisPair([1, 0, 0], [0, 0, 1], 0.3, 0.9))
    np.testing.assert_array_equal(ax, [1, 0, 0])
    np.testing.assert_array_equal(az, [0, 0, 1])


def test_orthogonalize_sixty_degrees_equal_confidence():
    a_x, a_z = np.array([1.0, 0, 0]), np.array([0.5, 0, np.sqrt(3) / 2])
    ax, az = orthogonalize_axes(AxisPair(a_x, a_z, 0.5, 0.5))
    assert angle_between_degrees(ax, a_x) == pytest.approx(15.0, abs=1e-9)
    assert angle_between_degrees(az, a_z) == pytest.approx(15.0, abs=1e-9)
    assert abs(ax @ az) < 1e-12


def test_orthogonalize_weighted_by_confidence():
    a_x, a_z = np.array([1.0, 0, 0]), np.array([0.5, 0, np.sqrt(3) / 2])
    ax, az = orthogonalize_axes(AxisPair(a_x, a_z, 0.99, 0.01))
    assert angle_between_degrees(ax, a_x) == pytest.approx(0.3, abs=1e-9)
    assert angle_between_degrees(az, a_z) == pytest.approx(29.7, abs=1e-9)


def test_orthogonalize_parallel_axes_raise():
    with pytest.raises(DegenerateAxesError):
        orthogonalize_axes(AxisPair([0, 0, 1], [0, 0, 1]))


def test_rotation_from_axes_examples():
    np.testing.assert_array_equal(rotation_from_axes([1, 0, 0], [0, 0, 1]), np.eye(3))
    R = rotation_from_axes([0, 1, 0], [0, 0, 1])
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_rotation_from_axes_needs_orthonormal_input():
    with pytest.raises(GeometryError):
        rotation_from_axes([1, 0, 0], [0.5, 0, 0.866])


def test_box_corners_examples():
    c = box_corners(Pose(np.eye(3), np.zeros(3), [2, 2, 2]))
    assert {tuple(r) for r in c} == {(x, y, z) for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)}
    shifted = box_corners(Pose(np.eye(3), [1, 0, 0], [2, 2, 2]))
    np.testing.assert_allclose(shifted - c, np.tile([1, 0, 0], (8, 1)))
    yaw = box_corners(Pose(axis_angle([0, 0, 1], np.pi / 2), np.zeros(3), [2, 4, 2]))
    ext = yaw.max(0) - yaw.min(0)
    np.testing.assert_allclose(ext, [4, 2, 2], atol=1e-12)


def test_corner_order_is_gray_code():
    # consecutive corners differ in exactly one sign
    assert all(np.sum(CORNER_SIGNS[i] != CORNER_SIGNS[i + 1]) == 1 for i in range(7))
    np.testing.assert_array_equal(CORNER_SIGNS[0], [-1, -1, -1])


def test_geodesic_examples():
    assert rotation_geodesic_degrees(np.eye(3), np.eye(3)) == 0.0
    assert rotation_geodesic_degrees(np.eye(3), axis_angle([0, 0, 1], np.pi / 2)) == pytest.approx(90, abs=1e-12)
    assert rotation_geodesic_degrees(np.eye(3), axis_angle([1, 0, 0], np.pi)) == pytest.approx(180, abs=1e-12)


def test_symmetric_rotation_error():
    R = axis_angle([1, 2, 3], 0.7)
    spun = R @ axis_angle([0, 0, 1], np.pi / 4)
    assert symmetric_rotation_error_degrees(spun, R, True) == pytest.approx(0.0, abs=1e-12)
    perp = np.cross(R[:, 2], [1.0, 0.0, 0.0])
    tilted = axis_angle(perp, np.radians(10)) @ R
    assert symmetric_rotation_error_degrees(tilted, R, True) == pytest.approx(10.0, abs=1e-9)
    assert symmetric_rotation_error_degrees(spun, R, False) == rotation_geodesic_degrees(spun, R)


def test_pose_validation():
    with pytest.raises(GeometryError):
        Pose(np.eye(3), np.zeros(3), [1, -1, 1]).validate()
    with pytest.raises(GeometryError):
        Pose(np.diag([1, 1, -1.0]), np.zeros(3)).validate()


# ---------------------------------------------------------------- properties

unit3 = arrays(np.float64, 3, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 0.1)


@settings(max_examples=300, deadline=None)
@given(unit3, unit3, st.floats(0.01, 1), st.floats(0.01, 1))
def test_orthogonalize_properties(a, b, cx, cz):
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    if abs(a @ b) > 0.999:
        return
    ax, az = orthogonalize_axes(AxisPair(a, b, cx, cz))
    assert abs(ax @ az) < 1e-9
    theta, th_x, th_z = correction_angles(AxisPair(a, b, cx, cz))
    assert th_x + th_z == pytest.approx(theta - np.pi / 2, abs=1e-9)
    n = np.cross(a, b)
    n /= np.linalg.norm(n)
    assert abs(ax @ n) < 1e-9 and abs(az @ n) < 1e-9
    R = rotation_from_axes(ax, az)
    assert is_rotation(R, 1e-9)
    assert np.radians(angle_between_degrees(R[:, 0], a)) <= abs(th_x) + 1e-6
    assert np.radians(angle_between_degrees(R[:, 2], b)) <= abs(th_z) + 1e-6


@settings(max_examples=50, deadline=None)
@given(unit3, unit3)
def test_orthogonalize_idempotent(a, b):
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    if abs(a @ b) > 0.999:
        return
    ax, az = orthogonalize_axes(AxisPair(a, b))
    ax2, az2 = orthogonalize_axes(AxisPair(ax, az))
    np.testing.assert_array_equal(ax2, ax)
    np.testing.assert_array_equal(az2, az)
