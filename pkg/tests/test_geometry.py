import math

import numpy as np
import pytest

from dronecam.geometry import (
    CameraMotion,
    CameraPose,
    GeometryError,
    canonicalize_quat,
    exp_map,
    integrate_motion,
    log_map,
    look_at_pose,
    matrix_to_quat,
    quat_compose,
    quat_distance,
    quat_inverse,
    quat_to_matrix,
    rebase_poses,
    relative_motion,
)


def random_quat(rng):
    q = rng.standard_normal(4)
    return canonicalize_quat(q)


def random_pose(rng, scale=5.0):
    return CameraPose(rng.standard_normal(3) * scale, random_quat(rng))


def rotation_log_oracle(rot):
    """Axis-angle from a rotation matrix via eigen-decomposition, independent of quaternions."""
    cos_angle = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    angle = math.acos(cos_angle)
    if angle < 1e-10:
        return np.array(
            [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
        ) / 2.0
    # rotation axis = eigenvector of R with eigenvalue 1
    w, v = np.linalg.eig(rot)
    axis = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    axis = axis / np.linalg.norm(axis)
    # fix axis sign from the skew-symmetric part
    skew = (rot - rot.T) / 2.0
    sine_vec = np.array([skew[2, 1], skew[0, 2], skew[1, 0]])
    if float(sine_vec @ axis) < 0.0:
        axis = -axis
    return axis * angle


def test_quat_compose_inverse_identity():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = random_quat(rng)
        ident = quat_compose(q, quat_inverse(q))
        assert np.allclose(ident, [1.0, 0.0, 0.0, 0.0], atol=1e-12)


def test_quat_to_matrix_identity():
    assert np.allclose(quat_to_matrix([1.0, 0.0, 0.0, 0.0]), np.eye(3))


def test_exp_log_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        q = random_quat(rng)
        q_back = exp_map(log_map(q))
        assert quat_distance(q, q_back) < 1e-10


def test_log_map_matches_matrix_oracle():
    rng = np.random.default_rng(2)
    for _ in range(200):
        q = random_quat(rng)
        expected = rotation_log_oracle(quat_to_matrix(q))
        assert np.allclose(log_map(q), expected, atol=1e-8)


def test_canonical_sign():
    rng = np.random.default_rng(3)
    for _ in range(100):
        q = random_quat(rng)
        assert q[0] >= 0.0
        assert np.allclose(canonicalize_quat(-q), q)
    q = canonicalize_quat([0.0, -0.6, 0.0, 0.8])
    assert q[1] > 0.0


def test_relative_motion_pure_translation():
    pose_a = CameraPose.identity()
    pose_b = CameraPose([1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0])
    motion = relative_motion(pose_a, pose_b, 1.0)
    assert np.allclose(motion.linear_velocity, [1.0, 0.0, 0.0])
    assert np.allclose(motion.angular_velocity, [0.0, 0.0, 0.0])


def test_relative_motion_no_motion():
    rng = np.random.default_rng(4)
    pose = random_pose(rng)
    motion = relative_motion(pose, pose, 1.0 / 15.0)
    assert np.allclose(motion.as_vector(), np.zeros(6), atol=1e-12)


def test_relative_motion_angular_matches_matrix_log_oracle():
    rng = np.random.default_rng(5)
    dt = 1.0 / 15.0
    for _ in range(300):
        pose_a = random_pose(rng)
        pose_b = random_pose(rng)
        motion = relative_motion(pose_a, pose_b, dt)
        rel_rot = pose_a.rotation_matrix().T @ pose_b.rotation_matrix()
        expected = rotation_log_oracle(rel_rot) / dt
        assert np.allclose(motion.angular_velocity, expected, atol=1e-8)


def test_integrate_zero_motion_is_identity():
    rng = np.random.default_rng(6)
    pose = random_pose(rng)
    out = integrate_motion(pose, CameraMotion.zero(), 0.5)
    assert out.allclose(pose, tol=1e-12)


def test_integrate_forward_along_optical_axis():
    # camera at origin looking along world +x; local forward is +z
    pose = look_at_pose([0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    motion = CameraMotion([0.0, 0.0, 1.0], [0.0, 0.0, 0.0])
    out = integrate_motion(pose, motion, 0.5)
    assert np.allclose(out.position, [0.5, 0.0, 0.0], atol=1e-12)


def test_round_trip_integrate_relative():
    rng = np.random.default_rng(7)
    dt = 1.0 / 15.0
    for _ in range(1000):
        pose_a = random_pose(rng)
        pose_b = random_pose(rng)
        motion = relative_motion(pose_a, pose_b, dt)
        back = integrate_motion(pose_a, motion, dt)
        assert np.max(np.abs(back.position - pose_b.position)) < 1e-9
        assert quat_distance(back.orientation, pose_b.orientation) < 1e-9


def test_relative_motion_frame_covariant():
    rng = np.random.default_rng(8)
    dt = 0.2
    for _ in range(100):
        pose_a = random_pose(rng)
        pose_b = random_pose(rng)
        transform = random_pose(rng)
        motion = relative_motion(pose_a, pose_b, dt)
        moved = relative_motion(transform.compose(pose_a), transform.compose(pose_b), dt)
        assert np.allclose(motion.as_vector(), moved.as_vector(), atol=1e-9)


def test_unit_norm_invariant():
    rng = np.random.default_rng(9)
    for _ in range(200):
        pose = random_pose(rng)
        motion = CameraMotion(rng.standard_normal(3), rng.standard_normal(3))
        out = integrate_motion(pose, motion, 0.1)
        assert abs(np.linalg.norm(out.orientation) - 1.0) < 1e-9
        assert out.orientation[0] >= 0.0


def test_matrix_to_quat_round_trip():
    rng = np.random.default_rng(10)
    for _ in range(200):
        q = random_quat(rng)
        assert quat_distance(matrix_to_quat(quat_to_matrix(q)), q) < 1e-10


def test_rebase_first_pose_identity():
    rng = np.random.default_rng(11)
    poses = [random_pose(rng) for _ in range(5)]
    rebased = rebase_poses(poses)
    assert rebased[0].allclose(CameraPose.identity(), tol=1e-12)
    # relative motions are unchanged by rebasing
    for a, b, ra, rb in zip(poses, poses[1:], rebased, rebased[1:]):
        orig = relative_motion(a, b, 1.0).as_vector()
        new = relative_motion(ra, rb, 1.0).as_vector()
        assert np.allclose(orig, new, atol=1e-9)


def test_non_finite_inputs_rejected():
    with pytest.raises(GeometryError):
        CameraPose([np.nan, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0])
    with pytest.raises(GeometryError):
        CameraMotion([np.inf, 0.0, 0.0], [0.0, 0.0, 0.0])
    with pytest.raises(GeometryError):
        relative_motion(CameraPose.identity(), CameraPose.identity(), 0.0)
    with pytest.raises(GeometryError):
        canonicalize_quat([0.0, 0.0, 0.0, 0.0])


def test_pose_immutability():
    pose = CameraPose.identity()
    with pytest.raises(ValueError):
        pose.position[0] = 1.0


def test_look_at_pose_axes():
    # looking along +x with z up: right = -y, down = -z
    pose = look_at_pose([0.0, 0.0, 5.0], [1.0, 0.0, 0.0])
    rot = pose.rotation_matrix()
    assert np.allclose(rot[:, 0], [0.0, -1.0, 0.0], atol=1e-12)  # camera x (right)
    assert np.allclose(rot[:, 1], [0.0, 0.0, -1.0], atol=1e-12)  # camera y (down)
    assert np.allclose(rot[:, 2], [1.0, 0.0, 0.0], atol=1e-12)  # camera z (forward)
