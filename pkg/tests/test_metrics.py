import json

import numpy as np
import pytest

from dronecam.geometry import CameraMotion, CameraPose, integrate_motion, look_at_pose
from dronecam.metrics import (
    MetricsError,
    MetricsReport,
    collision_rate,
    emit_report,
    evaluate_episodes,
    smoothness,
)
from dronecam.rollout import EpisodeResult


def poses_from_speeds(speeds, fps=15):
    """Straight-line trace whose per-step speeds are given (units/s)."""
    poses = [look_at_pose([0.0, 0.0, 0.0], [1.0, 0.0, 0.0])]
    x = 0.0
    for s in speeds:
        x += s / fps
        poses.append(look_at_pose([x, 0.0, 0.0], [1.0, 0.0, 0.0]))
    return poses


def fake_episode(terminated_by="duration", poses=None, cond_seed=0):
    poses = poses if poses is not None else poses_from_speeds([1.0] * 10)
    return EpisodeResult(
        poses=poses,
        motions=[],
        terminated_by=terminated_by,
        duration_s=(len(poses) - 1) / 15.0,
        cond_seed=cond_seed,
        completed_frames=0,
    )


def test_constant_velocity_zero_deltas():
    dv, dw = smoothness(poses_from_speeds([2.0] * 20))
    assert dv == pytest.approx(0.0, abs=1e-9)
    assert dw == pytest.approx(0.0, abs=1e-9)


def test_hand_computed_speed_profile():
    # speeds 1,1,1,0,0 -> max |dv| = 1, mean speed 0.6 -> 166.7%
    dv, _ = smoothness(poses_from_speeds([1.0, 1.0, 1.0, 0.0, 0.0]))
    assert dv == pytest.approx(100.0 / 0.6, rel=1e-9)


def test_smoothness_matches_brute_force_recomputation():
    rng = np.random.default_rng(3)
    pose = look_at_pose([0.0, 0.0, 10.0], [1.0, 0.0, 0.0])
    poses = [pose]
    for _ in range(40):
        motion = CameraMotion(rng.normal(0, 2, 3) + [0, 0, 10], rng.normal(0, 0.2, 3))
        pose = integrate_motion(pose, motion, 1.0 / 15.0)
        poses.append(pose)
    dv, dw = smoothness(poses)

    # independent recomputation straight from the definition
    from dronecam.geometry import relative_motion

    vs, ws = [], []
    for a, b in zip(poses, poses[1:]):
        m = relative_motion(a, b, 1.0 / 15.0)
        vs.append(m.linear_velocity)
        ws.append(m.angular_velocity)
    dv_expected = max(
        np.linalg.norm(np.array(b) - np.array(a)) for a, b in zip(vs, vs[1:])
    ) / np.mean([np.linalg.norm(v) for v in vs]) * 100.0
    dw_expected = max(
        np.linalg.norm(np.array(b) - np.array(a)) for a, b in zip(ws, ws[1:])
    ) / max(np.mean([np.linalg.norm(w) for w in ws]), 1e-3) * 100.0
    assert dv == pytest.approx(dv_expected, rel=1e-12)
    assert dw == pytest.approx(dw_expected, rel=1e-12)


def test_smoothness_requires_three_poses():
    with pytest.raises(MetricsError):
        smoothness(poses_from_speeds([1.0]))


def test_smoothness_rigid_transform_invariant():
    rng = np.random.default_rng(4)
    pose = CameraPose.identity()
    poses = [pose]
    for _ in range(20):
        motion = CameraMotion(rng.normal(0, 1, 3) + [0, 0, 8], rng.normal(0, 0.3, 3))
        pose = integrate_motion(pose, motion, 1.0 / 15.0)
        poses.append(pose)
    base = smoothness(poses)
    transform = CameraPose(rng.normal(0, 50, 3), rng.standard_normal(4))
    moved = [transform.compose(p) for p in poses]
    assert smoothness(moved) == pytest.approx(base, rel=1e-9)
    scaled = [CameraPose(p.position * 7.5, p.orientation) for p in poses]
    dv_scaled, _ = smoothness(scaled)
    assert dv_scaled == pytest.approx(base[0], rel=1e-9)


def test_collision_rate_half():
    eps = [fake_episode("collision"), fake_episode("duration")]
    assert collision_rate(eps) == 0.5


def test_collision_rate_zero():
    assert collision_rate([fake_episode() for _ in range(5)]) == 0.0


def test_collision_rate_exact_fraction():
    rng = np.random.default_rng(5)
    kinds = ["collision"] * 47 + ["duration"] * 137
    rng.shuffle(kinds)
    eps = [fake_episode(k) for k in kinds]
    assert collision_rate(eps) == pytest.approx(47 / 184)


def test_collision_rate_empty():
    with pytest.raises(MetricsError):
        collision_rate([])


def test_report_bounds():
    with pytest.raises(MetricsError):
        MetricsReport(episodes=1, collision_rate=1.5, delta_v=0.0, delta_omega=0.0)


def test_emit_report_json_round_trip(tmp_path):
    eps = [fake_episode("collision", cond_seed=1), fake_episode("duration", cond_seed=2)]
    report = evaluate_episodes(eps)
    out = tmp_path / "report.json"
    emit_report(report, json_path=out)
    data = json.loads(out.read_text())
    assert data["episodes"] == 2
    assert data["collision_rate"] == 0.5
    assert data["per_episode"][0]["cond_seed"] == 1
    assert data == report.to_json()


def test_emit_report_csv_and_determinism(tmp_path):
    eps = [fake_episode("duration", cond_seed=3)]
    report = evaluate_episodes(eps)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    emit_report(report, csv_path=a)
    emit_report(report, csv_path=b)
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().strip().split("\n")
    assert lines[0] == "index,cond_seed,terminated_by,duration_s,delta_v_percent,delta_omega_percent"
    assert len(lines) == 2


def test_emit_report_header_only_csv(tmp_path):
    report = MetricsReport(episodes=0, collision_rate=0.0, delta_v=0.0, delta_omega=0.0)
    out = tmp_path / "empty.csv"
    emit_report(report, csv_path=out)
    lines = out.read_text().strip().split("\n")
    assert len(lines) == 1
    assert lines[0].startswith("index,")
