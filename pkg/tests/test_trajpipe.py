import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dronecam.geometry import CameraPose, look_at_pose
from dronecam.trajpipe import (
    Clip,
    ClipError,
    FilterVerdict,
    UkfConfig,
    deviation_score,
    filter_directory,
    normalize_scale,
    read_clip,
    read_trajectory,
    roc_auc,
    run_pipeline,
    segment_clips,
    select_threshold,
    speed_outlier_check,
    ukf_smooth,
    write_clip,
)


def line_poses(n, step=1.0, direction=(1.0, 0.0, 0.0), noise=0.0, rng=None):
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    poses = []
    for i in range(n):
        p = d * step * i
        if noise and rng is not None:
            p = p + rng.standard_normal(3) * noise
        poses.append(look_at_pose(p, d))
    return poses


def orbit_poses(n, radius=30.0, speed=0.7, noise=0.0, rng=None):
    omega = speed / radius
    poses = []
    for i in range(n):
        th = omega * i
        p = np.array([radius * np.cos(th), radius * np.sin(th), 10.0])
        if noise and rng is not None:
            p = p + rng.standard_normal(3) * noise
        poses.append(look_at_pose(p, np.array([-np.sin(th), np.cos(th), 0.0])))
    return poses


def teleport(poses, frame, offset):
    poses = list(poses)
    p = poses[frame]
    poses[frame] = CameraPose(p.position + np.asarray(offset, dtype=float), p.orientation)
    return poses


# --- segmentation ---------------------------------------------------------


def test_segment_25s_trajectory():
    clips = segment_clips(line_poses(375), fps=15)
    assert [len(c) for c in clips] == [150, 150, 75]


def test_segment_sub_second_dropped():
    assert segment_clips(line_poses(7), fps=15) == []


def test_segment_exact_boundary():
    clips = segment_clips(line_poses(150), fps=15)
    assert len(clips) == 1 and len(clips[0]) == 150


def test_segment_empty_input():
    assert segment_clips([], fps=15) == []


# --- scale normalization --------------------------------------------------


def test_normalize_uniform_spacing():
    clip = Clip("c", 15, tuple(line_poses(20, step=0.25)))
    out = normalize_scale(clip)
    steps = np.linalg.norm(np.diff(out.positions(), axis=0), axis=1)
    assert np.allclose(steps, 1.0, atol=1e-12)
    assert out.scale_factor == pytest.approx(4.0)


def test_normalize_idempotent():
    rng = np.random.default_rng(0)
    clip = Clip("c", 15, tuple(line_poses(30, noise=0.1, rng=rng)))
    once = normalize_scale(clip)
    twice = normalize_scale(once)
    assert np.allclose(once.positions(), twice.positions(), atol=1e-12)
    assert twice.scale_factor == pytest.approx(once.scale_factor, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(min_value=1e-3, max_value=1e3), seed=st.integers(0, 2**31 - 1))
def test_normalize_scale_invariance(scale, seed):
    rng = np.random.default_rng(seed)
    base = line_poses(20, noise=0.3, rng=rng)
    clip = Clip("c", 15, tuple(base))
    scaled = Clip("c", 15, tuple(CameraPose(p.position * scale, p.orientation) for p in base))
    assert np.allclose(
        normalize_scale(clip).positions(), normalize_scale(scaled).positions(), atol=1e-9
    )


def test_normalize_degenerate_clip_rejected():
    pose = look_at_pose([1.0, 2.0, 3.0], [1.0, 0.0, 0.0])
    with pytest.raises(ClipError):
        normalize_scale(Clip("c", 15, (pose,) * 10))


# --- speed outlier check --------------------------------------------------


def test_speed_constant_accepted():
    assert speed_outlier_check(Clip("c", 15, tuple(line_poses(20))))


def test_speed_single_spike_rejected():
    poses = line_poses(10, step=0.5)
    poses = teleport(poses, 5, [0.0, 5.0, 0.0])  # one displacement ~10x the others
    assert not speed_outlier_check(Clip("c", 15, tuple(poses)))


def test_speed_exact_ratio_three_accepted():
    # displacements 0.5, 0.5, 0.5, 0.5, 3.0 -> mean exactly 1.0, max exactly 3x
    xs = np.cumsum([0.0, 0.5, 0.5, 0.5, 0.5, 3.0])
    poses = tuple(look_at_pose([x, 0.0, 0.0], [1.0, 0.0, 0.0]) for x in xs)
    assert speed_outlier_check(Clip("c", 15, poses))


# --- UKF smoothing ---------------------------------------------------------


def test_ukf_near_identity_on_clean_linear_motion():
    rng = np.random.default_rng(3)
    clip = Clip("cv", 15, tuple(line_poses(150, noise=0.005, rng=rng)))
    smoothed = ukf_smooth(clip)
    dev = deviation_score(clip, smoothed)
    assert dev.max_deviation < 0.02


def test_ukf_teleport_exposed_and_path_stays_near_line():
    poses = teleport(line_poses(150), 75, [0.0, 5.0, 0.0])
    clip = Clip("j", 15, tuple(poses))
    smoothed = ukf_smooth(clip)
    verdict = deviation_score(clip, smoothed)
    assert verdict.per_frame_deviation[75] > 1.0
    # least-squares line fit oracle: the clean path is the x-axis; the smoothed
    # path must stay much closer to it than the 5-unit teleport
    off_line = np.linalg.norm(smoothed.positions()[:, 1:], axis=1)
    assert off_line.max() < 0.8 * 5.0
    assert np.median(off_line) < 0.05


def test_ukf_stationary_fixed_point():
    pose = look_at_pose([1.0, 2.0, 3.0], [1.0, 0.0, 0.0])
    clip = Clip("st", 15, (pose,) * 20)
    smoothed = ukf_smooth(clip)
    assert deviation_score(clip, smoothed).max_deviation < 1e-6


def test_ukf_preserves_length_and_unit_norm():
    rng = np.random.default_rng(4)
    clip = Clip("o", 15, tuple(orbit_poses(90, noise=0.01, rng=rng)))
    smoothed = ukf_smooth(clip)
    assert len(smoothed) == len(clip)
    for pose in smoothed.poses:
        assert abs(np.linalg.norm(pose.orientation) - 1.0) < 1e-9


# --- deviation scoring ------------------------------------------------------


def test_deviation_identical_clips():
    clip = Clip("c", 15, tuple(line_poses(20)))
    verdict = deviation_score(clip, clip)
    assert verdict.max_deviation == 0.0
    assert verdict.accepted


def test_deviation_single_offset_rejected():
    poses = line_poses(20)
    clip = Clip("c", 15, tuple(poses))
    shifted = Clip("c", 15, tuple(teleport(poses, 10, [0.0, 0.3, 0.0])))
    verdict = deviation_score(shifted, clip)
    assert verdict.max_deviation == pytest.approx(0.3)
    assert not verdict.accepted


def test_deviation_length_mismatch():
    clip = Clip("c", 15, tuple(line_poses(20)))
    short = Clip("c", 15, tuple(line_poses(10)))
    with pytest.raises(ClipError):
        deviation_score(clip, short)


def test_deviation_separates_classes_auc():
    rng = np.random.default_rng(11)
    labeled = []
    for i in range(50):
        clean = Clip(f"c{i}", 15, tuple(line_poses(60, noise=0.01, rng=rng)))
        labeled.append((deviation_score(clean, ukf_smooth(clean)).max_deviation, True))
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        bad = Clip(
            f"b{i}",
            15,
            tuple(teleport(line_poses(60, noise=0.01, rng=rng), 30, direction * 1.0)),
        )
        labeled.append((deviation_score(bad, ukf_smooth(bad)).max_deviation, False))
    assert roc_auc(labeled) >= 0.95


# --- threshold selection ----------------------------------------------------


def test_select_threshold_separable():
    labeled = [(0.05, True), (0.10, True), (0.50, False), (0.90, False)]
    sel = select_threshold(labeled)
    assert sel.threshold == pytest.approx(0.30)
    assert sel.youden_j == pytest.approx(1.0)


def test_select_threshold_degenerate_tie():
    sel = select_threshold([(0.1, True), (0.1, False)])
    assert sel.threshold == pytest.approx(0.1)
    assert sel.youden_j == pytest.approx(0.0)


def brute_force_best_j(labeled):
    scores = sorted(s for s, _ in labeled)
    candidates = [(a + b) / 2.0 for a, b in zip(scores, scores[1:])]
    n_pos = sum(1 for _, c in labeled if c)
    n_neg = len(labeled) - n_pos
    best_t, best_j = None, -np.inf
    for t in candidates:
        tpr = sum(1 for s, c in labeled if c and s <= t) / n_pos
        fpr = sum(1 for s, c in labeled if not c and s <= t) / n_neg
        if tpr - fpr > best_j + 1e-12:
            best_t, best_j = t, tpr - fpr
    return best_t, best_j


def test_select_threshold_matches_brute_force_on_overlap_corpus():
    rng = np.random.default_rng(13)
    labeled = [(float(abs(rng.normal(0.08, 0.04))), True) for _ in range(100)]
    labeled += [(float(abs(rng.normal(0.25, 0.15))), False) for _ in range(100)]
    sel = select_threshold(labeled)
    t, j = brute_force_best_j(labeled)
    assert sel.threshold == pytest.approx(t)
    assert sel.youden_j == pytest.approx(j)


def test_select_threshold_single_class_rejected():
    with pytest.raises(ValueError):
        select_threshold([(0.1, True), (0.2, True)])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_select_threshold_order_invariant(seed):
    rng = np.random.default_rng(seed)
    labeled = [(float(rng.uniform(0, 1)), bool(rng.integers(0, 2))) for _ in range(30)]
    if not any(c for _, c in labeled) or all(c for _, c in labeled):
        return
    base = select_threshold(labeled)
    shuffled = list(labeled)
    rng.shuffle(shuffled)
    again = select_threshold(shuffled)
    assert again.threshold == pytest.approx(base.threshold)
    assert again.youden_j == pytest.approx(base.youden_j)


# --- pipeline ----------------------------------------------------------------


def synthetic_corpus(rng, n_clean=10, n_bad=10, n_frames=75):
    trajectories = []
    for i in range(n_clean):
        trajectories.append((f"clean{i:02d}", line_poses(n_frames, step=0.7, noise=0.004, rng=rng)))
    for i in range(n_bad):
        poses = line_poses(n_frames, step=0.7, noise=0.004, rng=rng)
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        poses = teleport(poses, n_frames // 2, direction * 3.0)
        trajectories.append((f"bad{i:02d}", poses))
    return trajectories


def test_pipeline_separates_corpus():
    rng = np.random.default_rng(21)
    accepted, report = run_pipeline(synthetic_corpus(rng), fps=15)
    accepted_ids = {c.id for c in accepted}
    assert all(f"clean{i:02d}_000" in accepted_ids for i in range(10))
    n_bad_rejected = sum(1 for r in report.rejections if r["clip_id"].startswith("bad"))
    assert n_bad_rejected >= 9


def test_pipeline_empty_input():
    accepted, report = run_pipeline([])
    assert accepted == []
    assert report.counts == {}


def test_pipeline_speed_outlier_not_passed_to_ukf():
    poses = teleport(line_poses(75, step=0.5), 40, [0.0, 30.0, 0.0])
    accepted, report = run_pipeline([("spiky", poses)])
    assert accepted == []
    assert report.rejections == [{"clip_id": "spiky_000", "reason": "speed-outlier"}]


def test_pipeline_deterministic_files(tmp_path):
    rng = np.random.default_rng(33)
    trajs = synthetic_corpus(rng, n_clean=3, n_bad=1)
    in_dir = tmp_path / "raw"
    in_dir.mkdir()
    for name, poses in trajs:
        clip = Clip(name, 15, tuple(poses))
        write_clip(clip, in_dir / f"{name}.jsonl")
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    filter_directory(in_dir, out_a)
    filter_directory(in_dir, out_b)
    files_a = sorted(p.name for p in out_a.iterdir())
    files_b = sorted(p.name for p in out_b.iterdir())
    assert files_a == files_b and files_a
    for name in files_a:
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


# --- file I/O ----------------------------------------------------------------


def test_clip_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    clip = Clip(
        "roundtrip",
        15,
        tuple(line_poses(30, noise=0.05, rng=rng)),
        scale_factor=1.25,
        meta={"world": "w01"},
    )
    path = tmp_path / "clip.jsonl"
    write_clip(clip, path)
    back = read_clip(path)
    assert back.id == clip.id
    assert back.fps == clip.fps
    assert back.scale_factor == clip.scale_factor
    assert back.meta == clip.meta
    assert np.allclose(back.positions(), clip.positions())
    assert np.allclose(back.quaternions(), clip.quaternions())


def test_read_trajectory_csv_and_jsonl(tmp_path):
    csv_path = tmp_path / "t.csv"
    csv_path.write_text(
        "frame_index,x,y,z,qw,qx,qy,qz\n0,0,0,0,1,0,0,0\n1,1,0,0,1,0,0,0\n"
    )
    poses = read_trajectory(csv_path)
    assert len(poses) == 2 and np.allclose(poses[1].position, [1, 0, 0])

    jsonl_path = tmp_path / "t.jsonl"
    rows = [
        {"frame_index": 1, "x": 2.0, "y": 0.0, "z": 0.0, "qw": 1.0, "qx": 0.0, "qy": 0.0, "qz": 0.0},
        {"frame_index": 0, "x": 0.0, "y": 0.0, "z": 0.0, "qw": 1.0, "qx": 0.0, "qy": 0.0, "qz": 0.0},
    ]
    jsonl_path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    poses = read_trajectory(jsonl_path)  # sorted by frame_index
    assert np.allclose(poses[0].position, [0, 0, 0])
    assert np.allclose(poses[1].position, [2, 0, 0])


def test_read_trajectory_bad_csv_header(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_trajectory(bad)


def test_verdict_invariant():
    verdict = FilterVerdict(max_deviation=0.19, per_frame_deviation=np.array([0.19]))
    assert verdict.accepted
    verdict = FilterVerdict(max_deviation=0.21, per_frame_deviation=np.array([0.21]))
    assert not verdict.accepted


def test_ukf_config_validation():
    with pytest.raises(ValueError):
        UkfConfig(alpha=0.0)
    with pytest.raises(ValueError):
        UkfConfig(process_noise_scale=-1.0)
