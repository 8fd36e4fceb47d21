"""Trajectory ingestion and filtering pipeline.

Raw pose sequences are segmented into clips of 1..10 seconds, scale-normalized
so the mean inter-frame displacement is one world unit, screened for speed
outliers, smoothed with an unscented Kalman filter over a 13-dim state
(position, quaternion, linear velocity, angular velocity), and accepted or
rejected by the distance between the original and smoothed camera path.

The filter treats quaternion components as pseudo-linear state and
renormalizes after every predict and update; velocities are per-frame.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraPose, canonicalize_quat, exp_map, log_map, quat_compose, quat_inverse, quat_to_matrix

log = logging.getLogger(__name__)

MIN_CLIP_SECONDS = 1
MAX_CLIP_SECONDS = 10
SPEED_OUTLIER_RATIO = 3.0
DEFAULT_DEVIATION_THRESHOLD = 0.2


class ClipError(ValueError):
    """Clip violates a pipeline precondition (too short, degenerate, mismatched)."""


class FilterDivergenceError(RuntimeError):
    """UKF covariance lost positive-definiteness; the clip is rejected."""


@dataclass(frozen=True)
class Clip:
    """A fixed-rate pose sequence; the unit of filtering and training."""

    id: str
    fps: int
    poses: tuple[CameraPose, ...]
    scale_factor: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fps < 1:
            raise ClipError(f"fps must be >= 1, got {self.fps}")
        if len(self.poses) < 2:
            raise ClipError(f"clip {self.id!r} needs >= 2 poses, got {len(self.poses)}")
        if self.scale_factor <= 0:
            raise ClipError(f"scale_factor must be positive, got {self.scale_factor}")
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def duration_s(self) -> float:
        return len(self.poses) / self.fps

    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.poses])

    def quaternions(self) -> np.ndarray:
        return np.array([p.orientation for p in self.poses])


@dataclass
class UkfConfig:
    """Unscented-transform and noise hyperparameters for trajectory smoothing."""

    alpha: float = 0.1
    beta: float = 2.0
    kappa: float = 10.0
    process_noise_scale: float = 0.05
    measurement_noise_scale: float = 0.02

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.process_noise_scale <= 0 or self.measurement_noise_scale <= 0:
            raise ValueError("noise scales must be positive")


@dataclass(frozen=True)
class FilterVerdict:
    """Per-clip deviation statistics and the accept/reject decision."""

    max_deviation: float
    per_frame_deviation: np.ndarray
    threshold: float = DEFAULT_DEVIATION_THRESHOLD
    accepted: bool = False

    def __post_init__(self):
        object.__setattr__(self, "accepted", bool(self.max_deviation <= self.threshold))


def segment_clips(trajectory, fps: int, id_prefix: str = "clip") -> list[Clip]:
    """Greedy left-to-right split into clips of at most 10 s; sub-1 s residue is dropped."""
    if fps < 1:
        raise ClipError(f"fps must be >= 1, got {fps}")
    poses = list(trajectory)
    max_len = MAX_CLIP_SECONDS * fps
    min_len = MIN_CLIP_SECONDS * fps
    clips = []
    for start in range(0, len(poses), max_len):
        chunk = poses[start : start + max_len]
        if len(chunk) < min_len:
            continue
        clips.append(Clip(id=f"{id_prefix}_{len(clips):03d}", fps=fps, poses=tuple(chunk)))
    return clips


def normalize_scale(clip: Clip) -> Clip:
    """Scale positions so the mean inter-frame displacement is exactly one world unit."""
    positions = clip.positions()
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    mean_step = float(np.mean(steps))
    if mean_step <= 0.0:
        raise ClipError(f"clip {clip.id!r} has zero total displacement; cannot normalize")
    scale = 1.0 / mean_step
    poses = tuple(
        CameraPose(p.position * scale, p.orientation) for p in clip.poses
    )
    return Clip(
        id=clip.id,
        fps=clip.fps,
        poses=poses,
        scale_factor=clip.scale_factor * scale,
        meta=dict(clip.meta),
    )


def speed_outlier_check(clip: Clip) -> bool:
    """Accept iff the max inter-frame displacement is within 3x the mean (inclusive)."""
    steps = np.linalg.norm(np.diff(clip.positions(), axis=0), axis=1)
    mean_step = float(np.mean(steps))
    if mean_step == 0.0:
        return True
    return float(np.max(steps)) <= SPEED_OUTLIER_RATIO * mean_step


# UKF state layout: [position(3), quaternion(4), linear velocity(3), angular velocity(3)],
# velocities in world units / frame and radians / frame. Diagonal process-noise shape
# (multiplied by process_noise_scale**2): the velocity random walk dominates, direct
# pose noise is a quarter of it, and the rotational blocks are 10x smaller because
# orientations move far less than one world unit per frame in normalized clips. The
# shape is deliberately model-trusting so single-frame teleports stand out in the
# deviation score instead of being absorbed by the filter.
_STATE_DIM = 13
_MEAS_DIM = 7
_Q_SHAPE = np.concatenate(
    [np.full(3, 0.004), np.full(4, 0.0004), np.full(3, 0.016), np.full(3, 0.0016)]
)


def _ukf_process(sigmas: np.ndarray) -> np.ndarray:
    """Constant-velocity step for every sigma point at once (dt = one frame)."""
    out = sigmas.copy()
    q = sigmas[:, 3:7]
    v = sigmas[:, 7:10]
    omega = sigmas[:, 10:13]
    norm = np.linalg.norm(q, axis=1)
    safe = norm > 1e-9
    qn = np.where(safe[:, None], q / np.where(safe, norm, 1.0)[:, None], q)
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    # rotation of local velocity into the global frame, batched over sigma points
    rot = np.empty((sigmas.shape[0], 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    out[:, :3] += np.where(safe[:, None], np.einsum("nij,nj->ni", rot, v), 0.0)
    # pseudo-linear quaternion derivative: q' = q + 0.5 * q (x) (0, omega)
    qw, qx, qy, qz = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    wx, wy, wz = omega[:, 0], omega[:, 1], omega[:, 2]
    out[:, 3] += 0.5 * (-qx * wx - qy * wy - qz * wz)
    out[:, 4] += 0.5 * (qw * wx + qy * wz - qz * wy)
    out[:, 5] += 0.5 * (qw * wy - qx * wz + qz * wx)
    out[:, 6] += 0.5 * (qw * wz + qx * wy - qy * wx)
    return out


def ukf_smooth(clip: Clip, cfg: UkfConfig | None = None) -> Clip:
    """Run the unscented Kalman filter over the clip; returns the smoothed pose sequence."""
    cfg = cfg or UkfConfig()
    n = _STATE_DIM
    lam = cfg.alpha**2 * (n + cfg.kappa) - n
    if n + lam <= 0:
        raise ValueError("alpha/kappa give a nonpositive sigma-point spread")
    w_m = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
    w_c = w_m.copy()
    w_m[0] = lam / (n + lam)
    w_c[0] = w_m[0] + 1.0 - cfg.alpha**2 + cfg.beta

    positions = clip.positions()
    quats = clip.quaternions()
    # keep consecutive measured quaternions in the same hemisphere so the
    # pseudo-linear filter never sees a sign jump
    for i in range(1, len(quats)):
        if float(quats[i] @ quats[i - 1]) < 0.0:
            quats[i] = -quats[i]

    sp = cfg.process_noise_scale
    sm = cfg.measurement_noise_scale
    q_noise = np.diag(sp**2 * _Q_SHAPE)
    r_noise = np.diag(np.full(_MEAS_DIM, sm**2))

    x = np.zeros(n)
    x[:3] = positions[0]
    x[3:7] = quats[0]
    # initial velocities from the first frame pair, expressed in the local frame
    rot0 = quat_to_matrix(canonicalize_quat(quats[0]))
    x[7:10] = rot0.T @ (positions[1] - positions[0])
    x[10:13] = log_map(quat_compose(quat_inverse(quats[0]), quats[1]))
    cov = np.diag(
        np.concatenate([np.full(7, sm**2), np.full(6, 4.0 * sm**2)])
    )

    smoothed = [clip.poses[0]]
    for k in range(1, len(clip.poses)):
        try:
            sqrt_cov = np.linalg.cholesky((n + lam) * cov)
        except np.linalg.LinAlgError as exc:
            raise FilterDivergenceError(
                f"clip {clip.id!r}: covariance not positive-definite at frame {k}"
            ) from exc
        sigmas = np.empty((2 * n + 1, n))
        sigmas[0] = x
        sigmas[1 : n + 1] = x + sqrt_cov.T
        sigmas[n + 1 :] = x - sqrt_cov.T

        # predict
        sigmas_f = _ukf_process(sigmas)
        x_pred = w_m @ sigmas_f
        diff = sigmas_f - x_pred
        cov_pred = diff.T @ (w_c[:, None] * diff) + q_noise
        x_pred[3:7] /= np.linalg.norm(x_pred[3:7])

        # update with the measured pose
        z = np.concatenate([positions[k], quats[k]])
        sigmas_h = sigmas_f[:, :_MEAS_DIM]
        z_pred = w_m @ sigmas_h
        dz = sigmas_h - z_pred
        s_cov = dz.T @ (w_c[:, None] * dz) + r_noise
        cross = diff.T @ (w_c[:, None] * dz)
        gain = np.linalg.solve(s_cov.T, cross.T).T
        x = x_pred + gain @ (z - z_pred)
        cov = cov_pred - gain @ s_cov @ gain.T
        cov = 0.5 * (cov + cov.T)
        x[3:7] /= np.linalg.norm(x[3:7])
        if not np.all(np.isfinite(x)):
            raise FilterDivergenceError(f"clip {clip.id!r}: filter state non-finite at frame {k}")

        smoothed.append(CameraPose(x[:3], canonicalize_quat(x[3:7])))

    return Clip(
        id=clip.id,
        fps=clip.fps,
        poses=tuple(smoothed),
        scale_factor=clip.scale_factor,
        meta=dict(clip.meta),
    )


def deviation_score(
    clip: Clip, smoothed: Clip, threshold: float = DEFAULT_DEVIATION_THRESHOLD
) -> FilterVerdict:
    """Distance of the original camera locations to the smoothed camera path."""
    if len(clip) != len(smoothed):
        raise ClipError(
            f"length mismatch: clip has {len(clip)} poses, smoothed has {len(smoothed)}"
        )
    deviations = np.linalg.norm(clip.positions() - smoothed.positions(), axis=1)
    return FilterVerdict(
        max_deviation=float(np.max(deviations)),
        per_frame_deviation=deviations,
        threshold=threshold,
    )


@dataclass(frozen=True)
class ThresholdSelection:
    threshold: float
    tpr: float
    fpr: float
    youden_j: float


def select_threshold(labeled) -> ThresholdSelection:
    """Pick the deviation threshold maximizing Youden's J = TPR - FPR.

    `labeled` is a sequence of (max_deviation, is_correct) pairs. A clip is
    accepted when its deviation is <= threshold, so TPR is the fraction of
    correct clips accepted and FPR the fraction of incorrect clips accepted.
    Candidates are midpoints between adjacent sorted scores; ties go to the
    smaller threshold.
    """
    pairs = [(float(s), bool(c)) for s, c in labeled]
    n_pos = sum(1 for _, c in pairs if c)
    n_neg = len(pairs) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("select_threshold needs at least one correct and one incorrect label")
    scores = np.array(sorted(s for s, _ in pairs))
    candidates = (scores[:-1] + scores[1:]) / 2.0

    best = None
    for t in candidates:
        tpr = sum(1 for s, c in pairs if c and s <= t) / n_pos
        fpr = sum(1 for s, c in pairs if not c and s <= t) / n_neg
        j = tpr - fpr
        if best is None or j > best.youden_j + 1e-12:
            best = ThresholdSelection(float(t), tpr, fpr, j)
    return best


def roc_auc(labeled) -> float:
    """Area under the ROC curve for accept-if-below scoring (brute-force rank statistic)."""
    pos = [float(s) for s, c in labeled if c]
    neg = [float(s) for s, c in labeled if not c]
    if not pos or not neg:
        raise ValueError("roc_auc needs both classes")
    wins = 0.0
    for p in pos:
        for q in neg:
            if p < q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


@dataclass
class PipelineReport:
    """Per-clip rejection records plus counts per rejection reason."""

    rejections: list[dict] = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    accepted_ids: list[str] = field(default_factory=list)

    def reject(self, clip_id: str, reason: str, max_deviation: float | None = None):
        record = {"clip_id": clip_id, "reason": reason}
        if max_deviation is not None:
            record["max_deviation"] = max_deviation
        self.rejections.append(record)
        self.counts[reason] = self.counts.get(reason, 0) + 1

    def accept(self, clip_id: str):
        self.accepted_ids.append(clip_id)
        self.counts["accepted"] = self.counts.get("accepted", 0) + 1

    def to_json(self) -> dict:
        return {
            "counts": dict(sorted(self.counts.items())),
            "accepted": sorted(self.accepted_ids),
            "rejections": sorted(self.rejections, key=lambda r: r["clip_id"]),
        }


def run_pipeline(
    trajectories,
    fps: int = 15,
    threshold: float = DEFAULT_DEVIATION_THRESHOLD,
    cfg: UkfConfig | None = None,
) -> tuple[list[Clip], PipelineReport]:
    """Segment, normalize, screen, smooth, and score raw trajectories.

    `trajectories` is an iterable of (name, pose list[, meta dict]) tuples.
    Returns accepted clips (normalized) and the rejection report.
    """
    cfg = cfg or UkfConfig()
    accepted: list[Clip] = []
    report = PipelineReport()
    for entry in trajectories:
        name, poses = entry[0], entry[1]
        meta = entry[2] if len(entry) > 2 else {}
        for clip in segment_clips(poses, fps, id_prefix=name):
            clip = Clip(clip.id, clip.fps, clip.poses, clip.scale_factor, dict(meta))
            try:
                clip = normalize_scale(clip)
            except ClipError:
                report.reject(clip.id, "degenerate")
                continue
            if not speed_outlier_check(clip):
                report.reject(clip.id, "speed-outlier")
                continue
            try:
                smoothed = ukf_smooth(clip, cfg)
            except FilterDivergenceError:
                report.reject(clip.id, "filter-divergence")
                continue
            verdict = deviation_score(clip, smoothed, threshold)
            if verdict.accepted:
                report.accept(clip.id)
                accepted.append(clip)
            else:
                report.reject(clip.id, "deviation", verdict.max_deviation)
    accepted.sort(key=lambda c: c.id)
    return accepted, report


# ---------------------------------------------------------------------------
# File I/O: raw trajectories (CSV / JSON-lines) and clip files (JSON-lines).

_POSE_FIELDS = ("frame_index", "x", "y", "z", "qw", "qx", "qy", "qz")


def read_trajectory(path: Path) -> list[CameraPose]:
    """Read one raw pose sequence; CSV needs a header row, JSONL one record per line."""
    path = Path(path)
    records = []
    if path.suffix.lower() == ".csv":
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not set(_POSE_FIELDS) <= set(reader.fieldnames):
                raise ValueError(f"{path}: CSV header must contain {_POSE_FIELDS}")
            for row in reader:
                records.append({k: float(row[k]) for k in _POSE_FIELDS})
    else:
        with path.open() as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
    records.sort(key=lambda r: r["frame_index"])
    return [
        CameraPose([r["x"], r["y"], r["z"]], [r["qw"], r["qx"], r["qy"], r["qz"]])
        for r in records
    ]


def write_clip(clip: Clip, path: Path):
    """One clip per JSONL file: a metadata line followed by one line per frame."""
    path = Path(path)
    with path.open("w") as fh:
        meta = {
            "id": clip.id,
            "fps": clip.fps,
            "scale_factor": clip.scale_factor,
            "meta": clip.meta,
        }
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for i, pose in enumerate(clip.poses):
            x, y, z = pose.position
            qw, qx, qy, qz = pose.orientation
            fh.write(
                json.dumps(
                    {
                        "frame_index": i,
                        "x": x,
                        "y": y,
                        "z": z,
                        "qw": qw,
                        "qx": qx,
                        "qy": qy,
                        "qz": qz,
                    }
                )
                + "\n"
            )


def read_clip(path: Path) -> Clip:
    path = Path(path)
    with path.open() as fh:
        meta = json.loads(fh.readline())
        poses = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            r = json.loads(line)
            poses.append(
                CameraPose([r["x"], r["y"], r["z"]], [r["qw"], r["qx"], r["qy"], r["qz"]])
            )
    return Clip(
        id=meta["id"],
        fps=meta["fps"],
        poses=tuple(poses),
        scale_factor=meta.get("scale_factor", 1.0),
        meta=meta.get("meta", {}),
    )


def filter_directory(
    input_dir: Path,
    output_dir: Path,
    fps: int = 15,
    threshold: float = DEFAULT_DEVIATION_THRESHOLD,
    cfg: UkfConfig | None = None,
) -> PipelineReport:
    """Filter every trajectory or clip file in a directory; per-file I/O errors are recorded."""
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    def gen():
        for path in sorted(input_dir.iterdir()):
            if path.suffix.lower() not in (".csv", ".jsonl", ".json"):
                continue
            try:
                if path.suffix.lower() == ".jsonl" and _is_clip_file(path):
                    clip = read_clip(path)
                    yield clip.id, list(clip.poses), clip.meta
                else:
                    yield path.stem, read_trajectory(path), {}
            except (OSError, ValueError, KeyError) as exc:
                log.warning("skipping %s: %s", path.name, exc)
                errors.append({"clip_id": path.stem, "reason": f"io-error: {exc}"})

    errors: list[dict] = []
    accepted, report = run_pipeline(gen(), fps=fps, threshold=threshold, cfg=cfg)
    for err in errors:
        report.reject(err["clip_id"], err["reason"])
    for clip in accepted:
        write_clip(clip, output_dir / f"{clip.id}.jsonl")
    return report


def _is_clip_file(path: Path) -> bool:
    with path.open() as fh:
        first = fh.readline().strip()
    if not first:
        return False
    try:
        record = json.loads(first)
    except json.JSONDecodeError:
        return False
    return "id" in record and "fps" in record
