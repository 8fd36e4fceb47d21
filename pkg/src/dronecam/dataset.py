"""Model-ready training sequences from accepted clips.

A 15 fps clip becomes a sequence of 3 fps frames; each frame carries the
camera pose (re-expressed so frame 0 is the identity), rendered patch
features and depth, and the five 15 fps sub-step motions that lead to the
next frame. Motions are z-scored against corpus statistics at training time.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    CameraMotion,
    CameraPose,
    integrate_motion,
    rebase_poses,
    relative_motion,
)
from .simworld import (
    DEFAULT_FEATURE_DIM,
    DepthMap,
    World,
    load_world_spec,
    patch_features,
    render_depth,
)
from .trajpipe import Clip, read_clip

N_SUBSTEPS = 5
MAX_FRAMES = 30
STD_FLOOR = 1e-6


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FrameSample:
    """One 3 fps frame: pose, rendered observation, and its five sub-step motions."""

    pose: CameraPose
    patch_features: np.ndarray  # (5, 9, F)
    depth_patches: np.ndarray  # (5, 9)
    actions: tuple[CameraMotion, ...]  # length N_SUBSTEPS

    def __post_init__(self):
        if len(self.actions) != N_SUBSTEPS:
            raise DatasetError(f"frame needs {N_SUBSTEPS} actions, got {len(self.actions)}")

    def action_matrix(self) -> np.ndarray:
        return np.array([a.as_vector() for a in self.actions])


@dataclass(frozen=True, eq=False)
class TrainingSequence:
    """Up to 30 frames (10 s at 3 fps) from one clip."""

    clip_id: str
    frames: tuple[FrameSample, ...]
    cond_seed: int = 0

    def __post_init__(self):
        if not 1 <= len(self.frames) <= MAX_FRAMES:
            raise DatasetError(
                f"sequence {self.clip_id!r} must have 1..{MAX_FRAMES} frames, got {len(self.frames)}"
            )

    def __len__(self) -> int:
        return len(self.frames)

    def poses(self) -> np.ndarray:
        return np.array([f.pose.as_vector() for f in self.frames])

    def features(self) -> np.ndarray:
        return np.array([f.patch_features for f in self.frames])

    def depths(self) -> np.ndarray:
        return np.array([f.depth_patches for f in self.frames])

    def actions(self) -> np.ndarray:
        return np.array([f.action_matrix() for f in self.frames])


@dataclass(frozen=True)
class MotionStats:
    """Componentwise mean/std over all sub-step motions in a corpus."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).reshape(6))
        object.__setattr__(self, "std", np.maximum(np.asarray(self.std, dtype=float).reshape(6), STD_FLOOR))

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @staticmethod
    def from_json(data: dict) -> "MotionStats":
        return MotionStats(np.array(data["mean"]), np.array(data["std"]))


def chunk_actions(clip: Clip) -> list[tuple[CameraPose, tuple[CameraMotion, ...]]]:
    """Skeleton of (frame pose, 5 sub-step motions) pairs with frame 0 as identity.

    The clip is truncated to a multiple of 5 poses; frame t's pose is the
    15 fps pose at index 5t and its actions are the motions between
    consecutive poses in [5t, 5t+5]. The final sub-step of the last frame has
    no successor pose and repeats the preceding motion.
    """
    usable = (len(clip) // N_SUBSTEPS) * N_SUBSTEPS
    if usable < N_SUBSTEPS:
        raise DatasetError(f"clip {clip.id!r} too short to chunk: {len(clip)} poses")
    dt = 1.0 / clip.fps
    poses = rebase_poses(list(clip.poses[:usable]))
    motions = [relative_motion(a, b, dt) for a, b in zip(poses, poses[1:])]
    motions.append(motions[-1])  # pad the final sub-step
    frames = []
    for t in range(usable // N_SUBSTEPS):
        actions = tuple(motions[N_SUBSTEPS * t + k] for k in range(N_SUBSTEPS))
        frames.append((poses[N_SUBSTEPS * t], actions))
    return frames


def compute_stats(sequences) -> MotionStats:
    """Brute mean/std over every sub-step motion component in the corpus."""
    rows = [seq.actions().reshape(-1, 6) for seq in sequences]
    if not rows:
        raise DatasetError("cannot compute stats over an empty corpus")
    stacked = np.concatenate(rows, axis=0)
    return MotionStats(mean=stacked.mean(axis=0), std=stacked.std(axis=0))


def normalize_motion(motion, stats: MotionStats) -> np.ndarray:
    vec = motion.as_vector() if isinstance(motion, CameraMotion) else np.asarray(motion, float)
    return (vec - stats.mean) / stats.std


def denormalize_motion(normalized, stats: MotionStats) -> CameraMotion:
    vec = np.asarray(normalized, dtype=float) * stats.std + stats.mean
    return CameraMotion(vec[:3], vec[3:])


# --- horizontal flip augmentation -----------------------------------------------


def _mirror_pose(pose: CameraPose) -> CameraPose:
    p = pose.position
    w, x, y, z = pose.orientation
    return CameraPose([-p[0], p[1], p[2]], [w, x, -y, -z])


def _mirror_motion(motion: CameraMotion) -> CameraMotion:
    v = motion.linear_velocity
    w = motion.angular_velocity
    return CameraMotion([-v[0], v[1], v[2]], [w[0], -w[1], -w[2]])


def hflip(sequence: TrainingSequence) -> TrainingSequence:
    """Mirror across the clip frame's x = 0 plane; an exact involution.

    Positions negate x, quaternions conjugate by diag(-1, 1, 1), motions get
    lateral velocity / yaw / roll sign flips (identical to re-deriving them
    from the mirrored pose sequence), and patch grids reverse their columns.
    """
    frames = tuple(
        FrameSample(
            pose=_mirror_pose(f.pose),
            patch_features=f.patch_features[:, ::-1].copy(),
            depth_patches=f.depth_patches[:, ::-1].copy(),
            actions=tuple(_mirror_motion(a) for a in f.actions),
        )
        for f in sequence.frames
    )
    return TrainingSequence(clip_id=sequence.clip_id, frames=frames, cond_seed=sequence.cond_seed)


# --- dataset build ----------------------------------------------------------------


def render_frame_observation(
    world: World,
    world_pose: CameraPose,
    scale_factor: float = 1.0,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    width: int = 80,
    height: int = 45,
    hfov_deg: float = 70.0,
    max_range: float = 80.0,
):
    """Depth-derived patch features at a world-frame pose.

    Positions in normalized clips are world positions times scale_factor, so
    the rendered depths are scaled by the same factor to keep the observation
    consistent with the motion units the model sees.
    """
    dm = render_depth(world, world_pose, width=width, height=height, hfov_deg=hfov_deg, max_range=max_range)
    if scale_factor != 1.0:
        dm = DepthMap(
            depths=dm.depths * scale_factor,
            hfov_deg=dm.hfov_deg,
            max_range=dm.max_range * scale_factor,
        )
    return patch_features(dm, feature_dim=feature_dim)


def build_sequence(
    clip: Clip,
    world: World,
    cond_seed: int | None = None,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    **render_kw,
) -> TrainingSequence:
    """Chunk one accepted clip and render its per-frame observations."""
    skeleton = chunk_actions(clip)
    if len(skeleton) > MAX_FRAMES:
        skeleton = skeleton[:MAX_FRAMES]
    scale = clip.scale_factor
    frames = []
    for t, (pose, actions) in enumerate(skeleton):
        world_pose = CameraPose(
            clip.poses[N_SUBSTEPS * t].position / scale, clip.poses[N_SUBSTEPS * t].orientation
        )
        feats, depth = render_frame_observation(
            world, world_pose, scale_factor=scale, feature_dim=feature_dim, **render_kw
        )
        frames.append(
            FrameSample(pose=pose, patch_features=feats, depth_patches=depth, actions=actions)
        )
    if cond_seed is None:
        cond_seed = zlib.crc32(clip.id.encode())
    return TrainingSequence(clip_id=clip.id, frames=tuple(frames), cond_seed=cond_seed)


def build_dataset(
    clips_dir: Path,
    worlds_dir: Path,
    output_file: Path,
    stats_file: Path | None = None,
    flip_prob: float = 0.5,
    seed: int = 0,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    **render_kw,
) -> tuple[list[TrainingSequence], MotionStats]:
    """Build, optionally flip, and serialize every clip in a directory."""
    clips_dir, worlds_dir = Path(clips_dir), Path(worlds_dir)
    worlds: dict[str, World] = {}
    sequences = []
    rng = np.random.default_rng(seed)
    for path in sorted(clips_dir.glob("*.jsonl")):
        clip = read_clip(path)
        world_id = clip.meta.get("world")
        if world_id is None:
            raise DatasetError(f"clip {clip.id!r} has no world reference in its metadata")
        if world_id not in worlds:
            worlds[world_id] = load_world_spec(worlds_dir / f"{world_id}.json")
        cond_seed = (zlib.crc32(clip.id.encode()) ^ (seed * 0x9E3779B1)) & 0x7FFFFFFF
        seq = build_sequence(
            clip, worlds[world_id], cond_seed=cond_seed, feature_dim=feature_dim, **render_kw
        )
        if rng.random() < flip_prob:
            seq = hflip(seq)
        sequences.append(seq)

    write_sequences(output_file, sequences)
    sequences = load_sequences(output_file)  # stats from the serialized precision
    stats = compute_stats(sequences)
    if stats_file is None:
        stats_file = Path(output_file).with_suffix(".stats.json")
    Path(stats_file).write_text(json.dumps(stats.to_json(), sort_keys=True) + "\n")
    return sequences, stats


# --- serialization -----------------------------------------------------------------


def _round_nested(arr: np.ndarray, decimals: int):
    return np.round(arr, decimals).tolist()


def write_sequences(path: Path, sequences):
    """JSON-lines, one TrainingSequence per line.

    Observations are rounded to 9 decimals and poses/actions to 12 to keep
    files compact; statistics are always computed from the serialized values.
    """
    with Path(path).open("w") as fh:
        for seq in sequences:
            record = {
                "clip_id": seq.clip_id,
                "cond_seed": seq.cond_seed,
                "frames": [
                    {
                        "pose": _round_nested(f.pose.as_vector(), 12),
                        "patch_features": _round_nested(f.patch_features, 9),
                        "depth_patches": _round_nested(f.depth_patches, 9),
                        "actions": _round_nested(f.action_matrix(), 12),
                    }
                    for f in seq.frames
                ],
            }
            fh.write(json.dumps(record) + "\n")


def load_sequences(path: Path) -> list[TrainingSequence]:
    sequences = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            frames = tuple(
                FrameSample(
                    pose=CameraPose.from_vector(np.array(f["pose"])),
                    patch_features=np.array(f["patch_features"]),
                    depth_patches=np.array(f["depth_patches"]),
                    actions=tuple(
                        CameraMotion(np.array(a[:3]), np.array(a[3:])) for a in f["actions"]
                    ),
                )
                for f in rec["frames"]
            )
            sequences.append(
                TrainingSequence(
                    clip_id=rec["clip_id"], frames=frames, cond_seed=rec["cond_seed"]
                )
            )
    return sequences


def replay_sequence(sequence: TrainingSequence, fps: int = 15) -> list[CameraPose]:
    """Integrate every sub-step action from the identity; used for round-trip checks."""
    dt = 1.0 / fps
    pose = sequence.frames[0].pose
    out = [pose]
    for frame in sequence.frames:
        for action in frame.actions:
            pose = integrate_motion(pose, action, dt)
            out.append(pose)
    return out
