"""Closed-loop episode rollout: render, predict, integrate, check collision.

The loop observes at 3 fps and predicts five 1/15 s sub-step motions per
observation, integrating and collision-checking every sub-step so fast
motions cannot tunnel through geometry. Poses the model sees are re-expressed
so its context starts at the identity; when the context window fills, the
oldest frames are dropped, the retained ones are re-based onto the new first
frame, and generation continues (the conditioning token is always kept).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import MotionStats, render_frame_observation
from .geometry import CameraMotion, CameraPose, integrate_motion
from .model import DVGModel, InferenceSession, sample_cond
from .simworld import World, collision

OBS_FPS = 3
SUBSTEP_FPS = 15
N_SUBSTEPS = SUBSTEP_FPS // OBS_FPS


class RolloutError(ValueError):
    pass


@dataclass
class EpisodeResult:
    """Full 15 fps pose trace (first pose = identity) plus termination record."""

    poses: list[CameraPose]
    motions: list[CameraMotion]
    terminated_by: str  # "duration" or "collision"
    duration_s: float
    cond_seed: int
    completed_frames: int
    window_slides: int = 0
    frames: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "terminated_by": self.terminated_by,
            "duration_s": self.duration_s,
            "cond_seed": self.cond_seed,
            "completed_frames": self.completed_frames,
            "window_slides": self.window_slides,
            "poses": [pose.as_vector().tolist() for pose in self.poses],
            "motions": [m.as_vector().tolist() for m in self.motions],
        }

    @staticmethod
    def from_json(data: dict) -> "EpisodeResult":
        return EpisodeResult(
            poses=[CameraPose.from_vector(np.array(p)) for p in data["poses"]],
            motions=[CameraMotion.from_vector(np.array(m)) for m in data["motions"]],
            terminated_by=data["terminated_by"],
            duration_s=data["duration_s"],
            cond_seed=data["cond_seed"],
            completed_frames=data["completed_frames"],
            window_slides=data.get("window_slides", 0),
        )


def write_episode(path: Path, episode: EpisodeResult):
    Path(path).write_text(json.dumps(episode.to_json(), sort_keys=True) + "\n")


def read_episode(path: Path) -> EpisodeResult:
    return EpisodeResult.from_json(json.loads(Path(path).read_text()))


# --- policies -------------------------------------------------------------------


class ConstantMotionPolicy:
    """Scripted stand-in policy emitting a fixed local-frame motion (tests, smoke runs)."""

    def __init__(self, motion: CameraMotion):
        self.motion = motion

    def start(self, cond_seed: int) -> "_ConstantSession":
        return _ConstantSession(self.motion)

    @property
    def window_capacity(self) -> int | None:
        return None  # unlimited context


class _ConstantSession:
    def __init__(self, motion):
        self.motion = motion

    def begin_frame(self, pose7, feats, depths):
        pass

    def next_substep(self, substep: int) -> CameraMotion:
        return self.motion

    def commit_substep(self, substep: int, motion: CameraMotion):
        pass

    def end_frame(self):
        pass


class ModelPolicy:
    """Trained transformer + motion statistics behind the rollout session API."""

    def __init__(self, model: DVGModel, stats: MotionStats):
        self.model = model
        self.stats = stats

    def start(self, cond_seed: int) -> "_ModelSession":
        cond = sample_cond(cond_seed, self.model.cfg.hidden_dim)
        return _ModelSession(self.model, self.stats, cond)

    @property
    def window_capacity(self) -> int:
        return self.model.cfg.max_frames


class _ModelSession:
    def __init__(self, model: DVGModel, stats: MotionStats, cond: np.ndarray):
        self.model = model
        self.stats = stats
        self.session = InferenceSession(model, cond)
        self._frame_preds: np.ndarray | None = None

    def begin_frame(self, pose7, feats, depths):
        self.session.append_observation(np.asarray(pose7), np.asarray(feats), np.asarray(depths))
        if not self.model.cfg.action_tokens:
            raw = self.session.predict_next_action()
            self._frame_preds = raw.reshape(self.model.cfg.n_substeps, 6)

    def next_substep(self, substep: int) -> CameraMotion:
        if self.model.cfg.action_tokens:
            norm = self.session.predict_next_action()
        else:
            norm = self._frame_preds[substep]
        vec = np.asarray(norm, dtype=float) * self.stats.std + self.stats.mean
        return CameraMotion(vec[:3], vec[3:])

    def commit_substep(self, substep: int, motion: CameraMotion):
        if self.model.cfg.action_tokens:
            norm = (motion.as_vector() - self.stats.mean) / self.stats.std
            self.session.append_action(norm, substep=substep)

    def end_frame(self):
        self.session.end_frame()


# --- episode loop ------------------------------------------------------------------


@dataclass
class _FrameRecord:
    world_pose: CameraPose  # pose at which the observation was rendered
    feats: np.ndarray
    depths: np.ndarray
    motions: list[CameraMotion] = field(default_factory=list)


def _rebase7(pose: CameraPose, base: CameraPose) -> np.ndarray:
    return base.inverse().compose(pose).as_vector()


def run_episode(
    policy,
    world: World,
    init_pose: CameraPose,
    cond_seed: int,
    duration_s: float,
    clearance: float = 0.2,
    window_frames: int | None = None,
    keep_frames: int = 15,
    render_kw: dict | None = None,
) -> EpisodeResult:
    """Roll the policy out in the world until the duration elapses or it collides.

    With window_frames set, the context is slid once it would exceed that many
    frames: the most recent keep_frames observations (and their executed
    actions) are replayed into a fresh session re-based on the new first frame.
    """
    if duration_s <= 0:
        raise RolloutError(f"duration must be positive, got {duration_s}")
    probe = init_pose.position + np.array([0.0, 0.0, -1e-9])
    if collision(world, init_pose.position, probe, clearance=clearance):
        raise RolloutError("initial pose is not collision-free")
    capacity = window_frames or policy.window_capacity
    if window_frames is None and capacity is not None:
        if duration_s * OBS_FPS > capacity:
            raise RolloutError(
                f"{duration_s} s needs more than {capacity} frames; use the windowed mode"
            )
    if window_frames is not None and not 1 <= keep_frames < window_frames:
        raise RolloutError("keep_frames must be in [1, window_frames)")

    render_kw = render_kw or {}
    n_frames = int(round(duration_s * OBS_FPS))
    dt = 1.0 / SUBSTEP_FPS

    session = policy.start(cond_seed)
    base = init_pose
    world_pose = init_pose
    history: list[_FrameRecord] = []
    context_frames = 0

    inv_init = init_pose.inverse()
    poses = [CameraPose.identity()]
    motions: list[CameraMotion] = []
    frames_meta: list[dict] = []
    terminated_by = "duration"
    completed = 0
    slides = 0

    for frame_idx in range(n_frames):
        if capacity is not None and context_frames >= capacity:
            if window_frames is None:
                raise RolloutError("context full without a window; should be unreachable")
            slides += 1
            retained = history[-keep_frames:]
            base = retained[0].world_pose
            session = policy.start(cond_seed)
            for record in retained:
                session.begin_frame(
                    _rebase7(record.world_pose, base), record.feats, record.depths
                )
                for k, m in enumerate(record.motions):
                    session.commit_substep(k, m)
                session.end_frame()
            history = list(retained)
            context_frames = len(retained)

        feats, depths = render_frame_observation(world, world_pose, **render_kw)
        record = _FrameRecord(world_pose=world_pose, feats=feats, depths=depths)
        session.begin_frame(_rebase7(world_pose, base), feats, depths)

        collided = False
        for k in range(N_SUBSTEPS):
            motion = session.next_substep(k)
            new_pose = integrate_motion(world_pose, motion, dt)
            poses.append(inv_init.compose(new_pose))
            motions.append(motion)
            if collision(world, world_pose.position, new_pose.position, clearance=clearance):
                collided = True
                frames_meta.append({"frame": frame_idx, "substeps": k + 1})
                break
            session.commit_substep(k, motion)
            record.motions.append(motion)
            world_pose = new_pose
        if collided:
            terminated_by = "collision"
            break
        session.end_frame()
        history.append(record)
        context_frames += 1
        completed += 1
        frames_meta.append({"frame": frame_idx, "substeps": N_SUBSTEPS})

    return EpisodeResult(
        poses=poses,
        motions=motions,
        terminated_by=terminated_by,
        duration_s=len(motions) * dt,
        cond_seed=cond_seed,
        completed_frames=completed,
        window_slides=slides,
        frames=frames_meta,
    )


def run_episode_windowed(
    policy,
    world: World,
    init_pose: CameraPose,
    cond_seed: int,
    duration_s: float,
    window_frames: int = 30,
    keep_frames: int = 15,
    **kw,
) -> EpisodeResult:
    """Beyond-context generation via sliding-window recurrence."""
    return run_episode(
        policy,
        world,
        init_pose,
        cond_seed,
        duration_s,
        window_frames=window_frames,
        keep_frames=keep_frames,
        **kw,
    )
