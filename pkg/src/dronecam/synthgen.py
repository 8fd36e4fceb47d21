"""Scripted expert flights and clip corruption for labeled synthetic corpora.

The experts produce smooth, collision-free 15 fps clips in simulation worlds:
terrain-hugging flyovers, obstacle-threading corridor runs, fixed-radius
orbits, and climbing reveals. Velocity and turn-rate slew limits keep the
paths C1-continuous so they comfortably pass the trajectory filter; a small
seeded position jitter stands in for reconstruction noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    CameraPose,
    exp_map,
    log_map,
    look_at_pose,
    quat_compose,
    quat_inverse,
)
from .simworld import World, collision, generate_world, write_world_spec
from .trajpipe import Clip, write_clip

STYLES = ("flyover", "corridor", "orbit", "reveal")

# style pools per world kind; corridor needs something to thread through and
# carries the obstacle-dodging demonstrations, so cities weight it double
DEFAULT_STYLE_POOLS = {
    "terrain": ("flyover", "orbit", "reveal"),
    "canyon": ("corridor", "flyover"),
    "city-blocks": ("corridor", "orbit", "corridor", "reveal"),
}

MAX_ACCEL = 4.0  # world units / s^2, velocity slew limit
MAX_TURN_RATE = 0.9  # rad / s, orientation slew limit
GEN_CLEARANCE = 1.5  # generation-time collision clearance, world units
POSITION_JITTER = 0.01  # std of seeded per-frame position noise, world units


class GenerationError(RuntimeError):
    """The controller could not produce a collision-free path for this seed."""


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 1e-12 else np.array([1.0, 0.0, 0.0])


def _slew_velocity(vel: np.ndarray, desired: np.ndarray, dt: float) -> np.ndarray:
    delta = desired - vel
    limit = MAX_ACCEL * dt
    norm = float(np.linalg.norm(delta))
    if norm > limit:
        delta = delta * (limit / norm)
    return vel + delta


def _slew_orientation(quat: np.ndarray, desired: np.ndarray, dt: float) -> np.ndarray:
    rotvec = log_map(quat_compose(quat_inverse(quat), desired))
    limit = MAX_TURN_RATE * dt
    angle = float(np.linalg.norm(rotvec))
    if angle > limit:
        rotvec = rotvec * (limit / angle)
    return quat_compose(quat, exp_map(rotvec))


@dataclass
class _ControllerState:
    position: np.ndarray
    velocity: np.ndarray
    quat: np.ndarray


def _terrain_follow_vz(world: World, pos, vel_dir, speed, clearance, kp=2.0):
    """Vertical rate tracking terrain + clearance with lookahead feedforward."""
    lookahead = pos[:2] + vel_dir[:2] * speed * 0.9
    z_here = float(world.height_at(pos[0], pos[1])) + clearance
    z_ahead = float(world.height_at(lookahead[0], lookahead[1])) + clearance
    z_target = max(z_here, z_ahead)
    feedforward = (z_ahead - z_here) / 0.9
    return kp * (z_target - pos[2]) + feedforward


def _box_repulsion(world: World, position: np.ndarray, influence=16.0, gain=2.2):
    """Horizontal push away from obstacle boxes the camera has not cleared."""
    push = np.zeros(3)
    for bmin, bmax in world.obstacles:
        if position[2] > bmax[2] + 3.0:
            continue
        gap = np.maximum(np.maximum(bmin - position, position - bmax), 0.0)
        dist = float(np.linalg.norm(gap))
        if dist < influence:
            away = _unit(position - 0.5 * (bmin + bmax))
            away[2] = 0.0
            push += away * (influence - dist) * gain
    return push


def _circle_floor(world: World, target: np.ndarray, radius: float) -> float:
    """Highest terrain or obstacle under the planned orbit circle."""
    angles = np.linspace(0.0, 2.0 * math.pi, 72, endpoint=False)
    xs = target[0] + radius * np.cos(angles)
    ys = target[1] + radius * np.sin(angles)
    floor = float(np.max(world.height_at(xs, ys)))
    for bmin, bmax in world.obstacles:
        # include any box whose footprint (with margin) the circle may cross
        half_diag = math.hypot(bmax[0] - bmin[0], bmax[1] - bmin[1]) / 2.0 + 3.0
        center = 0.5 * (bmin + bmax)
        d = math.hypot(target[0] - center[0], target[1] - center[1])
        if d - half_diag <= radius <= d + half_diag:
            floor = max(floor, float(bmax[2]))
    return floor


def _style_setup(world: World, style: str, rng: np.random.Generator):
    """Initial state plus a desired-velocity / look-target policy per style."""
    heading = rng.uniform(0.0, 2.0 * math.pi)
    if style == "flyover" and world.kind == "canyon":
        # stay within the corridor axis; crossing the walls outruns the climb rate
        heading = rng.uniform(-0.4, 0.4) + (0.0 if rng.random() < 0.5 else math.pi)
    direction = np.array([math.cos(heading), math.sin(heading), 0.0])

    info: dict = {"style": style}
    if style == "flyover":
        speed = rng.uniform(13.0, 16.0)
        clearance = rng.uniform(3.0, 8.0)
        info["clearance"] = clearance
        start_xy = -direction[:2] * 80.0 + rng.uniform(-25.0, 25.0, size=2)
        z0 = float(world.height_at(*start_xy)) + clearance
        pos = np.array([start_xy[0], start_xy[1], z0])

        def desired(state):
            vz = _terrain_follow_vz(world, state.position, direction, speed, clearance)
            v = direction * speed
            v[2] = np.clip(vz, -8.0, 8.0)
            look = state.position + _unit(state.velocity) * 12.0
            look[2] -= 3.0
            return v, look

    elif style == "corridor":
        if world.kind == "canyon":
            sign = 1.0 if rng.random() < 0.5 else -1.0
            direction = np.array([sign, 0.0, 0.0])
            speed = rng.uniform(13.0, 16.0)
            clearance = rng.uniform(4.0, 6.0)
            pos = np.array(
                [-sign * 85.0, rng.uniform(-6.0, 6.0), 0.0]
            )
            pos[2] = float(world.height_at(pos[0], pos[1])) + clearance

            def desired(state):
                v = direction * speed
                v[1] = -0.6 * state.position[1]  # stay near the corridor centerline
                v[2] = np.clip(
                    _terrain_follow_vz(world, state.position, direction, speed, clearance),
                    -5.0,
                    5.0,
                )
                look = state.position + _unit(state.velocity) * 12.0
                look[2] -= 2.0
                return v, look

        else:
            speed = rng.uniform(12.0, 15.0)
            altitude = rng.uniform(8.0, 14.0)
            start_xy = -direction[:2] * 75.0 + rng.uniform(-20.0, 20.0, size=2)
            pos = np.array([start_xy[0], start_xy[1], altitude])

            def desired(state):
                v = direction * speed + _box_repulsion(world, state.position, influence=18.0, gain=2.6)
                v = _unit(v) * speed
                v[2] = np.clip(1.5 * (altitude - state.position[2]), -3.0, 3.0)
                look = state.position + _unit(state.velocity) * 12.0
                look[2] -= 2.0
                return v, look

    elif style == "orbit":
        speed = rng.uniform(11.0, 13.5)
        radius = rng.uniform(45.0, 60.0)
        if len(world.obstacles):
            box = world.obstacles[rng.integers(len(world.obstacles))]
            target = 0.5 * (box[0] + box[1])
            target[2] = box[1][2] * 0.6
        else:
            txy = rng.uniform(-40.0, 40.0, size=2)
            target = np.array([txy[0], txy[1], float(world.height_at(*txy))])
        phase = rng.uniform(0.0, 2.0 * math.pi)
        turn = 1.0 if rng.random() < 0.5 else -1.0
        # fly above everything the planned circle passes over
        z0 = max(
            target[2] + rng.uniform(4.0, 10.0),
            _circle_floor(world, target, radius) + GEN_CLEARANCE + rng.uniform(2.0, 6.0),
        )
        info["radius"] = radius
        info["target"] = [float(t) for t in target]
        pos = target + np.array([radius * math.cos(phase), radius * math.sin(phase), 0.0])
        pos[2] = z0

        def desired(state):
            radial = state.position - target
            radial[2] = 0.0
            r = float(np.linalg.norm(radial))
            out = _unit(radial)
            tangent = np.array([-out[1], out[0], 0.0]) * turn
            v = tangent * speed + out * 1.5 * (radius - r)
            v[2] = np.clip(1.5 * (z0 - state.position[2]), -2.0, 2.0)
            return v, target.copy()

    elif style == "reveal":
        speed = rng.uniform(8.0, 11.0)
        climb = rng.uniform(3.0, 5.0)
        txy = rng.uniform(-30.0, 30.0, size=2)
        target = np.array([txy[0], txy[1], float(world.height_at(*txy))])
        start_xy = target[:2] - direction[:2] * 35.0
        z0 = float(world.height_at(*start_xy)) + rng.uniform(5.0, 8.0)
        if len(world.obstacles):
            z0 = max(z0, 12.0)
        pos = np.array([start_xy[0], start_xy[1], z0])

        def desired(state):
            v = direction * speed + _box_repulsion(world, state.position)
            v = _unit(v) * speed
            v[2] = climb
            return v, target.copy()

    else:
        raise ValueError(f"unknown style {style!r}; expected one of {STYLES}")

    vel0, look0 = desired(_ControllerState(pos, direction * 1.0, np.zeros(4)))
    quat0 = look_at_pose(pos, look0 - pos).orientation
    return _ControllerState(pos.copy(), vel0.copy(), quat0), desired, info


def expert_trajectory(
    world: World,
    style: str,
    seed: int,
    fps: int = 15,
    duration_s: float | None = None,
    clip_id: str | None = None,
    jitter: float = POSITION_JITTER,
    gust_scale: float = 1.0,
) -> Clip:
    """Scripted, collision-free demonstration flight sampled at `fps`.

    Seeded gust disturbances push the controller off its nominal path so the
    clips demonstrate corrections, not only equilibrium flight; the style
    feedback (terrain following, centering, radial hold) flies them out.
    Orbits get weaker gusts to preserve the fixed-radius contract.
    """
    rng = np.random.default_rng(seed)
    dt = 1.0 / fps
    duration = duration_s if duration_s is not None else float(rng.uniform(4.0, 10.0))
    n_frames = int(round(duration * fps))
    state, desired, info = _style_setup(world, style, rng)

    if collision(world, state.position, state.position + 1e-6, clearance=GEN_CLEARANCE):
        raise GenerationError(f"style {style!r} seed {seed}: start position not clear")

    gust_sigma = (0.8 if style == "orbit" else 2.2) * gust_scale
    gust = np.zeros(3)
    gust_target = np.zeros(3)

    poses = []
    for frame in range(n_frames):
        jittered = state.position + rng.standard_normal(3) * jitter
        poses.append(CameraPose(jittered, state.quat))

        if gust_sigma > 0 and frame % 20 == 0:
            gust_target = rng.standard_normal(3) * gust_sigma
            gust_target[2] *= 0.6
        gust += np.clip(gust_target - gust, -3.0 * dt, 3.0 * dt)

        v_des, look = desired(state)
        state.velocity = _slew_velocity(state.velocity, v_des + gust, dt)
        new_position = state.position + state.velocity * dt
        if collision(world, state.position, new_position, clearance=GEN_CLEARANCE):
            raise GenerationError(
                f"style {style!r} seed {seed}: collision at frame {len(poses)}"
            )
        state.position = new_position
        look_dir = look - state.position
        if np.linalg.norm(look_dir) > 1e-9:
            q_des = look_at_pose(state.position, look_dir).orientation
            state.quat = _slew_orientation(state.quat, q_des, dt)

    return Clip(
        id=clip_id or f"{style}_{seed:06d}",
        fps=fps,
        poses=tuple(poses),
        meta={**info, "seed": seed},
    )


def corrupt_clip(clip: Clip, mode: str, magnitude: float, seed: int) -> Clip:
    """Inject the reconstruction failure modes the filter must catch."""
    if magnitude < 0:
        raise ValueError(f"magnitude must be >= 0, got {magnitude}")
    rng = np.random.default_rng(seed)
    poses = list(clip.poses)
    if mode == "jump":
        frame = int(rng.integers(1, len(poses) - 1))
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        p = poses[frame]
        poses[frame] = CameraPose(p.position + direction * magnitude, p.orientation)
    elif mode == "jitter":
        noise = rng.standard_normal((len(poses), 3)) * magnitude
        poses = [CameraPose(p.position + n, p.orientation) for p, n in zip(poses, noise)]
    else:
        raise ValueError(f"unknown corruption mode {mode!r}; expected 'jump' or 'jitter'")
    return Clip(
        id=f"{clip.id}_{mode}",
        fps=clip.fps,
        poses=tuple(poses),
        scale_factor=clip.scale_factor,
        meta={**clip.meta, "corruption": mode, "magnitude": magnitude},
    )


def generate_corpus(
    out_dir: Path,
    n_worlds: int = 10,
    clips_per_world: int = 5,
    styles: tuple[str, ...] | None = None,
    seed: int = 0,
    world_kinds: tuple[str, ...] = ("terrain", "canyon", "city-blocks"),
    duration_s: float | None = None,
) -> dict:
    """Write worlds/ and clips/ under out_dir; fully deterministic per seed."""
    out_dir = Path(out_dir)
    worlds_dir = out_dir / "worlds"
    clips_dir = out_dir / "clips"
    worlds_dir.mkdir(parents=True, exist_ok=True)
    clips_dir.mkdir(parents=True, exist_ok=True)

    manifest = {"worlds": [], "clips": [], "failures": 0}
    for w in range(n_worlds):
        kind = world_kinds[w % len(world_kinds)]
        world_seed = seed * 10_000 + w
        world_id = f"w{w:03d}"
        world = generate_world(seed=world_seed, kind=kind)
        write_world_spec(worlds_dir / f"{world_id}.json", seed=world_seed, kind=kind)
        manifest["worlds"].append(world_id)

        pool = styles or DEFAULT_STYLE_POOLS[kind]
        made = 0
        attempt = 0
        while made < clips_per_world and attempt < clips_per_world * 8:
            style = pool[made % len(pool)]
            clip_seed = world_seed * 1_000 + attempt
            attempt += 1
            clip_id = f"{world_id}_{style}_{made:02d}"
            try:
                clip = expert_trajectory(
                    world, style, seed=clip_seed, clip_id=clip_id, duration_s=duration_s
                )
            except GenerationError:
                manifest["failures"] += 1
                continue
            clip = Clip(
                clip.id,
                clip.fps,
                clip.poses,
                clip.scale_factor,
                {**clip.meta, "world": world_id, "kind": kind},
            )
            write_clip(clip, clips_dir / f"{clip_id}.jsonl")
            manifest["clips"].append(clip_id)
            made += 1
    return manifest
