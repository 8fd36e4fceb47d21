"""Trajectory quality metrics: collision rate and motion smoothness.

Smoothness is the maximum relative change between consecutive per-step
velocities over the 15 fps pose trace: the largest jump in linear velocity as
a percentage of the mean speed, and likewise for angular velocity with a
small floor on the mean so rotation-free traces stay finite.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import relative_motion

OMEGA_FLOOR = 1e-3  # rad/s, keeps delta_omega finite on rotation-free traces


class MetricsError(ValueError):
    pass


def smoothness(poses, fps: int = 15) -> tuple[float, float]:
    """(delta_v, delta_omega) in percent for a pose trace at `fps`."""
    poses = list(poses)
    if len(poses) < 3:
        raise MetricsError(f"smoothness needs >= 3 poses, got {len(poses)}")
    dt = 1.0 / fps
    motions = [relative_motion(a, b, dt) for a, b in zip(poses, poses[1:])]
    lin = np.array([m.linear_velocity for m in motions])
    ang = np.array([m.angular_velocity for m in motions])
    dv = np.linalg.norm(np.diff(lin, axis=0), axis=1)
    dw = np.linalg.norm(np.diff(ang, axis=0), axis=1)
    mean_speed = float(np.linalg.norm(lin, axis=1).mean())
    mean_rate = float(np.linalg.norm(ang, axis=1).mean())
    delta_v = float(dv.max()) / max(mean_speed, 1e-12) * 100.0
    delta_omega = float(dw.max()) / max(mean_rate, OMEGA_FLOOR) * 100.0
    return delta_v, delta_omega


def collision_rate(episodes) -> float:
    """Fraction of episodes terminated by collision."""
    episodes = list(episodes)
    if not episodes:
        raise MetricsError("collision_rate needs at least one episode")
    hits = sum(1 for e in episodes if e.terminated_by == "collision")
    return hits / len(episodes)


@dataclass(frozen=True)
class MetricsReport:
    episodes: int
    collision_rate: float
    delta_v: float  # percent, mean over episodes with enough poses
    delta_omega: float  # percent
    per_episode: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.collision_rate <= 1.0:
            raise MetricsError(f"collision_rate out of range: {self.collision_rate}")

    def to_json(self) -> dict:
        return {
            "episodes": self.episodes,
            "collision_rate": self.collision_rate,
            "delta_v_percent": self.delta_v,
            "delta_omega_percent": self.delta_omega,
            "per_episode": self.per_episode,
        }


def evaluate_episodes(episodes, fps: int = 15) -> MetricsReport:
    """Aggregate collision rate and smoothness over a set of episodes."""
    episodes = list(episodes)
    rate = collision_rate(episodes)
    per_episode = []
    dvs, dws = [], []
    for i, episode in enumerate(episodes):
        record = {
            "index": i,
            "cond_seed": episode.cond_seed,
            "terminated_by": episode.terminated_by,
            "duration_s": episode.duration_s,
        }
        if len(episode.poses) >= 3:
            dv, dw = smoothness(episode.poses, fps=fps)
            record["delta_v_percent"] = dv
            record["delta_omega_percent"] = dw
            dvs.append(dv)
            dws.append(dw)
        per_episode.append(record)
    return MetricsReport(
        episodes=len(episodes),
        collision_rate=rate,
        delta_v=float(np.mean(dvs)) if dvs else 0.0,
        delta_omega=float(np.mean(dws)) if dws else 0.0,
        per_episode=per_episode,
    )


CSV_COLUMNS = (
    "index",
    "cond_seed",
    "terminated_by",
    "duration_s",
    "delta_v_percent",
    "delta_omega_percent",
)


def emit_report(
    report: MetricsReport, json_path: Path | None = None, csv_path: Path | None = None
):
    """Deterministic serialization; identical reports produce identical bytes."""
    if json_path is not None:
        Path(json_path).write_text(json.dumps(report.to_json(), sort_keys=True) + "\n")
    if csv_path is not None:
        with Path(csv_path).open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
            writer.writeheader()
            for record in report.per_episode:
                writer.writerow({k: record.get(k, "") for k in CSV_COLUMNS})
