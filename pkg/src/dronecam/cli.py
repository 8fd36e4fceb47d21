"""Command-line entry point wiring the full pipeline.

Subcommands: synth, filter, calibrate, dataset, train, rollout, eval, world.
Exit codes: 0 success, 1 validation/usage error, 2 runtime failure. A global
--seed is threaded into every stochastic component so identical invocations
produce byte-identical primary outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("dronecam")


class CliValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        raise CliValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dronecam", description=__doc__)
    parser.add_argument("--seed", type=int, default=0, help="global seed for stochastic stages")
    parser.add_argument("--jobs", type=int, default=1, help="reserved; processing is sequential for determinism")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", parents=[], help="generate synthetic worlds and expert clips")
    p.add_argument("--worlds", type=int, default=10)
    p.add_argument("--clips-per-world", type=int, default=5)
    p.add_argument("--styles", type=str, default=None, help="comma list: flyover,corridor,orbit,reveal")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--duration", type=float, default=None, help="fixed clip duration in seconds")

    p = sub.add_parser("filter", help="segment, normalize, smooth, and accept/reject trajectories")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--fps", type=int, default=15)
    p.add_argument("--ukf-alpha", type=float, default=0.1)
    p.add_argument("--ukf-beta", type=float, default=2.0)
    p.add_argument("--ukf-kappa", type=float, default=10.0)
    p.add_argument("--report", type=Path, default=None, help="rejection report path (default OUTPUT/report.json)")

    p = sub.add_parser("calibrate", help="pick the deviation threshold from labeled scores")
    p.add_argument("--labels", type=Path, required=True, help="JSONL of {max_deviation, correct}")

    p = sub.add_parser("dataset", help="dataset operations")
    dsub = p.add_subparsers(dest="dataset_command", metavar="ACTION")
    b = dsub.add_parser("build", help="render observations and chunk accepted clips")
    b.add_argument("--clips", type=Path, required=True)
    b.add_argument("--worlds", type=Path, required=True)
    b.add_argument("--output", type=Path, required=True)
    b.add_argument("--stats", type=Path, default=None)
    b.add_argument("--flip-prob", type=float, default=0.5)

    p = sub.add_parser("train", help="train the camera-motion transformer")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--stats", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None, help="JSON with ModelConfig overrides")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("rollout", help="closed-loop episode in a simulation world")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--world-spec", type=Path, required=True)
    p.add_argument("--init-pose", type=str, default=None, help='"x,y,z,qw,qx,qy,qz"; default: seeded spawn')
    p.add_argument("--cond-seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--window", type=int, default=None, help="context window in frames for long runs")
    p.add_argument("--keep", type=int, default=15, help="frames retained on a window slide")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="aggregate collision rate and smoothness over episodes")
    p.add_argument("--episodes", type=Path, required=True, help="directory of episode JSON files")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--csv", type=Path, default=None)

    p = sub.add_parser("world", help="world utilities")
    wsub = p.add_subparsers(dest="world_command", metavar="ACTION")
    c = wsub.add_parser("create", help="write a world spec file")
    c.add_argument("--kind", choices=("terrain", "canyon", "city-blocks"), default="terrain")
    c.add_argument("--size", type=float, default=240.0)
    c.add_argument("--obstacles", type=int, default=24)
    c.add_argument("--out", type=Path, required=True)
    v = wsub.add_parser("preview", help="render an inverse-depth PGM from a pose")
    v.add_argument("--spec", type=Path, required=True)
    v.add_argument("--pose", type=str, required=True, help='"x,y,z,qw,qx,qy,qz"')
    v.add_argument("--out", type=Path, required=True)
    v.add_argument("--width", type=int, default=80)
    v.add_argument("--height", type=int, default=45)
    return parser


def _parse_pose(text: str):
    from .geometry import CameraPose

    parts = [float(x) for x in text.split(",")]
    if len(parts) != 7:
        raise CliValidationError(f"--pose needs 7 comma-separated values, got {len(parts)}")
    return CameraPose(parts[:3], parts[3:])


def _cmd_synth(args) -> int:
    from .synthgen import generate_corpus

    styles = tuple(args.styles.split(",")) if args.styles else None
    manifest = generate_corpus(
        args.out,
        n_worlds=args.worlds,
        clips_per_world=args.clips_per_world,
        styles=styles,
        seed=args.seed,
        duration_s=args.duration,
    )
    (args.out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")
    print(f"worlds={len(manifest['worlds'])} clips={len(manifest['clips'])} failures={manifest['failures']}")
    return 0


def _cmd_filter(args) -> int:
    from .trajpipe import UkfConfig, filter_directory

    if not args.input.is_dir():
        raise CliValidationError(f"--input {args.input} is not a directory")
    cfg = UkfConfig(alpha=args.ukf_alpha, beta=args.ukf_beta, kappa=args.ukf_kappa)
    report = filter_directory(
        args.input, args.output, fps=args.fps, threshold=args.threshold, cfg=cfg
    )
    report_path = args.report or (args.output / "report.json")
    report_path.write_text(json.dumps(report.to_json(), sort_keys=True) + "\n")
    counts = report.to_json()["counts"]
    print(" ".join(f"{k}={v}" for k, v in sorted(counts.items())) or "empty=0")
    return 0


def _cmd_calibrate(args) -> int:
    from .trajpipe import select_threshold

    if not args.labels.exists():
        raise CliValidationError(f"--labels {args.labels} does not exist")
    labeled = []
    with args.labels.open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                labeled.append((float(rec["max_deviation"]), bool(rec["correct"])))
    sel = select_threshold(labeled)
    print(f"threshold={sel.threshold:.6f} tpr={sel.tpr:.4f} fpr={sel.fpr:.4f} j={sel.youden_j:.4f}")
    return 0


def _cmd_dataset(args) -> int:
    if args.dataset_command != "build":
        raise CliValidationError("dataset requires an action (build)")
    from .dataset import build_dataset

    sequences, stats = build_dataset(
        args.clips,
        args.worlds,
        args.output,
        stats_file=args.stats,
        flip_prob=args.flip_prob,
        seed=args.seed,
    )
    print(f"sequences={len(sequences)} frames={sum(len(s) for s in sequences)}")
    return 0


def _cmd_train(args) -> int:
    from .dataset import MotionStats, load_sequences
    from .model import DVGModel, ModelConfig, evaluate_loss, train

    overrides = json.loads(args.config.read_text()) if args.config else {}
    overrides.setdefault("seed", args.seed)
    cfg = ModelConfig(**overrides)
    sequences = load_sequences(args.dataset)
    if not sequences:
        raise CliValidationError(f"{args.dataset} holds no training sequences")
    stats = MotionStats.from_json(json.loads(args.stats.read_text()))
    model = DVGModel(cfg)
    losses = train(
        model,
        sequences,
        stats,
        steps=args.steps,
        batch_size=args.batch_size,
        seed=args.seed,
        progress=lambda step, loss: log.info("step %d loss %.5f", step, loss),
    )
    model.save(args.out, extra={"stats": stats.to_json(), "losses_first_last": [losses[0], losses[-1]]})
    print(f"steps={len(losses)} first_loss={losses[0]:.6f} last_loss={losses[-1]:.6f}")
    return 0


def _cmd_rollout(args) -> int:
    from .dataset import MotionStats
    from .model import DVGModel
    from .rollout import ModelPolicy, run_episode, run_episode_windowed, write_episode
    from .simworld import load_world_spec, spawn_pose

    model, extra = DVGModel.load_with_extra(args.ckpt)
    if "stats" not in extra:
        raise CliValidationError(f"{args.ckpt} carries no motion statistics")
    stats = MotionStats.from_json(extra["stats"])
    world = load_world_spec(args.world_spec)
    if args.init_pose:
        init_pose = _parse_pose(args.init_pose)
    else:
        init_pose = spawn_pose(world, np.random.default_rng(args.seed))
    policy = ModelPolicy(model, stats)
    if args.window is not None or args.duration * 3 > model.cfg.max_frames:
        episode = run_episode_windowed(
            policy,
            world,
            init_pose,
            cond_seed=args.cond_seed,
            duration_s=args.duration,
            window_frames=args.window or model.cfg.max_frames,
            keep_frames=args.keep,
        )
    else:
        episode = run_episode(
            policy, world, init_pose, cond_seed=args.cond_seed, duration_s=args.duration
        )
    write_episode(args.out, episode)
    print(f"terminated_by={episode.terminated_by} frames={episode.completed_frames} slides={episode.window_slides}")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import emit_report, evaluate_episodes
    from .rollout import read_episode

    if not args.episodes.is_dir():
        raise CliValidationError(f"--episodes {args.episodes} is not a directory")
    episodes = [read_episode(p) for p in sorted(args.episodes.glob("*.json"))]
    if not episodes:
        raise CliValidationError(f"no episode files in {args.episodes}")
    report = evaluate_episodes(episodes)
    emit_report(report, json_path=args.out, csv_path=args.csv)
    print(
        f"episodes={report.episodes} collision_rate={report.collision_rate:.4f} "
        f"delta_v={report.delta_v:.2f}% delta_omega={report.delta_omega:.2f}%"
    )
    return 0


def _cmd_world(args) -> int:
    from .simworld import generate_world, load_world_spec, render_depth, write_pgm, write_world_spec

    if args.world_command == "create":
        write_world_spec(args.out, seed=args.seed, kind=args.kind, size=args.size, obstacle_count=args.obstacles)
        print(f"wrote {args.out}")
        return 0
    if args.world_command == "preview":
        world = load_world_spec(args.spec)
        pose = _parse_pose(args.pose)
        dm = render_depth(world, pose, width=args.width, height=args.height)
        write_pgm(args.out, dm)
        print(f"wrote {args.out}")
        return 0
    raise CliValidationError("world requires an action (create or preview)")


_COMMANDS = {
    "synth": _cmd_synth,
    "filter": _cmd_filter,
    "calibrate": _cmd_calibrate,
    "dataset": _cmd_dataset,
    "train": _cmd_train,
    "rollout": _cmd_rollout,
    "eval": _cmd_eval,
    "world": _cmd_world,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DRONECAM_LOG", "WARNING").upper())
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and friends
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help()
        return 1
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except CliValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - unexpected failures
        log.exception("unhandled failure")
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
