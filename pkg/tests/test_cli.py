import json

import numpy as np
import pytest

from dronecam.cli import main


def test_help_lists_subcommands(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for name in ("synth", "filter", "calibrate", "dataset", "train", "rollout", "eval", "world"):
        assert name in out


def test_missing_required_flag_exits_1(capsys):
    assert main(["filter", "--output", "/tmp/x"]) == 1
    err = capsys.readouterr().err
    assert "--input" in err


def test_unknown_subcommand_exits_1(capsys):
    assert main(["frobnicate"]) == 1


def test_no_command_prints_help(capsys):
    assert main([]) == 1


def test_calibrate_prints_selection(tmp_path, capsys):
    labels = tmp_path / "labels.jsonl"
    rows = [
        {"max_deviation": 0.05, "correct": True},
        {"max_deviation": 0.10, "correct": True},
        {"max_deviation": 0.50, "correct": False},
        {"max_deviation": 0.90, "correct": False},
    ]
    labels.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    assert main(["calibrate", "--labels", str(labels)]) == 0
    out = capsys.readouterr().out
    assert "threshold=0.300000" in out
    assert "tpr=1.0000" in out and "fpr=0.0000" in out


def test_calibrate_missing_file(tmp_path, capsys):
    assert main(["calibrate", "--labels", str(tmp_path / "nope.jsonl")]) == 1


def test_world_create_and_preview(tmp_path, capsys):
    spec = tmp_path / "w.json"
    assert main(["--seed", "3", "world", "create", "--kind", "terrain", "--out", str(spec)]) == 0
    data = json.loads(spec.read_text())
    assert data["seed"] == 3 and data["kind"] == "terrain"
    pgm = tmp_path / "d.pgm"
    code = main(
        ["world", "preview", "--spec", str(spec), "--pose", "0,0,40,1,0,0,0", "--out", str(pgm),
         "--width", "18", "--height", "10"]
    )
    assert code == 0
    assert pgm.read_bytes().startswith(b"P5 18 10 255\n")


def test_world_preview_bad_pose(tmp_path, capsys):
    spec = tmp_path / "w.json"
    main(["world", "create", "--out", str(spec)])
    assert main(["world", "preview", "--spec", str(spec), "--pose", "1,2,3", "--out", str(tmp_path / "x.pgm")]) == 1


@pytest.mark.slow
def test_end_to_end_pipeline(tmp_path, capsys):
    """synth -> filter -> dataset -> train -> rollout -> eval on tiny settings."""
    synth = tmp_path / "synth"
    assert main(["--seed", "2", "synth", "--worlds", "2", "--clips-per-world", "2",
                 "--out", str(synth), "--duration", "4"]) == 0

    accepted = tmp_path / "accepted"
    assert main(["filter", "--input", str(synth / "clips"), "--output", str(accepted)]) == 0
    report = json.loads((accepted / "report.json").read_text())
    assert report["counts"].get("accepted", 0) >= 3

    data = tmp_path / "train.jsonl"
    assert main(["--seed", "1", "dataset", "build", "--clips", str(accepted),
                 "--worlds", str(synth / "worlds"), "--output", str(data)]) == 0

    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "layers": 1, "heads": 2, "hidden_dim": 16, "feature_dim": 32,
        "depth_conv_channels": [3, 4],
    }))
    ckpt = tmp_path / "model.ckpt"
    assert main(["--seed", "4", "train", "--dataset", str(data),
                 "--stats", str(data.with_suffix(".stats.json")),
                 "--config", str(config), "--steps", "3", "--out", str(ckpt)]) == 0

    episodes = tmp_path / "episodes"
    episodes.mkdir()
    world_spec = synth / "worlds" / "w000.json"
    for cond in (0, 1):
        code = main(["--seed", "6", "rollout", "--ckpt", str(ckpt), "--world-spec", str(world_spec),
                     "--cond-seed", str(cond), "--duration", "2",
                     "--out", str(episodes / f"ep{cond}.json")])
        assert code == 0

    out = tmp_path / "report.json"
    csv_out = tmp_path / "report.csv"
    assert main(["eval", "--episodes", str(episodes), "--out", str(out), "--csv", str(csv_out)]) == 0
    report = json.loads(out.read_text())
    assert report["episodes"] == 2
    assert csv_out.exists()
