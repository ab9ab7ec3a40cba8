"""Command-line wiring: happy paths and exit codes."""
from __future__ import annotations

import json

from click.testing import CliRunner
from conftest import build_workspace, write_codebook, write_split_file

from roadbaseline.cli import main


def _workspace(tmp_path):
    rows = [
        (f"c{i:02d}", f"s{i // 2:02d}", str(1 + i % 2), str(1 + i % 3))
        for i in range(8)
    ]
    build_workspace(tmp_path, rows)
    write_codebook(tmp_path / "codebook.json")
    write_split_file(
        tmp_path / "split.json",
        train=[r[0] for r in rows[:4]],
        validation=[r[0] for r in rows[4:6]],
        test=[r[0] for r in rows[6:]],
    )
    return tmp_path


def _train_args(root, **extra):
    args = [
        "train",
        "--manifest", str(root / "manifest.csv"),
        "--split", str(root / "split.json"),
        "--codebook", str(root / "codebook.json"),
        "--image-root", str(root),
        "--epochs", "2",
        "--input-size", "32",
        "--out-dir", str(root / "run"),
    ]
    for key, value in extra.items():
        args += [f"--{key.replace('_', '-')}", str(value)]
    return args


def test_train_writes_checkpoint_and_log(tmp_path):
    root = _workspace(tmp_path)
    result = CliRunner().invoke(main, _train_args(root))
    assert result.exit_code == 0, result.output
    assert "trained 2 heads for 2 epochs" in result.output
    assert (root / "run" / "checkpoint.pt").is_file()
    assert (root / "run" / "training_log.jsonl").is_file()


def test_train_missing_manifest_exits_2(tmp_path):
    root = _workspace(tmp_path)
    (root / "manifest.csv").unlink()
    result = CliRunner().invoke(main, _train_args(root))
    assert result.exit_code == 2
    assert "error:" in result.output


def test_predict_subset_writes_export(tmp_path):
    root = _workspace(tmp_path)
    runner = CliRunner()
    assert runner.invoke(main, _train_args(root)).exit_code == 0
    out = root / "test_predictions.jsonl"
    result = runner.invoke(
        main,
        [
            "predict",
            "--checkpoint", str(root / "run" / "checkpoint.pt"),
            "--manifest", str(root / "manifest.csv"),
            "--codebook", str(root / "codebook.json"),
            "--image-root", str(root),
            "--split", str(root / "split.json"),
            "--subset", "test",
            "--out", str(out),
        ],
    )
    assert result.exit_code == 0, result.output
    assert "predicted 2 images with VGG16-like" in result.output
    lines = [json.loads(line) for line in out.read_text().splitlines()]
    assert "run_manifest" in lines[0]
    assert [line["image_id"] for line in lines[1:]] == ["c06", "c07"]


def test_predict_wrong_codebook_exits_2(tmp_path):
    root = _workspace(tmp_path)
    runner = CliRunner()
    assert runner.invoke(main, _train_args(root)).exit_code == 0
    write_codebook(root / "other.json", version="fixture-9")
    result = runner.invoke(
        main,
        [
            "predict",
            "--checkpoint", str(root / "run" / "checkpoint.pt"),
            "--manifest", str(root / "manifest.csv"),
            "--codebook", str(root / "other.json"),
            "--image-root", str(root),
        ],
    )
    assert result.exit_code == 2
    assert "fixture-9" in result.output
