"""Tests for the camox command line."""

import json

import pandas as pd
import pytest

from camox.cli import EXIT_NOT_TRAINED, main
from camox.ingest import write_frames
from camox.models import Hand, PredictionRow, PredictionSet
from camox.pipeline import dataset_hash, file_sha256, write_predictions
from conftest import make_frames, small_study_spec

FAST_TRAIN = {"epochs": 1, "conv_channels": [2, 2, 2], "hidden": 4, "lr": 1e-3}


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(small_study_spec(seed=1, n_subjects=4).model_dump(mode="json")))
    return path


@pytest.fixture
def train_config_file(tmp_path):
    path = tmp_path / "train.json"
    path.write_text(json.dumps(FAST_TRAIN))
    return path


# --- synth -------------------------------------------------------------------

def test_synth_writes_dataset_and_manifest(tmp_path, spec_file, capsys):
    out = tmp_path / "data"
    assert main(["synth", "--spec", str(spec_file), "--out", str(out)]) == 0

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["dataset_hash"] == dataset_hash(out)
    for artifact in manifest["artifacts"]:
        assert file_sha256(artifact["path"]) == artifact["sha256"]
    printed = capsys.readouterr().out
    assert "Label histogram" in printed and "90-100" in printed


def test_synth_same_seed_same_hash(tmp_path, spec_file):
    main(["synth", "--spec", str(spec_file), "--out", str(tmp_path / "a"), "--seed", "4"])
    main(["synth", "--spec", str(spec_file), "--out", str(tmp_path / "b"), "--seed", "4"])

    hashes = [json.loads((tmp_path / d / "manifest.json").read_text())["dataset_hash"] for d in "ab"]
    assert hashes[0] == hashes[1]


def test_synth_invalid_spec_exits_2(tmp_path):
    spec = tmp_path / "bad.json"
    spec.write_text(json.dumps({"protocol": {"floor_spo2": 99, "start_spo2": 98}}))
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "data")]) == 2


# --- extract -----------------------------------------------------------------

def test_extract_writes_one_row_per_frame(tmp_path):
    frames_path = tmp_path / "frames.bin"
    write_frames(make_frames(90), frames_path)
    out = tmp_path / "ppg.csv"

    assert main(["extract", str(frames_path), "--out", str(out), "--subject", "3", "--hand", "right"]) == 0

    df = pd.read_csv(out)
    assert len(df) == 90
    assert list(df.columns) == ["frame_idx", "t_sec", "r_mean", "g_mean", "b_mean"]


def test_extract_truncated_file_exits_2(tmp_path, capsys):
    frames_path = tmp_path / "frames.bin"
    write_frames(make_frames(3), frames_path)
    frames_path.write_bytes(frames_path.read_bytes()[:-1])

    assert main(["extract", str(frames_path)]) == 2
    assert "expected 432 bytes, got 431" in capsys.readouterr().err


# --- train / ablate ----------------------------------------------------------

@pytest.fixture
def synth_dir(tmp_path, spec_file):
    out = tmp_path / "data"
    assert main(["synth", "--spec", str(spec_file), "--out", str(out)]) == 0
    return out


def test_train_writes_predictions_checkpoints_and_manifest(tmp_path, synth_dir, train_config_file):
    run = tmp_path / "run"
    code = main(["train", str(synth_dir), "--config", str(train_config_file), "--out", str(run)])

    assert code == 0
    predictions = pd.read_csv(run / "predictions.csv", dtype={"subject_id": str})
    assert sorted(predictions["subject_id"].unique()) == ["1", "2", "3", "4"]
    assert len(list((run / "checkpoints").glob("split_*.camoxnn"))) == 4

    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["dataset_hash"] == dataset_hash(synth_dir)
    assert manifest["config"]["epochs"] == 1
    paths = {a["path"] for a in manifest["artifacts"]}
    assert str(run / "predictions.csv") in paths
    for artifact in manifest["artifacts"]:
        assert file_sha256(artifact["path"]) == artifact["sha256"]


def test_train_with_excluded_subject(tmp_path, synth_dir, train_config_file):
    run = tmp_path / "run"
    assert main(["train", str(synth_dir), "--config", str(train_config_file), "--out", str(run),
                 "--exclude-subject", "4"]) == 0
    predictions = pd.read_csv(run / "predictions.csv", dtype={"subject_id": str})
    assert sorted(predictions["subject_id"].unique()) == ["1", "2", "3"]


def test_train_with_floors_writes_ablation(tmp_path, synth_dir, train_config_file, capsys):
    run = tmp_path / "run"
    assert main(["train", str(synth_dir), "--config", str(train_config_file), "--out", str(run),
                 "--floors", "70,75,80"]) == 0

    assert len(pd.read_csv(run / "ablation.csv")) == 3
    assert "Spearman" in capsys.readouterr().out


def test_seeded_train_runs_are_byte_identical(tmp_path, synth_dir, train_config_file):
    runs = [tmp_path / "run_a", tmp_path / "run_b"]
    for run in runs:
        assert main(["train", str(synth_dir), "--config", str(train_config_file), "--out", str(run),
                     "--seed", "5"]) == 0
        assert main(["report", str(run / "predictions.csv"), "--out", str(run / "report")]) == 0

    first, second = runs
    names = ["predictions.csv", "report/report.json"]
    names += [f"checkpoints/{p.name}" for p in sorted((first / "checkpoints").glob("*.camoxnn"))]
    assert len(names) == 6
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_zero_epochs_signals_no_training(tmp_path, synth_dir, train_config_file):
    run = tmp_path / "run"
    code = main(["train", str(synth_dir), "--config", str(train_config_file), "--out", str(run),
                 "--epochs", "0"])
    assert code == EXIT_NOT_TRAINED
    assert (run / "predictions.csv").exists()


def test_train_on_missing_dataset_exits_3(tmp_path, train_config_file):
    assert main(["train", str(tmp_path / "missing"), "--config", str(train_config_file),
                 "--out", str(tmp_path / "run")]) == 3


def test_train_invalid_config_exits_2(tmp_path, synth_dir):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"lr": -1}))
    assert main(["train", str(synth_dir), "--config", str(config), "--out", str(tmp_path / "run")]) == 2


# --- report / summary --------------------------------------------------------

def _perfect_predictions(path):
    rows = [
        PredictionRow(split_id=i % 3, subject_id=str(1 + i % 3), hand=Hand.LEFT, t_sec=float(i),
                      ground_truth=g, prediction=g)
        for i, g in enumerate([72.0, 81.0, 84.0, 88.0, 91.0, 93.0, 96.0, 98.0, 86.0])
    ]
    write_predictions(PredictionSet(rows=rows), path)


def test_report_on_perfect_predictions(tmp_path, capsys):
    predictions = tmp_path / "predictions.csv"
    _perfect_predictions(predictions)

    assert main(["report", str(predictions), "--out", str(tmp_path / "report")]) == 0

    printed = capsys.readouterr().out
    assert "MAE (mean over 3 subjects): 0.00%" in printed
    assert "AUC 1.00" in printed
    report = json.loads((tmp_path / "report" / "report.json").read_text())
    assert report["schema_version"] == 1
    assert report["mae"] == 0.0


def test_report_with_thresholds_and_boundary(tmp_path, capsys):
    predictions = tmp_path / "predictions.csv"
    _perfect_predictions(predictions)

    assert main(["report", str(predictions), "--thresholds", "90", "--boundary", "88",
                 "--out", str(tmp_path / "report")]) == 0
    report = json.loads((tmp_path / "report" / "report.json").read_text())
    assert [c["threshold"] for c in report["classification"]] == [90.0]
    assert report["classification"][0]["at_boundary"]["decision_boundary"] == 88.0
    assert "at boundary 88%" in capsys.readouterr().out


def test_report_missing_file_exits_3(tmp_path):
    assert main(["report", str(tmp_path / "nope.csv")]) == 3


def test_summary_prints_histogram(synth_dir, capsys):
    assert main(["summary", str(synth_dir)]) == 0
    printed = capsys.readouterr().out
    assert "65-80" in printed and "callus" in printed


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2
