"""CLI: the synth-gen/train/evaluate pipeline, flag plumbing, atomic
outputs with manifests, and machine-parsable error exits."""

import json
import subprocess
import sys

import pytest

from salience_lab.cli import apply_override, load_run_config, main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run synth-gen and a 2-epoch train once; several tests inspect it."""
    root = tmp_path_factory.mktemp("pipeline")
    config_path = root / "run.json"
    config_path.write_text(json.dumps({
        "seed": 4,
        "out": str(root / "gen"),
        "encoder": {"d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 12,
                    "max_len": 64},
        "train": {"head": "pooling", "epochs": 2, "batch_size": 4,
                  "learning_rate": 1e-3},
        "synthetic": {"n_docs": 14, "doc_len_min": 24, "doc_len_max": 30,
                      "vocab_size": 20, "min_frequency": 3,
                      "max_first_offset_fraction": 0.1, "negatives_per_doc": 2},
        "split_ratios": [0.6, 0.2, 0.2],
    }))
    assert main(["synth-gen", "--config", str(config_path)]) == 0
    corpus_path = root / "gen" / "corpus.jsonl"
    assert main(["train", "--config", str(config_path),
                 "--corpus", str(corpus_path),
                 "--out", str(root / "trained")]) == 0
    return root, config_path, corpus_path


def test_pipeline_smoke_train_evaluate(pipeline, capsys):
    root, config_path, corpus_path = pipeline
    code = main(["evaluate", "--config", str(config_path),
                 "--corpus", str(corpus_path),
                 "--model", str(root / "trained" / "model"),
                 "--out", str(root / "eval"),
                 "--split", "test", "--k", "1", "--k", "5"])
    assert code == 0
    payload = json.loads((root / "eval" / "metrics.json").read_text())
    assert {"precision", "recall", "f1", "ap", "ece", "bins", "topk"} <= payload.keys()
    assert [t["k"] for t in payload["topk"]] == [1, 5]


def test_rerun_reproduces_reports_byte_identically(pipeline):
    root, config_path, corpus_path = pipeline
    args = ["evaluate", "--config", str(config_path),
            "--corpus", str(corpus_path),
            "--model", str(root / "trained" / "model"),
            "--out", str(root / "rerun"), "--split", "test"]
    assert main(args) == 0
    first = (root / "rerun" / "metrics.json").read_bytes()
    assert main(args) == 0
    assert (root / "rerun" / "metrics.json").read_bytes() == first


def test_manifest_written_with_hashes(pipeline):
    root, _, _ = pipeline
    manifest = json.loads((root / "trained" / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["tool"] == "salience-lab"
    assert any(k.endswith("params.bin") for k in manifest["artifacts"])
    assert all(v.startswith("sha256:") for v in manifest["artifacts"].values())
    assert "train" in manifest["timings_s"]


def test_no_temp_files_left_behind(pipeline):
    root, _, _ = pipeline
    leftovers = [p for p in root.rglob("*.tmp*")]
    assert leftovers == []


def test_score_command_writes_prediction_jsonl(pipeline):
    root, config_path, corpus_path = pipeline
    code = main(["score", "--config", str(config_path),
                 "--corpus", str(corpus_path),
                 "--model", str(root / "trained" / "model"),
                 "--out", str(root / "scored"), "--split", "test"])
    assert code == 0
    lines = (root / "scored" / "predictions.jsonl").read_text().strip().splitlines()
    assert lines
    record = json.loads(lines[0])
    assert {"doc_id", "entity_id", "token_start", "token_end", "score",
            "gold", "head_kind"} <= record.keys()


def test_analyze_command_emits_strata(pipeline):
    root, config_path, corpus_path = pipeline
    code = main(["analyze", "--config", str(config_path),
                 "--corpus", str(corpus_path),
                 "--model", str(root / "trained" / "model"),
                 "--out", str(root / "analysis"), "--split", "test"])
    assert code == 0
    payload = json.loads((root / "analysis" / "analysis.json").read_text())
    assert {"position", "frequency", "seen_unseen"} <= payload.keys()
    csv = (root / "analysis" / "position.csv").read_text()
    assert csv.startswith("bucket,")


def test_speedup_prints_ratio(capsys):
    assert main(["speedup", "--salient", "2.6", "--nonsalient", "17.4"]) == 0
    assert capsys.readouterr().out.strip() == "20.0"


def test_config_error_exit_code_1(tmp_path, capsys):
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    code = main(["synth-gen", "--config", str(bad)])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error: code=1 kind=config")
    assert "\n" not in err.strip()


def test_data_error_exit_code_2(tmp_path, capsys):
    code = main(["train", "--corpus", str(tmp_path / "missing.jsonl"),
                 "--out", str(tmp_path / "out")])
    assert code == 2
    assert capsys.readouterr().err.startswith("error: code=2 kind=data")


def test_flag_overrides_config_file(tmp_path):
    config_path = tmp_path / "c.json"
    config_path.write_text(json.dumps({"train": {"epochs": 50}}))

    class Args:
        config = str(config_path)
        epochs = 3
        corpus = None
        out = None
        seed = None

    resolved = load_run_config(Args())
    assert resolved["train"]["epochs"] == 3


def test_apply_override_dotted_keys():
    config = {"train": {"epochs": 1}, "seed": 0}
    apply_override(config, "train.epochs", 9)
    apply_override(config, "seed", 5)
    assert config == {"train": {"epochs": 9}, "seed": 5}


def test_apply_override_unknown_section():
    from salience_lab.cli import ConfigError
    with pytest.raises(ConfigError):
        apply_override({"train": {}}, "nosuch.key", 1)


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "salience_lab.cli",
                           "speedup", "--salient", "3.0", "--nonsalient", "9.4"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.strip() == "12.4"


def test_distill_and_calibrate_commands(pipeline):
    root, config_path, corpus_path = pipeline
    teacher = str(root / "trained" / "model")
    code = main(["distill", "--config", str(config_path),
                 "--corpus", str(corpus_path), "--teacher", teacher,
                 "--t-teacher", "1.0", "--t-student", "1.0",
                 "--epochs", "1", "--out", str(root / "distilled")])
    assert code == 0
    assert (root / "distilled" / "student" / "params.bin").exists()
    transfer_lines = (root / "distilled" / "transfer.jsonl").read_text().splitlines()
    assert all("teacher_score" in line for line in transfer_lines)

    code = main(["calibrate", "--config", str(config_path),
                 "--corpus", str(corpus_path), "--teacher", teacher,
                 "--t-teacher", "0.5", "--t-student", "1.0",
                 "--out", str(root / "calibrated")])
    assert code == 0
    points = json.loads((root / "calibrated" / "calibration.json").read_text())
    assert points[0]["t_teacher"] == 0.5
    csv = (root / "calibrated" / "calibration.csv").read_text()
    assert csv.startswith("t_teacher,t_student,ece,ap")
