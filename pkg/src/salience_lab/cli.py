"""Command-line front end for the salience pipeline.

Each command fronts one module's top operation. Outputs are written
atomically and every run emits a manifest (config snapshot, artifact hashes,
timings) sufficient to reproduce the reports byte-identically; timestamps
live only in the manifest.

Exit codes: 1 config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .analysis import (seen_unseen, strata_to_csv, stratify_by_frequency,
                       stratify_by_position, sweep_to_csv, temperature_sweep)
from .corpus import (Corpus, DataError, SalientRule, Split, SyntheticConfig,
                     load_corpus, save_corpus, split_corpus, synth_generate)
from .distill import (DistillConfig, TeacherEnsemble, build_transfer_set,
                      distill_train)
from .encoder import EncoderConfig
from .heads import (HeadKind, ReweightConfig, SalienceModel, TrainConfig,
                    predict_records, train)
from .metrics import build_report, speedup_estimate
from .tensor_engine import NumericalError


class ConfigError(ValueError):
    """The run configuration is unusable."""


HEAD_NAMES = {k.value: k for k in HeadKind}

DEFAULT_CONFIG = {
    "seed": 0,
    "corpus": None,
    "out": "run",
    "encoder": {"d_model": 32, "n_layers": 1, "n_heads": 4, "d_ff": 64,
                "max_len": 176, "dropout_rate": 0.2},
    "train": {"head": "pooling", "epochs": 20, "batch_size": 8,
              "learning_rate": 1e-3, "non_overlapping": False,
              "target_valid_ap": None, "weight_decay": 0.01, "alpha": 0.01},
    "distill": {"t_teacher": 1.0, "t_student": 1.0, "epochs": 12,
                "batch_size": 8, "learning_rate": 3e-4, "teachers": []},
    "metrics": {"threshold": 0.5, "bins": 10, "k": [1, 5],
                "aggregation": "first", "split": "test"},
    "synthetic": {"n_docs": 280, "doc_len_min": 88, "doc_len_max": 104,
                  "vocab_size": 40, "min_frequency": 3,
                  "max_first_offset_fraction": 0.1, "negatives_per_doc": 6},
    "split_ratios": [0.7142857142857143, 0.10714285714285714, 0.17857142857142858],
}


def worker_cap() -> int:
    raw = os.environ.get("SALIENCE_LAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"SALIENCE_LAB_THREADS={raw!r} is not an integer")


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def apply_override(config: dict, dotted_key: str, value) -> None:
    """Set a nested config entry addressed by a flat dotted key."""
    parts = dotted_key.split(".")
    node = config
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config section '{part}' in '{dotted_key}'")
        node = node[part]
    node[parts[-1]] = value


def load_run_config(args: argparse.Namespace) -> dict:
    config = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}")
        config = _deep_merge(config, user)
    overrides = {
        "corpus": ("corpus",), "out": ("out",), "seed": ("seed",),
        "head": ("train.head",),
        "epochs": ("train.epochs", "distill.epochs"),
        "threshold": ("metrics.threshold",), "bins": ("metrics.bins",),
        "split": ("metrics.split",), "aggregation": ("metrics.aggregation",),
        "t_teacher": ("distill.t_teacher",), "t_student": ("distill.t_student",),
    }
    for attr, dotted_keys in overrides.items():
        value = getattr(args, attr, None)
        if value is not None:
            for dotted in dotted_keys:
                apply_override(config, dotted, value)
    if getattr(args, "k", None):
        apply_override(config, "metrics.k", list(args.k))
    if getattr(args, "teacher", None):
        apply_override(config, "distill.teachers", list(args.teacher))
    return config


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return "sha256:" + digest.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict,
                   artifacts: list[Path], timings: dict[str, float]) -> None:
    manifest = {
        "tool": "salience-lab",
        "version": __version__,
        "command": command,
        "config": config,
        "artifacts": {str(p.relative_to(out_dir)): _sha256(p)
                      for p in artifacts if p.exists()},
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    atomic_write(out_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n")


def _require_corpus(config: dict) -> Corpus:
    path = config.get("corpus")
    if not path:
        raise ConfigError("no corpus path given (use --corpus or the config file)")
    if not Path(path).exists():
        raise DataError(f"corpus file not found: {path}")
    return load_corpus(path)


def _encoder_config(config: dict, vocab_size: int) -> EncoderConfig:
    enc = config["encoder"]
    return EncoderConfig(vocab_size=vocab_size, d_model=enc["d_model"],
                         n_layers=enc["n_layers"], n_heads=enc["n_heads"],
                         d_ff=enc["d_ff"], max_len=enc["max_len"],
                         dropout_rate=enc.get("dropout_rate", 0.0),
                         seed=config["seed"])


def _head_kind(name: str) -> HeadKind:
    if name not in HEAD_NAMES:
        raise ConfigError(f"unknown head '{name}'; choose from "
                          f"{sorted(HEAD_NAMES)}")
    return HEAD_NAMES[name]


def _split(name: str) -> Split | None:
    if name in (None, "", "all"):
        return None
    try:
        return Split(name)
    except ValueError:
        raise ConfigError(f"unknown split '{name}'")


def _load_teachers(paths: list[str]) -> TeacherEnsemble:
    if not paths:
        raise ConfigError("distillation needs at least one --teacher model dir")
    members = []
    for p in paths:
        if not Path(p).exists():
            raise DataError(f"teacher model dir not found: {p}")
        members.append(SalienceModel.load(p))
    return TeacherEnsemble(members=members)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth_gen(args) -> int:
    config = load_run_config(args)
    out_dir = Path(config["out"])
    syn = config["synthetic"]
    t0 = time.perf_counter()
    synthetic = SyntheticConfig(
        n_docs=syn["n_docs"],
        doc_len_range=(syn["doc_len_min"], syn["doc_len_max"]),
        vocab_size=syn["vocab_size"],
        salient_rule=SalientRule(min_frequency=syn["min_frequency"],
                                 max_first_offset_fraction=syn["max_first_offset_fraction"]),
        negatives_per_doc=syn["negatives_per_doc"],
        seed=config["seed"])
    corpus = synth_generate(synthetic)
    corpus = split_corpus(corpus, tuple(config["split_ratios"]), config["seed"])
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus_path = out_dir / "corpus.jsonl"
    tmp = corpus_path.with_name(corpus_path.name + f".tmp{os.getpid()}")
    save_corpus(corpus, tmp)
    os.replace(tmp, corpus_path)
    write_manifest(out_dir, "synth-gen", config, [corpus_path],
                   {"generate": time.perf_counter() - t0})
    print(f"wrote {corpus_path} ({len(corpus)} documents)")
    return 0


def cmd_train(args) -> int:
    config = load_run_config(args)
    out_dir = Path(config["out"])
    corpus = _require_corpus(config)
    tr = config["train"]
    t0 = time.perf_counter()
    train_config = TrainConfig(
        epochs=tr["epochs"], batch_size=tr["batch_size"],
        learning_rate=tr["learning_rate"], seed=config["seed"],
        head_kind=_head_kind(tr["head"]),
        reweight=ReweightConfig(alpha=tr.get("alpha", 0.01)),
        non_overlapping=tr.get("non_overlapping", False),
        target_valid_ap=tr.get("target_valid_ap"),
        weight_decay=tr.get("weight_decay", 0.01))
    encoder_config = _encoder_config(config, len(corpus.tokenizer.vocab))
    result = train(corpus, encoder_config, train_config,
                   corpus_name=str(config.get("corpus")))
    elapsed = time.perf_counter() - t0
    model_dir = out_dir / "model"
    result.model.save(model_dir)
    history = [{"epoch": h.epoch, "train_loss": h.train_loss,
                "valid_ap": h.valid_ap} for h in result.history]
    atomic_write(out_dir / "history.json", json.dumps(history, indent=2) + "\n")
    write_manifest(out_dir, "train", config,
                   [model_dir / "params.bin", model_dir / "model.json",
                    out_dir / "history.json"],
                   {"train": elapsed})
    final = history[-1]
    print(f"trained {tr['head']} for {final['epoch']} epochs; "
          f"valid AP {final['valid_ap']}")
    return 0


def cmd_evaluate(args) -> int:
    config = load_run_config(args)
    out_dir = Path(config["out"])
    corpus = _require_corpus(config)
    model = SalienceModel.load(args.model)
    met = config["metrics"]
    t0 = time.perf_counter()
    records = predict_records(model, corpus, split=_split(met["split"]),
                              aggregation=met["aggregation"])
    report, calibration, topk_reports = build_report(
        records, threshold=met["threshold"], bins=met["bins"], ks=met["k"])
    payload = {
        "head_kind": model.head_kind.value,
        "split": met["split"],
        **report.to_dict(),
        "ece": calibration.ece,
        "bins": calibration.to_dict(),
        "topk": [t.to_dict() for t in topk_reports],
        "n_records": len(records),
    }
    atomic_write(out_dir / "metrics.json", json.dumps(payload, indent=2) + "\n")
    write_manifest(out_dir, "evaluate", config, [out_dir / "metrics.json"],
                   {"evaluate": time.perf_counter() - t0})
    print(json.dumps({k: payload[k] for k in
                      ("precision", "recall", "f1", "ap", "ece")}))
    return 0


def cmd_score(args) -> int:
    config = load_run_config(args)
    out_dir = Path(config["out"])
    corpus = _require_corpus(config)
    model = SalienceModel.load(args.model)
    met = config["metrics"]
    t0 = time.perf_counter()
    records = predict_records(model, corpus, split=_split(met["split"]),
                              aggregation=met["aggregation"])
    lines = []
    for r in records:
        for span, score in r.mention_scores:
            lines.append(json.dumps({
                "doc_id": r.doc_id, "entity_id": r.entity_id,
                "token_start": span.token_start, "token_end": span.token_end,
                "score": score, "gold": r.gold,
                "head_kind": model.head_kind.value}))
    atomic_write(out_dir / "predictions.jsonl", "\n".join(lines) + "\n")
    write_manifest(out_dir, "score", config, [out_dir / "predictions.jsonl"],
                   {"score": time.perf_counter() - t0})
    print(f"wrote {out_dir / 'predictions.jsonl'} ({len(lines)} mentions)")
    return 0


def cmd_distill(args) -> int:
    config = load_run_config(args)
    out_dir = Path(config["out"])
    corpus = _require_corpus(config)
    di = config["distill"]
    ensemble = _load_teachers(di["teachers"])
    t0 = time.perf_counter()
    transfer = build_transfer_set(corpus, ensemble, di["t_teacher"],
                                  workers=worker_cap())
    t_transfer = time.perf_counter() - t0
    transfer_path = out_dir / "transfer.jsonl"
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = transfer_path.with_name(transfer_path.name + f".tmp{os.getpid()}")
    transfer.save(tmp)
    os.replace(tmp, transfer_path)
    distill_config = DistillConfig(
        t_teacher=di["t_teacher"], t_student=di["t_student"],
        epochs=di["epochs"], batch_size=di["batch_size"],
        learning_rate=di["learning_rate"], seed=config["seed"])
    encoder_config = _encoder_config(config, len(corpus.tokenizer.vocab))
    t1 = time.perf_counter()
    student, history = distill_train(encoder_config, HeadKind.POOLING,
                                     transfer, corpus, distill_config,
                                     corpus_name=str(config.get("corpus")))
    t_train = time.perf_counter() - t1
    student_dir = out_dir / "student"
    student.save(student_dir)
    payload = [{"epoch": h.epoch, "train_loss": h.train_loss} for h in history]
    atomic_write(out_dir / "history.json", json.dumps(payload, indent=2) + "\n")
    write_manifest(out_dir, "distill", config,
                   [transfer_path, student_dir / "params.bin",
                    student_dir / "model.json", out_dir / "history.json"],
                   {"transfer_set": t_transfer, "distill": t_train})
    print(f"distilled student into {student_dir} "
          f"(final loss {payload[-1]['train_loss']:.4f})")
    return 0


def cmd_calibrate(args) -> int:
    config = load_run_config(args)
    out_dir = Path(config["out"])
    corpus = _require_corpus(config)
    di = config["distill"]
    ensemble = _load_teachers(di["teachers"])
    teacher_temps = args.t_teacher or [di["t_teacher"]]
    student_temps = args.t_student or [di["t_student"]]
    if len(teacher_temps) != len(student_temps):
        raise ConfigError("--t-teacher and --t-student must be given in pairs")
    pairs = list(zip(teacher_temps, student_temps))
    encoder_config = _encoder_config(config, len(corpus.tokenizer.vocab))
    base = DistillConfig(epochs=di["epochs"], batch_size=di["batch_size"],
                         learning_rate=di["learning_rate"], seed=config["seed"])
    t0 = time.perf_counter()
    points = temperature_sweep(ensemble, encoder_config, pairs, corpus,
                               base_config=base, bins=config["metrics"]["bins"])
    atomic_write(out_dir / "calibration.json",
                 json.dumps([p.to_dict() for p in points], indent=2) + "\n")
    atomic_write(out_dir / "calibration.csv", sweep_to_csv(points))
    write_manifest(out_dir, "calibrate", config,
                   [out_dir / "calibration.json", out_dir / "calibration.csv"],
                   {"sweep": time.perf_counter() - t0})
    for p in points:
        print(f"T_teacher={p.t_teacher} T_student={p.t_student} "
              f"ece={p.ece:.4f} ap={p.ap}")
    return 0


def cmd_analyze(args) -> int:
    config = load_run_config(args)
    out_dir = Path(config["out"])
    corpus = _require_corpus(config)
    model = SalienceModel.load(args.model)
    met = config["metrics"]
    t0 = time.perf_counter()
    records = predict_records(model, corpus, split=_split(met["split"]),
                              aggregation=met["aggregation"])
    position = stratify_by_position(records, corpus)
    frequency = stratify_by_frequency(records, corpus)
    seen, unseen = seen_unseen(records, corpus)
    payload = {
        "split": met["split"],
        "position": [s.to_dict() for s in position],
        "frequency": [s.to_dict() for s in frequency],
        "seen_unseen": [seen.to_dict(), unseen.to_dict()],
    }
    atomic_write(out_dir / "analysis.json", json.dumps(payload, indent=2) + "\n")
    atomic_write(out_dir / "position.csv", strata_to_csv(position))
    atomic_write(out_dir / "frequency.csv", strata_to_csv(frequency))
    atomic_write(out_dir / "seen_unseen.csv", strata_to_csv([seen, unseen]))
    write_manifest(out_dir, "analyze", config,
                   [out_dir / "analysis.json", out_dir / "position.csv",
                    out_dir / "frequency.csv", out_dir / "seen_unseen.csv"],
                   {"analyze": time.perf_counter() - t0})
    print(f"wrote {out_dir / 'analysis.json'}")
    return 0


def cmd_speedup(args) -> int:
    ratio = speedup_estimate(args.salient, args.nonsalient)
    print(ratio)
    if args.out:
        out_dir = Path(args.out)
        payload = {"salient_per_doc": args.salient,
                   "nonsalient_per_doc": args.nonsalient, "speedup": ratio}
        atomic_write(out_dir / "speedup.json", json.dumps(payload, indent=2) + "\n")
        write_manifest(out_dir, "speedup", payload, [out_dir / "speedup.json"], {})
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override it")
    p.add_argument("--corpus", help="corpus JSONL path")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="salience-lab",
        description="entity salience training, distillation and evaluation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic corpus")
    _add_common(p)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train a salience model")
    _add_common(p)
    p.add_argument("--head", choices=sorted(HEAD_NAMES))
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics report for a trained model")
    _add_common(p)
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--split", choices=["train", "valid", "test", "all"])
    p.add_argument("--threshold", type=float)
    p.add_argument("--bins", type=int)
    p.add_argument("--k", type=int, action="append")
    p.add_argument("--aggregation", choices=["first", "last", "average", "median"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("score", help="write per-mention prediction JSONL")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=["train", "valid", "test", "all"])
    p.add_argument("--aggregation", choices=["first", "last", "average", "median"])
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("distill", help="distill a student from teacher models")
    _add_common(p)
    p.add_argument("--teacher", action="append", help="teacher model dir (repeat)")
    p.add_argument("--t-teacher", dest="t_teacher", type=float)
    p.add_argument("--t-student", dest="t_student", type=float)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("calibrate", help="temperature sweep over distillations")
    _add_common(p)
    p.add_argument("--teacher", action="append")
    p.add_argument("--t-teacher", dest="t_teacher", type=float, action="append")
    p.add_argument("--t-student", dest="t_student", type=float, action="append")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("analyze", help="stratified evaluation reports")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=["train", "valid", "test", "all"])
    p.add_argument("--aggregation", choices=["first", "last", "average", "median"])
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("speedup", help="pooling-vs-standard speedup estimate")
    p.add_argument("--salient", type=float, required=True)
    p.add_argument("--nonsalient", type=float, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_speedup)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: code=1 kind=config message={exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"error: code=2 kind=data message={exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: code=3 kind=numerical message={exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
