"""Stratified evaluation and the teacher-temperature calibration sweep.

Stratifiers partition prediction records exhaustively (bucket counts always
sum to the record total) and never touch scores or gold labels.
"""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import Corpus, Split, TokenizerSpec, split_words
from .distill import (DistillConfig, SoftLabelSet, TeacherEnsemble,
                      build_transfer_set, distill_train)
from .encoder import EncoderConfig
from .heads import HeadKind, SalienceModel, predict_records
from .metrics import (MetricsReport, PredictionRecord, average_precision,
                      build_report, ece)

POSITION_EDGES = (1, 2, 5, 10, 20, 50, 100)      # percent of tokens
FREQUENCY_EDGES = (1, 2, 5, 10, None)            # None = unbounded


@dataclass
class StratumReport:
    bucket: str
    ap: float | None
    positive_rate: float
    n: int
    flagged: bool = False

    def to_dict(self) -> dict:
        return {"bucket": self.bucket, "ap": self.ap,
                "positive_rate": self.positive_rate, "n": self.n,
                "flagged": self.flagged}


@dataclass
class SweepPoint:
    t_teacher: float
    t_student: float
    ece: float
    ap: float | None

    def to_dict(self) -> dict:
        return {"t_teacher": self.t_teacher, "t_student": self.t_student,
                "ece": self.ece, "ap": self.ap}


def _doc_index(corpus: Corpus) -> dict:
    return {doc.doc_id: doc for doc in corpus.documents}


def _stratum(bucket: str, records: list[PredictionRecord]) -> StratumReport:
    n = len(records)
    positives = sum(r.gold == 1 for r in records)
    if positives >= 1 and n > 0:
        return StratumReport(bucket=bucket, ap=average_precision(records),
                             positive_rate=positives / n, n=n)
    return StratumReport(bucket=bucket, ap=None,
                         positive_rate=positives / n if n else 0.0,
                         n=n, flagged=True)


def stratify_by_position(records: list[PredictionRecord], corpus: Corpus,
                         edges: tuple[int, ...] = POSITION_EDGES
                         ) -> list[StratumReport]:
    """Bucket by the relative offset of the first mention's first token.

    A record lands in the smallest edge that is >= its offset percentage;
    offsets use post-preprocessing token positions.
    """
    docs = _doc_index(corpus)
    buckets: dict[int, list[PredictionRecord]] = {e: [] for e in edges}
    for r in records:
        doc = docs[r.doc_id]
        first = doc.mentions_of(r.entity_id)[0].token_start
        percent = 100.0 * first / len(doc.tokens)
        for e in edges:
            if percent <= e:
                buckets[e].append(r)
                break
    return [_stratum(str(e), buckets[e]) for e in edges]


def stratify_by_frequency(records: list[PredictionRecord], corpus: Corpus,
                          edges: tuple = FREQUENCY_EDGES) -> list[StratumReport]:
    """Bucket by the number of annotated mention spans of the entity."""
    docs = _doc_index(corpus)
    buckets: dict[int, list[PredictionRecord]] = {i: [] for i in range(len(edges))}
    for r in records:
        doc = docs[r.doc_id]
        frequency = len(doc.mentions_of(r.entity_id))
        for i, e in enumerate(edges):
            if e is None or frequency <= e:
                buckets[i].append(r)
                break
    labels = []
    lower = 1
    for e in edges:
        if e is None:
            labels.append(f"{lower}+")
        elif e == lower:
            labels.append(str(e))
        else:
            labels.append(f"{lower}-{e}")
        lower = (e or 0) + 1
    return [_stratum(labels[i], buckets[i]) for i in range(len(edges))]


def _normalize_surface(surface: str, spec: TokenizerSpec) -> str:
    return " ".join(split_words(surface, spec))


def seen_unseen(records: list[PredictionRecord], train_corpus: Corpus
                ) -> tuple[StratumReport, StratumReport]:
    """Split records by whether any mention surface occurs, normalized, as an
    annotated mention surface in the training split."""
    spec = train_corpus.tokenizer
    train_surfaces = {
        _normalize_surface(m.surface, spec)
        for doc in train_corpus.split_docs(Split.TRAIN)
        for m in doc.mentions if m.surface
    }
    seen, unseen = [], []
    for r in records:
        surfaces = {_normalize_surface(span.surface, spec)
                    for span, _ in r.mention_scores if span.surface}
        (seen if surfaces & train_surfaces else unseen).append(r)
    seen_report = _stratum("seen", seen)
    unseen_report = _stratum("unseen", unseen)
    return seen_report, unseen_report


def transfer_eval(model: SalienceModel, source_corpus_name: str,
                  target_corpus: Corpus, target_corpus_name: str = "",
                  split: Split | None = Split.TEST,
                  threshold: float = 0.5) -> tuple[MetricsReport, dict]:
    """Evaluate a model on a corpus it was not trained on."""
    records = predict_records(model, target_corpus, split=split)
    report, calibration, _ = build_report(records, threshold=threshold)
    labels = {"source": source_corpus_name,
              "target": target_corpus_name,
              "split": split.value if split else "all",
              "ece": calibration.ece}
    return report, labels


def temperature_sweep(ensemble: TeacherEnsemble,
                      student_config: EncoderConfig,
                      pairs: list[tuple[float, float]],
                      corpus: Corpus,
                      base_config: DistillConfig | None = None,
                      bins: int = 10) -> list[SweepPoint]:
    """One full distillation per (teacher T, student T) pair, evaluated on the
    test split. Pairs share the same seed so only the temperatures vary."""
    base = base_config or DistillConfig()
    points: list[SweepPoint] = []
    transfer_cache: dict[float, SoftLabelSet] = {}
    for t_teacher, t_student in pairs:
        if t_teacher not in transfer_cache:
            transfer_cache[t_teacher] = build_transfer_set(corpus, ensemble, t_teacher)
        config = DistillConfig(t_teacher=t_teacher, t_student=t_student,
                               epochs=base.epochs, batch_size=base.batch_size,
                               learning_rate=base.learning_rate, seed=base.seed,
                               weight_decay=base.weight_decay)
        student, _ = distill_train(student_config, HeadKind.POOLING,
                                   transfer_cache[t_teacher], corpus, config)
        records = predict_records(student, corpus, split=Split.TEST)
        calibration = ece(records, bins)
        try:
            ap = average_precision(records)
        except ValueError:
            ap = None
        points.append(SweepPoint(t_teacher=t_teacher, t_student=t_student,
                                 ece=calibration.ece, ap=ap))
    return points


def strata_to_csv(strata: list[StratumReport]) -> str:
    lines = ["bucket,n,positive_rate,ap,flagged"]
    for s in strata:
        ap = "" if s.ap is None else f"{s.ap:.6f}"
        lines.append(f"{s.bucket},{s.n},{s.positive_rate:.6f},{ap},{int(s.flagged)}")
    return "\n".join(lines) + "\n"


def sweep_to_csv(points: list[SweepPoint]) -> str:
    lines = ["t_teacher,t_student,ece,ap"]
    for p in points:
        ap = "" if p.ap is None else f"{p.ap:.6f}"
        lines.append(f"{p.t_teacher},{p.t_student},{p.ece:.6f},{ap}")
    return "\n".join(lines) + "\n"
