"""Threshold, ranking and calibration metrics over prediction records.

All functions are pure and operate on immutable record lists; average
precision follows the non-interpolated rank-sum definition, which matches
brute-force threshold enumeration exactly when no tie crosses the class
boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import MentionSpan

AGGREGATION_MODES = ("first", "last", "average", "median")


@dataclass
class PredictionRecord:
    """One (document, entity) pair with per-mention scores and a gold label."""

    doc_id: str
    entity_id: str
    mention_scores: list[tuple[MentionSpan, float]]
    aggregated_score: float
    gold: int


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    ap: float | None
    threshold: float
    n_pos: int
    n_neg: int
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "ap": self.ap, "threshold": self.threshold,
                "n_pos": self.n_pos, "n_neg": self.n_neg, "flags": self.flags}


@dataclass
class CalibrationBins:
    m: int
    counts: list[int]
    accuracies: list[float]
    confidences: list[float]
    ece: float

    def to_dict(self) -> dict:
        return {"m": self.m, "counts": self.counts,
                "accuracies": self.accuracies, "confidences": self.confidences,
                "ece": self.ece}


@dataclass
class TopKReport:
    k: int
    p_at_k: float
    r_at_k: float
    n_docs: int
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"k": self.k, "p": self.p_at_k, "r": self.r_at_k,
                "n_docs": self.n_docs, "flags": self.flags}


def aggregate_entity_score(mention_scores: list[float], mode: str = "first") -> float:
    """Collapse ordered per-mention scores into one entity score."""
    if not mention_scores:
        raise ValueError("aggregate_entity_score: empty mention list")
    mode = mode.lower()
    if mode == "first":
        return float(mention_scores[0])
    if mode == "last":
        return float(mention_scores[-1])
    if mode == "average":
        return float(np.mean(mention_scores))
    if mode == "median":
        return float(np.median(mention_scores))
    raise ValueError(f"unknown aggregation mode '{mode}'")


def prf1(records: list[PredictionRecord], threshold: float = 0.5) -> MetricsReport:
    """Precision/recall/F1 with positives predicted at score >= threshold."""
    tp = fp = fn = 0
    n_pos = n_neg = 0
    for r in records:
        predicted = r.aggregated_score >= threshold
        if r.gold == 1:
            n_pos += 1
            tp += predicted
            fn += not predicted
        else:
            n_neg += 1
            fp += predicted
    flags = []
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    if n_pos == 0:
        flags.append("recall_undefined_no_positives")
        recall = 0.0
    else:
        recall = tp / n_pos
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    return MetricsReport(precision=precision, recall=recall, f1=f1, ap=None,
                         threshold=threshold, n_pos=n_pos, n_neg=n_neg, flags=flags)


def _ranked(records: list[PredictionRecord]) -> list[PredictionRecord]:
    return sorted(records, key=lambda r: (-r.aggregated_score, r.doc_id, r.entity_id))


def average_precision(records: list[PredictionRecord]) -> float:
    """Rank-sum AP: mean over positives of precision at that positive's rank.

    Ties are broken by stable (doc_id, entity_id) order; use
    score_ties_cross_classes to detect when that choice matters.
    """
    n_pos = sum(r.gold == 1 for r in records)
    if n_pos == 0:
        raise ValueError("AP undefined: no positive gold labels")
    hits = 0
    total = 0.0
    for rank, r in enumerate(_ranked(records), start=1):
        if r.gold == 1:
            hits += 1
            total += hits / rank
    return total / n_pos


def score_ties_cross_classes(records: list[PredictionRecord]) -> bool:
    """True when records with equal scores carry different gold labels."""
    by_score: dict[float, set[int]] = {}
    for r in records:
        by_score.setdefault(r.aggregated_score, set()).add(r.gold)
    return any(len(golds) > 1 for golds in by_score.values())


def topk(records: list[PredictionRecord], k: int) -> TopKReport:
    """Macro-averaged P@k and R@k over documents with at least one positive.

    Documents with fewer than k entities still divide by k (flagged).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    by_doc: dict[str, list[PredictionRecord]] = {}
    for r in records:
        by_doc.setdefault(r.doc_id, []).append(r)
    flags: list[str] = []
    p_values, r_values = [], []
    for doc_id in sorted(by_doc):
        doc_records = by_doc[doc_id]
        doc_pos = sum(r.gold == 1 for r in doc_records)
        if doc_pos == 0:
            continue
        if len(doc_records) < k and "short_document_denominator_k" not in flags:
            flags.append("short_document_denominator_k")
        top = sorted(doc_records,
                     key=lambda r: (-r.aggregated_score, r.entity_id))[:k]
        hits = sum(r.gold == 1 for r in top)
        p_values.append(hits / k)
        r_values.append(hits / doc_pos)
    if not p_values:
        raise ValueError("topk undefined: no document has a positive gold label")
    return TopKReport(k=k, p_at_k=float(np.mean(p_values)),
                      r_at_k=float(np.mean(r_values)),
                      n_docs=len(p_values), flags=flags)


def ece(records: list[PredictionRecord], m: int = 10) -> CalibrationBins:
    """Expected calibration error over M uniform right-closed confidence bins.

    Confidence of a record is max(score, 1 - score); the predicted label is
    score >= 0.5; empty bins contribute zero.
    """
    if m < 1:
        raise ValueError("ece: need at least one bin")
    counts = [0] * m
    acc_sums = [0.0] * m
    conf_sums = [0.0] * m
    n = len(records)
    for r in records:
        confidence = max(r.aggregated_score, 1.0 - r.aggregated_score)
        predicted = 1 if r.aggregated_score >= 0.5 else 0
        idx = min(int(np.ceil(confidence * m)) - 1, m - 1)
        idx = max(idx, 0)
        counts[idx] += 1
        acc_sums[idx] += (predicted == r.gold)
        conf_sums[idx] += confidence
    accuracies = [acc_sums[i] / counts[i] if counts[i] else 0.0 for i in range(m)]
    confidences = [conf_sums[i] / counts[i] if counts[i] else 0.0 for i in range(m)]
    total = 0.0
    for i in range(m):
        if counts[i]:
            total += counts[i] / n * abs(accuracies[i] - confidences[i])
    return CalibrationBins(m=m, counts=counts, accuracies=accuracies,
                           confidences=confidences, ece=total)


def speedup_estimate(salient_per_doc: float, nonsalient_per_doc: float) -> float:
    """Pooling-vs-standard runtime ratio: one encode per document replaces one
    encode per entity, so the ratio is the mean entity count per document."""
    if salient_per_doc < 0 or nonsalient_per_doc < 0:
        raise ValueError("entity counts must be non-negative")
    return salient_per_doc + nonsalient_per_doc


def build_report(records: list[PredictionRecord], threshold: float = 0.5,
                 bins: int = 10, ks: list[int] | None = None
                 ) -> tuple[MetricsReport, CalibrationBins, list[TopKReport]]:
    """Full evaluation bundle: threshold metrics + AP, calibration, and top-k."""
    report = prf1(records, threshold)
    try:
        report.ap = average_precision(records)
    except ValueError:
        report.ap = None
        report.flags.append("ap_undefined_no_positives")
    if score_ties_cross_classes(records):
        report.flags.append("score_ties_cross_class_boundary")
    calibration = ece(records, bins)
    topk_reports = []
    for k in ks or []:
        try:
            topk_reports.append(topk(records, k))
        except ValueError:
            pass
    return report, calibration, topk_reports
