"""Teacher-ensemble knowledge distillation with temperature scaling.

An ensemble scores the training split to build a soft-label transfer set
(teacher temperature applied once, at build time); the student minimizes
binary cross-entropy against those soft labels with its own temperature
applied at every step. Gold labels are never consumed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor_engine as te
from .corpus import Corpus, DataError, Document, MentionSpan, Split, tokenize
from .encoder import EncoderConfig
from .heads import (SCORE_CLAMP, EpochStats, HeadKind, OverlapPolicy,
                    SalienceModel, _logits_one_pass, _span_key, fit_window,
                    init_model, score_document, select_nonoverlapping)
from .tensor_engine import AdamWConfig, NumericalError, Tensor, adamw_step

SpanKey = tuple[str, int, int]  # (doc_id, token_start, token_end)


@dataclass
class TeacherEnsemble:
    """Averages member scores per candidate; one member is a valid ensemble."""

    members: list[SalienceModel]

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")


@dataclass
class DistillConfig:
    t_teacher: float = 1.0
    t_student: float = 1.0
    epochs: int = 12
    batch_size: int = 8
    learning_rate: float = 3e-4
    seed: int = 0
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.t_teacher <= 0 or self.t_student <= 0:
            raise ValueError("temperatures must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class SoftLabelSet:
    """Teacher scores keyed by (doc_id, token_start, token_end)."""

    scores: dict[SpanKey, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scores)

    def get(self, doc_id: str, span: MentionSpan) -> float:
        key = (doc_id, span.token_start, span.token_end)
        if key not in self.scores:
            raise DataError(f"transfer set missing candidate {key}")
        return self.scores[key]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for (doc_id, start, end) in sorted(self.scores):
                fh.write(json.dumps({"doc_id": doc_id, "token_start": start,
                                     "token_end": end,
                                     "teacher_score": self.scores[(doc_id, start, end)]})
                         + "\n")

    @classmethod
    def load(cls, path) -> "SoftLabelSet":
        scores: dict[SpanKey, float] = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                scores[(rec["doc_id"], rec["token_start"], rec["token_end"])] = \
                    float(rec["teacher_score"])
        return cls(scores=scores)


def temperature_score(logit: float, temperature: float) -> float:
    """sigmoid(z / T); T < 1 sharpens scores toward {0, 1}, T > 1 softens."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = logit / temperature
    return float(1.0 / (1.0 + np.exp(-z)))


def _member_scores(member: SalienceModel, docs: list[Document],
                   temperature: float) -> dict[SpanKey, float]:
    out: dict[SpanKey, float] = {}
    for doc in docs:
        ids = tokenize(doc.title, doc.body, member.tokenizer)
        unique = {m.key: m for m in doc.mentions}
        result = score_document(member, ids, [unique[k] for k in sorted(unique)])
        for scored in result.scored:
            key = (doc.doc_id, scored.span.token_start, scored.span.token_end)
            out[key] = temperature_score(scored.logit, temperature)
    return out


def ensemble_predict(ensemble: TeacherEnsemble, corpus: Corpus,
                     split: Split | None = None,
                     temperature: float = 1.0,
                     workers: int = 1) -> SoftLabelSet:
    """Mean of member scores per candidate, each member at the given
    temperature. Members whose heads cannot tag overlapping candidates score
    them through internal partitioned passes. Member predictions may fan out
    over `workers` threads; the mean is reduced in fixed member order."""
    docs = corpus.split_docs(split)
    if workers > 1 and len(ensemble.members) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_member = list(pool.map(
                lambda m: _member_scores(m, docs, temperature), ensemble.members))
    else:
        per_member = [_member_scores(m, docs, temperature)
                      for m in ensemble.members]
    common = set(per_member[0])
    for scores in per_member[1:]:
        common &= set(scores)
    n = len(ensemble.members)
    merged = {key: sum(scores[key] for scores in per_member) / n
              for key in sorted(common)}
    return SoftLabelSet(scores=merged)


def build_transfer_set(corpus: Corpus, ensemble: TeacherEnsemble,
                       t_teacher: float = 1.0, workers: int = 1) -> SoftLabelSet:
    """Soft labels for the training split only; gold labels are never copied."""
    return ensemble_predict(ensemble, corpus, split=Split.TRAIN,
                            temperature=t_teacher, workers=workers)


def distill_loss(student_logits: Tensor, teacher_scores: Sequence[float],
                 t_student: float = 1.0) -> Tensor:
    """Binary cross-entropy of temperature-scaled student scores against
    teacher soft labels; differentiable in the student logits."""
    target = np.asarray(teacher_scores, dtype=np.float64).reshape(student_logits.shape)
    scaled = te.mul(student_logits, 1.0 / t_student)
    student = te.clamp(te.sigmoid(scaled), SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    log_like = te.add(te.mul(te.log(student), target),
                      te.mul(te.log(te.sub(1.0, student)), 1.0 - target))
    return te.mul(te.tsum(log_like), -1.0)


def distill_train(student_encoder_config: EncoderConfig,
                  head_kind: HeadKind,
                  transfer_set: SoftLabelSet,
                  corpus: Corpus,
                  config: DistillConfig,
                  corpus_name: str = "") -> tuple[SalienceModel, list[EpochStats]]:
    """Train a student on teacher soft labels over the training split.

    The student is a pooling model by default so deployment stays single-pass;
    the deployed student always scores at T = 1.
    """
    if len(transfer_set) == 0:
        raise DataError("distill_train: empty transfer set")
    train_docs = corpus.split_docs(Split.TRAIN)
    if not train_docs:
        raise DataError("distill_train: empty train split")

    model = init_model(student_encoder_config, head_kind, corpus.tokenizer,
                       trained_on=corpus_name)
    optim = AdamWConfig(learning_rate=config.learning_rate,
                        weight_decay=config.weight_decay)
    rng = np.random.Generator(np.random.PCG64(config.seed))

    per_doc: list[tuple[list[int], list[MentionSpan], list[float]]] = []
    for doc in train_docs:
        window_ids, kept, _ = fit_window(doc.tokens, list(doc.mentions),
                                         student_encoder_config.max_len,
                                         reserve_tags=head_kind.needs_tags)
        if head_kind.needs_tags:
            kept = select_nonoverlapping(kept, OverlapPolicy.LONGEST_FIRST)
        if not kept:
            continue
        targets = [transfer_set.get(doc.doc_id, s) for s in kept]
        per_doc.append((window_ids, kept, targets))
    if not per_doc:
        raise DataError("distill_train: no usable candidates")

    history: list[EpochStats] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(per_doc))
        total_loss, total_cands = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            logit_blocks, targets_flat = [], []
            for idx in batch:
                window_ids, spans, targets = per_doc[int(idx)]
                logits, ordered = _logits_one_pass(model, window_ids, spans)
                target_by_key = {_span_key(s): t for s, t in zip(spans, targets)}
                logit_blocks.append(logits)
                targets_flat.extend(target_by_key[_span_key(s)] for s in ordered)
            logits_all = te.concat(logit_blocks, axis=0)
            loss = distill_loss(logits_all, targets_flat, config.t_student)
            if not np.isfinite(loss.data):
                raise NumericalError(f"distill_train: non-finite loss at epoch {epoch}")
            model.params.zero_grads()
            loss.backward()
            adamw_step(model.params, optim)
            total_loss += loss.item()
            total_cands += len(targets_flat)
        history.append(EpochStats(epoch=epoch,
                                  train_loss=total_loss / max(total_cands, 1),
                                  valid_ap=None))
    return model, history
