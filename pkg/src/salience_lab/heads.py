"""Salience scoring heads and the training loop.

Four ways to score a candidate span from one shared encoder:

* tagging      - classify from the close-tag representation
* pooling      - classify from concatenated mean/max pooled span tokens
* pooling+tags - pooling applied over the inner tokens of a tagged sequence
* standard     - re-encode (mention, SEP, document) per candidate and
                 classify from the first position

Training minimizes per-batch class-reweighted binary cross-entropy summed
over candidates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor_engine as te
from .corpus import (SEP_ID, CandidateSpan, Corpus, DataError, Document,
                     MentionSpan, Provenance, Split, TokenizerSpec, Vocab,
                     binarize, generate_candidates, tokenize)
from .encoder import EncoderConfig, encode, init_encoder_params, insert_candidate_tags
from .tensor_engine import (AdamWConfig, NumericalError, ParameterSet, Tensor,
                            adamw_step, load_checkpoint, save_checkpoint)

SCORE_CLAMP = 1e-12


class HeadKind(Enum):
    TAGGING = "tagging"
    POOLING = "pooling"
    POOLING_WITH_TAGS = "pooling-tags"
    STANDARD_CLS = "standard"

    @property
    def needs_tags(self) -> bool:
        return self in (HeadKind.TAGGING, HeadKind.POOLING_WITH_TAGS)


class OverlapPolicy(Enum):
    LONGEST_FIRST = "longest_first"
    FIRST_OCCURRENCE = "first_occurrence"


def head_input_dim(kind: HeadKind, d_model: int) -> int:
    if kind in (HeadKind.POOLING, HeadKind.POOLING_WITH_TAGS):
        return 2 * d_model
    return d_model


@dataclass(frozen=True)
class MlpHead:
    """Two-layer MLP with ReLU, hidden layer half the input size, one logit out."""

    input_dim: int

    @property
    def hidden_dim(self) -> int:
        return self.input_dim // 2

    def init(self, params: ParameterSet, rng: np.random.Generator) -> None:
        limit1 = np.sqrt(6.0 / (self.input_dim + self.hidden_dim))
        limit2 = np.sqrt(6.0 / (self.hidden_dim + 1))
        params.add("head.W1", rng.uniform(-limit1, limit1,
                                          size=(self.input_dim, self.hidden_dim)))
        params.add("head.b1", np.zeros(self.hidden_dim))
        params.add("head.W2", rng.uniform(-limit2, limit2, size=(self.hidden_dim, 1)))
        params.add("head.b2", np.zeros(1))

    def logits(self, params: ParameterSet, features: Tensor) -> Tensor:
        """(k, input_dim) features -> (k, 1) logits."""
        hidden = te.relu(te.add(te.matmul(features, params["head.W1"]),
                                params["head.b1"]))
        return te.add(te.matmul(hidden, params["head.W2"]), params["head.b2"])


@dataclass
class ReweightConfig:
    alpha: float = 0.01
    scope: str = "per-batch"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 3e-4
    seed: int = 0
    head_kind: HeadKind = HeadKind.POOLING
    reweight: ReweightConfig = field(default_factory=ReweightConfig)
    max_len: int | None = None        # overrides the encoder window when set
    weight_decay: float = 0.01
    non_overlapping: bool = False     # pooling trained on the tagging sample set
    target_valid_ap: float | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


# ---------------------------------------------------------------------------
# Span scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoredSpan:
    span: MentionSpan
    logit: float

    @property
    def score(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.logit)))


def pool_span(reps: Tensor, span: MentionSpan) -> Tensor:
    """[mean, max] pooled vector of length 2 * d_model over the span rows."""
    return te.concat([te.mean_over_span(reps, span.token_start, span.token_end),
                      te.max_over_span(reps, span.token_start, span.token_end)],
                     axis=0)


def _pooled_features(reps: Tensor, spans: Sequence[MentionSpan]) -> Tensor:
    return te.stack_rows([pool_span(reps, s) for s in spans])


def score_pooling(reps: Tensor, candidates: Sequence[CandidateSpan],
                  params: ParameterSet, head: MlpHead
                  ) -> list[tuple[CandidateSpan, float]]:
    """Score every candidate, overlapping or not, from one shared encode."""
    if not candidates:
        return []
    logits = head.logits(params, _pooled_features(reps, [c.span for c in candidates]))
    return [(c, _sigmoid_scalar(z)) for c, z in zip(candidates, logits.data[:, 0])]


def score_tagging(tagged_reps: Tensor, candidates: Sequence[CandidateSpan],
                  close_indices: dict[tuple[int, int], int],
                  params: ParameterSet, head: MlpHead
                  ) -> list[tuple[CandidateSpan, float]]:
    if not candidates:
        return []
    rows = []
    for c in candidates:
        if c.span.key not in close_indices:
            raise ValueError(f"no close-tag index for span {c.span.key}")
        rows.append(close_indices[c.span.key])
    if max(rows) >= tagged_reps.shape[0]:
        raise ValueError("close-tag index beyond representation rows")
    logits = head.logits(params, te.embedding_gather(tagged_reps, rows))
    return [(c, _sigmoid_scalar(z)) for c, z in zip(candidates, logits.data[:, 0])]


def score_pooling_with_tags(tagged_reps: Tensor, candidates: Sequence[CandidateSpan],
                            close_indices: dict[tuple[int, int], int],
                            params: ParameterSet, head: MlpHead
                            ) -> list[tuple[CandidateSpan, float]]:
    """Pool the candidate's inner tokens (tags excluded) of a tagged sequence."""
    if not candidates:
        return []
    inner = []
    for c in candidates:
        if c.span.key not in close_indices:
            raise ValueError(f"no close-tag index for span {c.span.key}")
        close = close_indices[c.span.key]
        length = c.span.token_end - c.span.token_start
        inner.append(MentionSpan(entity_id=c.span.entity_id,
                                 token_start=close - length, token_end=close,
                                 surface=c.span.surface))
    logits = head.logits(params, _pooled_features(tagged_reps, inner))
    return [(c, _sigmoid_scalar(z)) for c, z in zip(candidates, logits.data[:, 0])]


def _sigmoid_scalar(z: float) -> float:
    return float(1.0 / (1.0 + np.exp(-z)))


def class_weights(batch_labels: Sequence[int], alpha: float = 0.01) -> np.ndarray:
    """Smoothed inverse class-frequency weight per candidate.

    w = (max_j f_j + alpha) / (f_label + alpha) with frequencies taken from
    this batch alone; the majority class always gets weight 1.
    """
    labels = np.asarray(batch_labels, dtype=np.intp)
    if labels.size == 0:
        raise ValueError("class_weights: empty batch")
    f = np.array([(labels == 0).sum(), (labels == 1).sum()], dtype=np.float64)
    w = (f.max() + alpha) / (f + alpha)
    return w[labels]


def compute_loss(scores: Tensor, labels: Sequence[int],
                 weights: Sequence[float]) -> Tensor:
    """Weighted sum of binary cross-entropy terms; differentiable in scores."""
    y = np.asarray(labels, dtype=np.float64).reshape(scores.shape)
    w = np.asarray(weights, dtype=np.float64).reshape(scores.shape)
    s = te.clamp(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    log_like = te.add(te.mul(te.log(s), y), te.mul(te.log(te.sub(1.0, s)), 1.0 - y))
    return te.mul(te.tsum(te.mul(log_like, w)), -1.0)


def select_nonoverlapping(candidates: Sequence, policy: OverlapPolicy
                          ) -> list:
    """Greedy non-overlapping subset; every dropped item overlaps a kept one."""
    def span_of(c) -> MentionSpan:
        return c.span if isinstance(c, CandidateSpan) else c

    if policy is OverlapPolicy.LONGEST_FIRST:
        def order(c):
            s = span_of(c)
            return (-(s.token_end - s.token_start), s.token_start,
                    s.token_end, s.entity_id)
    else:
        def order(c):
            s = span_of(c)
            return (s.token_start, s.token_end, s.entity_id)

    kept: list = []
    kept_spans: list[MentionSpan] = []
    for c in sorted(candidates, key=order):
        s = span_of(c)
        if all(not s.overlaps(k) for k in kept_spans):
            kept.append(c)
            kept_spans.append(s)
    kept.sort(key=lambda c: (span_of(c).token_start, span_of(c).token_end,
                             span_of(c).entity_id))
    return kept


# ---------------------------------------------------------------------------
# Model bundle
# ---------------------------------------------------------------------------

@dataclass
class SalienceModel:
    """Trained weights plus everything needed to score a fresh document."""

    params: ParameterSet
    encoder_config: EncoderConfig
    head_kind: HeadKind
    tokenizer: TokenizerSpec
    trained_on: str = ""

    @property
    def head(self) -> MlpHead:
        return MlpHead(head_input_dim(self.head_kind, self.encoder_config.d_model))

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.params, directory / "params.bin")
        meta = {
            "head_kind": self.head_kind.value,
            "encoder": self.encoder_config.to_dict(),
            "trained_on": self.trained_on,
            "tokenizer": {
                "lowercase": self.tokenizer.lowercase,
                "drop_punctuation": self.tokenizer.drop_punctuation,
                "max_len": self.tokenizer.max_len,
                "id_to_token": self.tokenizer.vocab.id_to_token,
            },
        }
        with open(directory / "model.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2)

    @classmethod
    def load(cls, directory) -> "SalienceModel":
        directory = Path(directory)
        with open(directory / "model.json", "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        id_to_token = meta["tokenizer"]["id_to_token"]
        vocab = Vocab(token_to_id={tok: i for i, tok in enumerate(id_to_token)},
                      id_to_token=list(id_to_token))
        tokenizer = TokenizerSpec(lowercase=meta["tokenizer"]["lowercase"],
                                  drop_punctuation=meta["tokenizer"]["drop_punctuation"],
                                  max_len=meta["tokenizer"]["max_len"],
                                  vocab=vocab)
        return cls(params=load_checkpoint(directory / "params.bin"),
                   encoder_config=EncoderConfig.from_dict(meta["encoder"]),
                   head_kind=HeadKind(meta["head_kind"]),
                   tokenizer=tokenizer,
                   trained_on=meta.get("trained_on", ""))


def init_model(encoder_config: EncoderConfig, head_kind: HeadKind,
               tokenizer: TokenizerSpec, trained_on: str = "") -> SalienceModel:
    params = ParameterSet()
    rng = np.random.Generator(np.random.PCG64(encoder_config.seed))
    init_encoder_params(encoder_config, params, rng)
    MlpHead(head_input_dim(head_kind, encoder_config.d_model)).init(params, rng)
    return SalienceModel(params=params, encoder_config=encoder_config,
                         head_kind=head_kind, tokenizer=tokenizer,
                         trained_on=trained_on)


# ---------------------------------------------------------------------------
# Window fitting and whole-document scoring
# ---------------------------------------------------------------------------

def fit_window(ids: Sequence[int], spans: Sequence[MentionSpan], max_len: int,
               reserve_tags: bool) -> tuple[list[int], list[MentionSpan], list[MentionSpan]]:
    """Truncate a document so tags (if any) fit, dropping out-of-window spans."""
    base = min(len(ids), max_len)
    ordered = sorted(spans, key=lambda s: (s.token_start, s.token_end, s.entity_id))
    while True:
        kept = [s for s in ordered if s.token_end <= base]
        need = base + (2 * len(kept) if reserve_tags else 0)
        if need <= max_len or base <= 0:
            break
        base = max(max_len - 2 * len(kept), 0)
    kept_keys = {id(s) for s in kept}
    dropped = [s for s in ordered if id(s) not in kept_keys]
    return list(ids[:base]), kept, dropped


@dataclass
class DocumentScores:
    scored: list[ScoredSpan]
    dropped: list[MentionSpan]
    passes: int


def _logits_one_pass(model: SalienceModel, ids: list[int],
                     spans: list[MentionSpan],
                     train_rng: np.random.Generator | None = None
                     ) -> tuple[Tensor, list[MentionSpan]]:
    """Build the differentiable logits for one encoder pass."""
    params, config, kind = model.params, model.encoder_config, model.head_kind
    head = model.head
    if kind is HeadKind.POOLING:
        reps = encode(ids, None, params, config, train_rng)
        return head.logits(params, _pooled_features(reps, spans)), spans
    if kind in (HeadKind.TAGGING, HeadKind.POOLING_WITH_TAGS):
        tagged, close = insert_candidate_tags(ids, spans, config.max_len)
        reps = encode(tagged, None, params, config, train_rng)
        ordered = sorted(spans, key=lambda s: (s.token_start, s.token_end, s.entity_id))
        if kind is HeadKind.TAGGING:
            rows = [close[s.key] for s in ordered]
            return head.logits(params, te.embedding_gather(reps, rows)), ordered
        inner = [MentionSpan(entity_id=s.entity_id,
                             token_start=close[s.key] - (s.token_end - s.token_start),
                             token_end=close[s.key], surface=s.surface)
                 for s in ordered]
        return head.logits(params, _pooled_features(reps, inner)), ordered
    # standard classifier: one full encode per candidate
    rows = []
    for s in spans:
        surface_ids = list(ids[s.token_start:s.token_end])
        budget = config.max_len - len(surface_ids) - 1
        if budget <= 0:
            raise DataError(f"candidate {s.key} too long for window {config.max_len}")
        sequence = surface_ids + [SEP_ID] + list(ids[:budget])
        reps = encode(sequence, None, params, config, train_rng)
        rows.append(te.embedding_gather(reps, [0]))
    return head.logits(params, te.concat(rows, axis=0)), list(spans)


def score_document(model: SalienceModel, ids: Sequence[int],
                   spans: Sequence[MentionSpan]) -> DocumentScores:
    """Score all spans of one document, partitioning overlapping candidates
    into greedy longest-first passes when the head requires tags."""
    window_ids, kept, dropped = fit_window(
        ids, spans, model.encoder_config.max_len, reserve_tags=model.head_kind.needs_tags)
    if model.head_kind is HeadKind.STANDARD_CLS:
        # the mention is prepended to the input, so only spans beyond the raw
        # token stream are unscorable
        window_ids = list(ids)
        kept = [s for s in spans if s.token_end <= len(ids)]
        dropped = [s for s in spans if s.token_end > len(ids)]
    scored: list[ScoredSpan] = []
    passes = 0
    with te.no_grad():
        if model.head_kind in (HeadKind.POOLING, HeadKind.STANDARD_CLS):
            if kept:
                logits, ordered = _logits_one_pass(model, window_ids, kept)
                scored = [ScoredSpan(s, float(z))
                          for s, z in zip(ordered, logits.data[:, 0])]
                passes = 1
        else:
            remaining = list(kept)
            while remaining:
                batch = select_nonoverlapping(remaining, OverlapPolicy.LONGEST_FIRST)
                logits, ordered = _logits_one_pass(model, window_ids, batch)
                scored.extend(ScoredSpan(s, float(z))
                              for s, z in zip(ordered, logits.data[:, 0]))
                batch_ids = {id(s) for s in batch}
                remaining = [s for s in remaining if id(s) not in batch_ids]
                passes += 1
    scored.sort(key=lambda r: (r.span.token_start, r.span.token_end, r.span.entity_id))
    return DocumentScores(scored=scored, dropped=dropped, passes=passes)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    train_loss: float          # mean per candidate, for reporting
    valid_ap: float | None


@dataclass
class TrainResult:
    model: SalienceModel
    history: list[EpochStats]


def _training_spans(doc: Document, config: TrainConfig
                    ) -> list[tuple[MentionSpan, int]]:
    candidates = [c for c in generate_candidates(doc, (), Split.TRAIN)
                  if c.provenance is not Provenance.EXCLUDED_PARTIAL]
    if config.head_kind.needs_tags or config.non_overlapping:
        candidates = select_nonoverlapping(candidates, OverlapPolicy.LONGEST_FIRST)
    return [(c.span, c.binary_label) for c in candidates]


def _span_key(span: MentionSpan) -> tuple[str, int, int]:
    return (span.entity_id, span.token_start, span.token_end)


def train(corpus: Corpus, encoder_config: EncoderConfig,
          train_config: TrainConfig, corpus_name: str = "") -> TrainResult:
    """Seeded AdamW training with per-batch class reweighting.

    Keeps the checkpoint with the best validation AP; history records every
    epoch's mean candidate loss and validation AP.
    """
    train_docs = corpus.split_docs(Split.TRAIN)
    if not train_docs:
        raise DataError("train: empty train split")
    valid_docs = corpus.split_docs(Split.VALID)

    if train_config.max_len is not None:
        encoder_config = EncoderConfig.from_dict(
            {**encoder_config.to_dict(), "max_len": train_config.max_len})
    model = init_model(encoder_config, train_config.head_kind, corpus.tokenizer,
                       trained_on=corpus_name)
    optim = AdamWConfig(learning_rate=train_config.learning_rate,
                        weight_decay=train_config.weight_decay)
    rng = np.random.Generator(np.random.PCG64(train_config.seed))

    per_doc: list[tuple[list[int], list[MentionSpan], dict]] = []
    for doc in train_docs:
        labeled = _training_spans(doc, train_config)
        label_by_key = {_span_key(s): l for s, l in labeled}
        window_ids, kept, _ = fit_window(doc.tokens, [s for s, _ in labeled],
                                         encoder_config.max_len,
                                         reserve_tags=train_config.head_kind.needs_tags)
        if kept:
            per_doc.append((window_ids, kept, label_by_key))
    if not per_doc:
        raise DataError("train: no usable candidates in the train split")

    history: list[EpochStats] = []
    best_ap = -1.0
    best_params = model.params.copy()
    dropout_rng = (np.random.Generator(np.random.PCG64(train_config.seed + 1))
                   if encoder_config.dropout_rate > 0 else None)
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(len(per_doc))
        total_loss, total_cands = 0.0, 0
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start:start + train_config.batch_size]
            logit_blocks, labels_flat = [], []
            for idx in batch:
                window_ids, spans, label_by_key = per_doc[int(idx)]
                logits, ordered = _logits_one_pass(model, window_ids, spans,
                                                   train_rng=dropout_rng)
                logit_blocks.append(logits)
                labels_flat.extend(label_by_key[_span_key(s)] for s in ordered)
            logits_all = te.concat(logit_blocks, axis=0)
            weights = class_weights(labels_flat, train_config.reweight.alpha)
            loss = compute_loss(te.sigmoid(logits_all), labels_flat, weights)
            if not np.isfinite(loss.data):
                raise NumericalError(f"train: non-finite loss at epoch {epoch}")
            model.params.zero_grads()
            loss.backward()
            adamw_step(model.params, optim)
            total_loss += loss.item()
            total_cands += len(labels_flat)
        valid_ap = _validation_ap(model, valid_docs)
        history.append(EpochStats(epoch=epoch,
                                  train_loss=total_loss / max(total_cands, 1),
                                  valid_ap=valid_ap))
        if valid_ap is not None and valid_ap > best_ap:
            best_ap = valid_ap
            best_params = model.params.copy()
        if (train_config.target_valid_ap is not None and valid_ap is not None
                and valid_ap >= train_config.target_valid_ap):
            break
    if best_ap < 0:
        best_params = model.params.copy()
    model.params = best_params
    return TrainResult(model=model, history=history)


def _validation_ap(model: SalienceModel, valid_docs: Sequence[Document]
                   ) -> float | None:
    from .metrics import average_precision

    records = predict_documents(model, valid_docs)
    if not records or not any(r.gold == 1 for r in records):
        return None
    return average_precision(records)


# ---------------------------------------------------------------------------
# Corpus-level prediction
# ---------------------------------------------------------------------------

def predict_documents(model: SalienceModel, docs: Sequence[Document],
                      aggregation: str = "first"):
    """Entity-level prediction records for a document list.

    Documents are re-tokenized with the model's own vocabulary so that models
    transfer across corpora that share preprocessing flags.
    """
    from .metrics import PredictionRecord, aggregate_entity_score

    records = []
    for doc in docs:
        ids = tokenize(doc.title, doc.body, model.tokenizer)
        spans = [m for m in doc.mentions]
        result = score_document(model, ids, spans)
        by_entity: dict[str, list[ScoredSpan]] = {}
        for scored in result.scored:
            by_entity.setdefault(scored.span.entity_id, []).append(scored)
        for ann in doc.annotations:
            scored = by_entity.get(ann.entity_id)
            if not scored:
                continue  # every mention fell outside the window
            scored.sort(key=lambda r: (r.span.token_start, r.span.token_end))
            mention_scores = [(r.span, r.score) for r in scored]
            records.append(PredictionRecord(
                doc_id=doc.doc_id, entity_id=ann.entity_id,
                mention_scores=mention_scores,
                aggregated_score=aggregate_entity_score(
                    [s for _, s in mention_scores], aggregation),
                gold=binarize(ann.label)))
    records.sort(key=lambda r: (r.doc_id, r.entity_id))
    return records


def predict_records(model: SalienceModel, corpus: Corpus,
                    split: Split | None = None, aggregation: str = "first"):
    if not model.tokenizer.compatible_preprocessing(corpus.tokenizer):
        raise DataError("model and corpus tokenizers disagree on preprocessing; "
                        "token offsets would not line up")
    return predict_documents(model, corpus.split_docs(split), aggregation)
