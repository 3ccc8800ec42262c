"""Annotated news corpus data model.

Documents carry entity annotations on a four-level salience scale plus
token-level mention spans. Token ids derive deterministically from the raw
title/body text and a tokenizer spec, so JSONL files never store them.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Corpus content violates an invariant."""


class CorpusFormatError(DataError):
    """A JSONL record could not be parsed; names the line and field."""

    def __init__(self, line: int, field_name: str, message: str):
        super().__init__(f"line {line}: field '{field_name}': {message}")
        self.line = line
        self.field_name = field_name


class SalienceLabel(Enum):
    PERFECT = "Perfect"
    EXCELLENT = "Excellent"
    GOOD = "Good"
    BAD = "Bad"


class Split(Enum):
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"


class Provenance(Enum):
    ANNOTATED = "annotated"
    SAMPLED_NEGATIVE = "sampled_negative"
    EXCLUDED_PARTIAL = "excluded_partial"


def binarize(label, threshold: float = 2.0, inclusive: bool = True) -> int:
    """Collapse a salience judgment to {0, 1}.

    Categorical labels: Perfect/Excellent/Good are salient, Bad is not.
    Ordinal scores in [0, 3]: salient iff score >= threshold (or > when
    `inclusive` is off).
    """
    if isinstance(label, SalienceLabel):
        return 0 if label is SalienceLabel.BAD else 1
    score = float(label)
    if not (0.0 <= score <= 3.0):
        raise ValueError(f"ordinal salience score {score} outside [0, 3]")
    if not (0.0 <= threshold <= 3.0):
        raise ValueError(f"threshold {threshold} outside [0, 3]")
    if inclusive:
        return 1 if score >= threshold else 0
    return 1 if score > threshold else 0


@dataclass(frozen=True)
class EntityAnnotation:
    entity_id: str
    canonical_name: str
    label: SalienceLabel
    aliases: tuple[str, ...] = ()
    references: tuple[str, ...] = ()
    wiki_entity: str | None = None

    def __post_init__(self):
        if not self.canonical_name:
            raise DataError(f"entity {self.entity_id}: empty canonical_name")
        if self.wiki_entity is not None and not self.wiki_entity:
            raise DataError(f"entity {self.entity_id}: wiki_entity present but empty")


@dataclass(frozen=True, order=True)
class MentionSpan:
    """Half-open token span [token_start, token_end) for one entity mention."""
    entity_id: str
    token_start: int
    token_end: int
    surface: str = ""

    def __post_init__(self):
        if not (0 <= self.token_start < self.token_end):
            raise DataError(f"mention of {self.entity_id}: bad span "
                            f"[{self.token_start}, {self.token_end})")

    @property
    def key(self) -> tuple[int, int]:
        return (self.token_start, self.token_end)

    def overlaps(self, other: "MentionSpan") -> bool:
        return self.token_start < other.token_end and other.token_start < self.token_end


@dataclass(frozen=True)
class CandidateSpan:
    span: MentionSpan
    provenance: Provenance
    binary_label: int | None = None

    def __post_init__(self):
        if self.provenance is not Provenance.EXCLUDED_PARTIAL and self.binary_label not in (0, 1):
            raise DataError("non-excluded candidate needs a binary label in {0, 1}")


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------

RESERVED_TOKENS = ("<pad>", "<unk>", "<cand>", "</cand>", "<sep>")
PAD_ID, UNK_ID, CAND_OPEN_ID, CAND_CLOSE_ID, SEP_ID = range(5)

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


@dataclass
class Vocab:
    """Token-to-id map. Ids 0-4 are reserved and never produced by text."""

    token_to_id: dict[str, int]
    id_to_token: list[str]

    @classmethod
    def build(cls, words: Iterable[str]) -> "Vocab":
        id_to_token = list(RESERVED_TOKENS)
        token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
        for word in sorted(set(words)):
            token_to_id[word] = len(id_to_token)
            id_to_token.append(word)
        return cls(token_to_id, id_to_token)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, word: str) -> int:
        return self.token_to_id.get(word, UNK_ID)


@dataclass
class TokenizerSpec:
    lowercase: bool = True
    drop_punctuation: bool = True
    max_len: int = 65536
    vocab: Vocab | None = None

    def __post_init__(self):
        if self.max_len < 1:
            raise ValueError("max_len must be positive")

    def compatible_preprocessing(self, other: "TokenizerSpec") -> bool:
        return (self.lowercase == other.lowercase
                and self.drop_punctuation == other.drop_punctuation)


def split_words(text: str, spec: TokenizerSpec) -> list[str]:
    """Deterministic whitespace+punctuation split; punctuation optionally dropped."""
    if spec.lowercase:
        text = text.lower()
    words = _WORD_RE.findall(text)
    if spec.drop_punctuation:
        words = [w for w in words if re.match(r"\w", w)]
    return words


def tokenize(title: str, body: str, spec: TokenizerSpec) -> list[int]:
    """Token ids for title and body joined by SEP, truncated to spec.max_len."""
    if spec.vocab is None:
        raise ValueError("tokenize requires a built vocab on the spec")
    parts = [split_words(title, spec), split_words(body, spec)]
    ids: list[int] = []
    for part in parts:
        if not part:
            continue
        if ids:
            ids.append(SEP_ID)
        ids.extend(spec.vocab.lookup(w) for w in part)
    return ids[: spec.max_len]


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    return " ".join(vocab.id_to_token[i] for i in ids)


def strip_reserved(ids: Sequence[int]) -> list[int]:
    return [i for i in ids if i >= len(RESERVED_TOKENS)]


def build_tokenizer(texts: Iterable[tuple[str, str]],
                    lowercase: bool = True,
                    drop_punctuation: bool = True,
                    max_len: int = 65536) -> TokenizerSpec:
    """Scan (title, body) pairs and build a sorted-id vocabulary."""
    spec = TokenizerSpec(lowercase=lowercase, drop_punctuation=drop_punctuation,
                         max_len=max_len)
    words: set[str] = set()
    for title, body in texts:
        words.update(split_words(title, spec))
        words.update(split_words(body, spec))
    spec.vocab = Vocab.build(words)
    return spec


# ---------------------------------------------------------------------------
# Documents and corpora
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str
    split: Split
    annotations: tuple[EntityAnnotation, ...]
    mentions: tuple[MentionSpan, ...]
    tokens: tuple[int, ...]

    def __post_init__(self):
        by_id: dict[str, EntityAnnotation] = {}
        for ann in self.annotations:
            if ann.entity_id in by_id:
                raise DataError(f"doc {self.doc_id}: duplicate entity id {ann.entity_id}")
            by_id[ann.entity_id] = ann
        for m in self.mentions:
            if m.entity_id not in by_id:
                raise DataError(f"doc {self.doc_id}: mention of unknown entity {m.entity_id}")
            if m.token_end > len(self.tokens):
                raise DataError(f"doc {self.doc_id}: mention [{m.token_start},{m.token_end}) "
                                f"beyond {len(self.tokens)} tokens")

    def annotation(self, entity_id: str) -> EntityAnnotation:
        for ann in self.annotations:
            if ann.entity_id == entity_id:
                return ann
        raise KeyError(entity_id)

    def mentions_of(self, entity_id: str) -> list[MentionSpan]:
        found = [m for m in self.mentions if m.entity_id == entity_id]
        return sorted(found, key=lambda m: (m.token_start, m.token_end))


@dataclass
class Corpus:
    documents: list[Document]
    tokenizer: TokenizerSpec

    def split_docs(self, split: Split | None) -> list[Document]:
        if split is None:
            return list(self.documents)
        return [d for d in self.documents if d.split == split]

    def __len__(self) -> int:
        return len(self.documents)


def make_document(doc_id: str, title: str, body: str, split: Split,
                  annotations: Sequence[EntityAnnotation],
                  mentions: Sequence[MentionSpan],
                  spec: TokenizerSpec) -> Document:
    tokens = tuple(tokenize(title, body, spec))
    return Document(doc_id=doc_id, title=title, body=body, split=split,
                    annotations=tuple(annotations), mentions=tuple(mentions),
                    tokens=tokens)


# ---------------------------------------------------------------------------
# Candidate generation
# ---------------------------------------------------------------------------

def generate_candidates(doc: Document, pool: Sequence[MentionSpan] = (),
                        mode: Split | str = "train") -> list[CandidateSpan]:
    """Assign each annotated mention and detected phrase a provenance.

    Annotated mentions keep their binarized entity label. A pool phrase that
    exactly matches an annotated span is folded into that candidate; one that
    shares no token with any salient mention becomes a sampled negative; one
    that partially overlaps a salient mention is excluded (dropped in train
    mode, retained and flagged in eval mode).
    """
    train_mode = (mode == Split.TRAIN or str(mode).lower() == "train")
    n_tokens = len(doc.tokens)
    labels = {ann.entity_id: binarize(ann.label) for ann in doc.annotations}
    salient_spans = [m for m in doc.mentions if labels[m.entity_id] == 1]
    annotated_keys = {m.key for m in doc.mentions}

    out: list[CandidateSpan] = []
    for m in sorted(doc.mentions, key=lambda s: (s.token_start, s.token_end, s.entity_id)):
        out.append(CandidateSpan(span=m, provenance=Provenance.ANNOTATED,
                                 binary_label=labels[m.entity_id]))

    seen_keys = set(annotated_keys)
    for phrase in sorted(pool, key=lambda s: (s.token_start, s.token_end)):
        if phrase.token_end > n_tokens:
            raise DataError(f"doc {doc.doc_id}: detected phrase "
                            f"[{phrase.token_start},{phrase.token_end}) out of range")
        if phrase.key in seen_keys:
            continue  # exact match folds into the annotated candidate
        seen_keys.add(phrase.key)
        if any(s.overlaps(phrase) for s in salient_spans):
            if train_mode:
                continue  # partial matches never reach a training batch
            out.append(CandidateSpan(span=phrase, provenance=Provenance.EXCLUDED_PARTIAL,
                                     binary_label=None))
        else:
            out.append(CandidateSpan(span=phrase, provenance=Provenance.SAMPLED_NEGATIVE,
                                     binary_label=0))
    return out


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------

_SPLIT_NAMES = {s.value: s for s in Split}
_LABEL_NAMES = {l.value: l for l in SalienceLabel}


def _parse_document(record: dict, line: int, spec: TokenizerSpec) -> Document:
    def need(obj: dict, key: str, ctx: str = ""):
        if key not in obj:
            raise CorpusFormatError(line, f"{ctx}.{key}" if ctx else key, "missing")
        return obj[key]

    doc_id = need(record, "doc_id")
    title = need(record, "title")
    body = need(record, "body")
    split_name = need(record, "split")
    if split_name not in _SPLIT_NAMES:
        raise CorpusFormatError(line, "split", f"unknown split '{split_name}'")

    annotations = []
    for ent in need(record, "entities"):
        label_name = need(ent, "salience", "entities")
        if label_name not in _LABEL_NAMES:
            raise CorpusFormatError(line, "entities.salience",
                                    f"unknown level '{label_name}'")
        annotations.append(EntityAnnotation(
            entity_id=str(need(ent, "entity_id", "entities")),
            canonical_name=need(ent, "canonical_name", "entities"),
            aliases=tuple(ent.get("aliases", ())),
            references=tuple(ent.get("references", ())),
            wiki_entity=ent.get("wiki_entity"),
            label=_LABEL_NAMES[label_name]))

    mentions = []
    for m in need(record, "mentions"):
        mentions.append(MentionSpan(
            entity_id=str(need(m, "entity_id", "mentions")),
            token_start=int(need(m, "token_start", "mentions")),
            token_end=int(need(m, "token_end", "mentions")),
            surface=m.get("surface", "")))

    try:
        return make_document(doc_id, title, body, _SPLIT_NAMES[split_name],
                             annotations, mentions, spec)
    except DataError as exc:
        raise CorpusFormatError(line, "mentions", str(exc)) from exc


def load_corpus(path, format: str = "jsonl",
                lowercase: bool = True, drop_punctuation: bool = True,
                max_len: int = 65536) -> Corpus:
    """Load a JSONL corpus, building the vocabulary from its own text."""
    if format != "jsonl":
        raise ValueError(f"unsupported corpus format: {format}")
    path = Path(path)
    records: list[tuple[int, dict]] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(line_no, "<json>", str(exc)) from exc
            if not isinstance(record, dict):
                raise CorpusFormatError(line_no, "<json>", "record is not an object")
            records.append((line_no, record))

    spec = build_tokenizer(((r.get("title", ""), r.get("body", "")) for _, r in records),
                           lowercase=lowercase, drop_punctuation=drop_punctuation,
                           max_len=max_len)
    documents = [_parse_document(record, line_no, spec) for line_no, record in records]
    return Corpus(documents=documents, tokenizer=spec)


def save_corpus(corpus: Corpus, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for doc in corpus.documents:
            record = {
                "doc_id": doc.doc_id,
                "title": doc.title,
                "body": doc.body,
                "split": doc.split.value,
                "entities": [{
                    "entity_id": ann.entity_id,
                    "canonical_name": ann.canonical_name,
                    "aliases": list(ann.aliases),
                    "references": list(ann.references),
                    "wiki_entity": ann.wiki_entity,
                    "salience": ann.label.value,
                } for ann in doc.annotations],
                "mentions": [{
                    "entity_id": m.entity_id,
                    "token_start": m.token_start,
                    "token_end": m.token_end,
                    "surface": m.surface,
                } for m in doc.mentions],
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def split_corpus(corpus: Corpus, ratios: tuple[float, float, float],
                 seed: int) -> Corpus:
    """Reassign splits by exact largest-remainder counts, shuffled by seed."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios {ratios} do not sum to 1")
    if any(r < 0 for r in ratios):
        raise ValueError("split ratios must be non-negative")
    n = len(corpus.documents)
    exact = [r * n for r in ratios]
    counts = [int(x) for x in exact]
    remainders = sorted(range(3), key=lambda i: (exact[i] - counts[i], -i), reverse=True)
    for i in range(n - sum(counts)):
        counts[remainders[i % 3]] += 1
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n)
    assignment: dict[int, Split] = {}
    cursor = 0
    for split, count in zip((Split.TRAIN, Split.VALID, Split.TEST), counts):
        for idx in order[cursor:cursor + count]:
            assignment[int(idx)] = split
        cursor += count
    documents = [dataclasses.replace(doc, split=assignment[i])
                 for i, doc in enumerate(corpus.documents)]
    return Corpus(documents=documents, tokenizer=corpus.tokenizer)


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------

@dataclass
class SalientRule:
    min_frequency: int = 3
    max_first_offset_fraction: float = 0.1

    def applies(self, frequency: int, first_offset_fraction: float) -> bool:
        return (frequency >= self.min_frequency
                or first_offset_fraction < self.max_first_offset_fraction)


# Mention-count shaping inside the generator. Positive entities realized via
# repetition draw min_frequency + uniform(lo, hi) mentions; negatives draw a
# second mention with the given probability. Wide gaps keep the frequency
# signal learnable at micro scale.
_POS_EXTRA_MENTIONS = (2, 5)
_NEG_SECOND_MENTION_P = 0.25


@dataclass
class SyntheticConfig:
    n_docs: int = 280
    doc_len_range: tuple[int, int] = (88, 104)
    vocab_size: int = 40
    salient_rule: SalientRule = field(default_factory=SalientRule)
    negatives_per_doc: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.doc_len_range[0] > self.doc_len_range[1]:
            raise ValueError(f"doc_len_range min {self.doc_len_range[0]} "
                             f"> max {self.doc_len_range[1]}")
        if self.n_docs < 1 or self.vocab_size < 10:
            raise ValueError("need n_docs >= 1 and vocab_size >= 10")


def first_offset_fraction(doc: Document, entity_id: str) -> float:
    spans = doc.mentions_of(entity_id)
    if not spans:
        raise DataError(f"entity {entity_id} has no mentions in {doc.doc_id}")
    return spans[0].token_start / len(doc.tokens)


def synth_generate(config: SyntheticConfig) -> Corpus:
    """Generate documents whose entity labels follow the salient rule exactly.

    Every entity surface comes from a shared pool reused across documents, so
    the label of a surface varies with its realized frequency and first-offset
    and cannot be memorized. All documents start in the Train split; use
    split_corpus to partition.
    """
    rng = np.random.Generator(np.random.PCG64(config.seed))
    rule = config.salient_rule
    filler = [f"w{i}" for i in range(config.vocab_size)]
    pool_size = max(12, config.vocab_size // 3)
    surfaces: list[tuple[str, ...]] = []
    for k in range(pool_size):
        if k % 3 == 2:
            surfaces.append((f"ent{k}a", f"ent{k}b"))
        else:
            surfaces.append((f"ent{k}",))

    titles_words = 4
    raw_docs: list[tuple[str, str, list[EntityAnnotation], list[MentionSpan]]] = []
    for d in range(config.n_docs):
        body_len = int(rng.integers(config.doc_len_range[0], config.doc_len_range[1] + 1))
        n_pos = int(rng.integers(1, 4))
        n_entities = n_pos + config.negatives_per_doc
        picks = rng.choice(pool_size, size=min(n_entities, pool_size), replace=False)
        total_len = titles_words + 1 + body_len  # title + SEP + body

        cells: list[str | None] = [None] * body_len
        title_cells: list[str | None] = [None] * titles_words
        mentions: list[MentionSpan] = []
        annotations: list[EntityAnnotation] = []

        def place(surface: tuple[str, ...], lo: int, hi: int) -> int | None:
            width = len(surface)
            hi = min(hi, body_len - width)
            if hi < lo:
                return None
            for _ in range(24):
                start = int(rng.integers(lo, hi + 1))
                if all(cells[start + j] is None for j in range(width)):
                    for j, word in enumerate(surface):
                        cells[start + j] = word
                    return start
            return None

        def place_in_title(surface: tuple[str, ...]) -> bool:
            width = len(surface)
            if width > titles_words or any(c is not None for c in title_cells[:width]):
                return False
            for j, word in enumerate(surface):
                title_cells[j] = word
            return True

        body_offset = titles_words + 1  # title tokens, then SEP
        early_limit = max(0, int(rule.max_first_offset_fraction * total_len)
                          - body_offset - 1)
        for slot, pool_idx in enumerate(picks):
            surface = surfaces[int(pool_idx)]
            positive_intent = slot < n_pos
            token_starts: list[int] = []

            def place_body(lo: int, hi: int) -> None:
                s = place(surface, lo, hi)
                if s is not None:
                    token_starts.append(body_offset + s)

            if positive_intent and rng.random() < 0.5:
                # salient by repetition, comfortably past the frequency bar
                lo, hi = _POS_EXTRA_MENTIONS
                want = rule.min_frequency + int(rng.integers(lo, hi + 1))
                for _ in range(want):
                    place_body(0, body_len - 1)
            elif positive_intent:
                # salient by early first mention: title slot or early body slot
                if rng.random() < 0.5 and place_in_title(surface):
                    token_starts.append(0)
                elif early_limit >= 0:
                    place_body(0, early_limit)
                if rng.random() < 0.5:
                    place_body(early_limit + 1, body_len - 1)
            else:
                # negatives: late first mention, usually a single one
                late_lo = min(body_len - 1,
                              int(rule.max_first_offset_fraction * total_len) + 2)
                cap = max(1, rule.min_frequency - 1)
                want = 1
                if cap > 1 and rng.random() < _NEG_SECOND_MENTION_P:
                    want = int(rng.integers(2, cap + 1))
                for _ in range(want):
                    place_body(late_lo, body_len - 1)
            if not token_starts:
                continue
            entity_id = f"e{int(pool_idx)}"
            name = " ".join(surface)
            spans = sorted(token_starts)
            for s in spans:
                mentions.append(MentionSpan(entity_id=entity_id, token_start=s,
                                            token_end=s + len(surface), surface=name))
            frequency = len(spans)
            fraction = spans[0] / total_len
            if rule.applies(frequency, fraction):
                level = (SalienceLabel.PERFECT, SalienceLabel.EXCELLENT,
                         SalienceLabel.GOOD)[int(rng.integers(0, 3))]
            else:
                level = SalienceLabel.BAD
            annotations.append(EntityAnnotation(
                entity_id=entity_id, canonical_name=name, label=level,
                wiki_entity=f"wiki:{name.replace(' ', '_')}" if int(pool_idx) % 2 == 0 else None))

        for i in range(body_len):
            if cells[i] is None:
                cells[i] = filler[int(rng.integers(0, config.vocab_size))]
        for i in range(titles_words):
            if title_cells[i] is None:
                title_cells[i] = filler[int(rng.integers(0, config.vocab_size))]
        title = " ".join(title_cells)  # type: ignore[arg-type]
        body = " ".join(cells)  # type: ignore[arg-type]
        raw_docs.append((f"doc{d:04d}", title, body, annotations, mentions))

    spec = build_tokenizer(((title, body) for _, title, body, _, _ in raw_docs))
    documents = [make_document(doc_id, title, body, Split.TRAIN, anns, mentions, spec)
                 for doc_id, title, body, anns, mentions in raw_docs]
    return Corpus(documents=documents, tokenizer=spec)


def coverage_within_window(corpus: Corpus, window: int) -> tuple[float, float]:
    """Fractions of unique first mentions that fit inside the token window,
    reported separately for salient and non-salient entities."""
    totals = [0, 0]
    inside = [0, 0]
    for doc in corpus.documents:
        for ann in doc.annotations:
            spans = doc.mentions_of(ann.entity_id)
            if not spans:
                continue
            cls = binarize(ann.label)
            totals[cls] += 1
            if spans[0].token_end <= window:
                inside[cls] += 1
    if totals[0] + totals[1] == 0:
        raise DataError("no mentions")
    salient = inside[1] / totals[1] if totals[1] else 0.0
    non_salient = inside[0] / totals[0] if totals[0] else 0.0
    return salient, non_salient
