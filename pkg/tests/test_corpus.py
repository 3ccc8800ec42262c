"""Corpus data model: tokenization, binarization, candidate trichotomy,
JSONL round-trips, splits, and the synthetic generator's rule invariant."""

import json

import pytest
from hypothesis import given, settings, strategies as st

from salience_lab.corpus import (SEP_ID, UNK_ID, CorpusFormatError,
                                 Corpus, DataError, EntityAnnotation,
                                 MentionSpan, Provenance, SalienceLabel,
                                 SalientRule, Split, SyntheticConfig,
                                 TokenizerSpec, binarize, build_tokenizer,
                                 coverage_within_window, detokenize,
                                 first_offset_fraction, generate_candidates,
                                 load_corpus, make_document, save_corpus,
                                 split_corpus, strip_reserved, synth_generate,
                                 tokenize)


def spec_for(*texts: str) -> TokenizerSpec:
    return build_tokenizer([(t, "") for t in texts])


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------

def test_tokenize_drops_punctuation_and_lowercases():
    spec = spec_for("A B.")
    ids = tokenize("A B.", "", spec)
    assert detokenize(ids, spec.vocab) == "a b"


def test_tokenize_empty_input_is_empty():
    spec = spec_for("something")
    assert tokenize("", "", spec) == []


def test_tokenize_deterministic():
    spec = spec_for("alpha beta gamma")
    assert tokenize("alpha beta", "gamma", spec) == tokenize("alpha beta", "gamma", spec)


def test_tokenize_joins_title_and_body_with_sep():
    spec = spec_for("one two")
    ids = tokenize("one", "two", spec)
    assert ids[1] == SEP_ID
    assert len(ids) == 3


def test_tokenize_no_sep_for_empty_body():
    spec = spec_for("one two")
    assert SEP_ID not in tokenize("one two", "", spec)


def test_tokenize_unknown_maps_to_unk():
    spec = spec_for("known")
    assert tokenize("mystery", "", spec) == [UNK_ID]


def test_tokenize_truncates_to_max_len():
    spec = build_tokenizer([("a b c d e", "")], max_len=3)
    assert len(tokenize("a b c d e", "", spec)) == 3


def test_tokenize_requires_vocab():
    with pytest.raises(ValueError):
        tokenize("a", "", TokenizerSpec())


def test_reserved_ids_never_produced_by_text():
    spec = spec_for("<pad> <unk> <cand> </cand> <sep> pad unk cand sep")
    ids = tokenize("<pad> <unk> <cand> </cand> <sep>", "", spec)
    assert all(i >= 5 for i in ids), "bracketed text must not hit reserved ids"


@settings(max_examples=40, deadline=None)
@given(st.text(alphabet=st.characters(categories=("Ll", "Nd", "Zs")), max_size=60))
def test_tokenize_idempotent_through_detokenize(text):
    spec = spec_for(text)
    ids = tokenize(text, "", spec)
    reserved_free = strip_reserved(ids)
    assert tokenize(detokenize(reserved_free, spec.vocab), "", spec) == reserved_free


# ---------------------------------------------------------------------------
# Binarization
# ---------------------------------------------------------------------------

def test_binarize_good_is_salient():
    assert binarize(SalienceLabel.GOOD) == 1


def test_binarize_bad_is_not_salient():
    assert binarize(SalienceLabel.BAD) == 0


def test_binarize_is_total_over_levels():
    assert {binarize(level) for level in SalienceLabel} == {0, 1}


def test_binarize_ordinal_threshold_inclusive():
    assert binarize(2.0, threshold=2.0) == 1
    assert binarize(2.0, threshold=2.0, inclusive=False) == 0
    assert binarize(1.99, threshold=2.0) == 0


def test_binarize_ordinal_out_of_range():
    with pytest.raises(ValueError):
        binarize(3.5)
    with pytest.raises(ValueError):
        binarize(-0.1)


# ---------------------------------------------------------------------------
# Candidate generation
# ---------------------------------------------------------------------------

def _doc_with_salient_span():
    spec = spec_for("t w0 w1 s1 s2 w2 w3 w4 w5 w6")
    annotations = [EntityAnnotation("e1", "s1 s2", SalienceLabel.EXCELLENT),
                   EntityAnnotation("e2", "w5", SalienceLabel.BAD)]
    mentions = [MentionSpan("e1", 2, 4, "s1 s2"), MentionSpan("e2", 6, 7, "w5")]
    return make_document("d1", "t", "w0 w1 s1 s2 w2 w3 w4 w5 w6", Split.TRAIN,
                         annotations, mentions, spec)


def test_zero_overlap_phrase_is_sampled_negative():
    doc = _doc_with_salient_span()
    pool = [MentionSpan("det", 6, 7, "w5"), MentionSpan("det", 7, 8, "w6")]
    out = generate_candidates(doc, pool, "train")
    sampled = [c for c in out if c.provenance is Provenance.SAMPLED_NEGATIVE]
    assert [c.span.key for c in sampled] == [(7, 8)]
    assert all(c.binary_label == 0 for c in sampled)


def test_partial_overlap_excluded_in_train_retained_in_eval():
    doc = _doc_with_salient_span()
    pool = [MentionSpan("det", 3, 5, "s2 w2")]
    train_out = generate_candidates(doc, pool, "train")
    assert all(c.provenance is not Provenance.EXCLUDED_PARTIAL for c in train_out)
    eval_out = generate_candidates(doc, pool, "eval")
    excluded = [c for c in eval_out if c.provenance is Provenance.EXCLUDED_PARTIAL]
    assert [c.span.key for c in excluded] == [(3, 5)]
    assert excluded[0].binary_label is None


def test_exact_match_folds_into_annotated_positive():
    doc = _doc_with_salient_span()
    pool = [MentionSpan("det", 2, 4, "s1 s2")]
    out = generate_candidates(doc, pool, "train")
    matching = [c for c in out if c.span.key == (2, 4)]
    assert len(matching) == 1
    assert matching[0].provenance is Provenance.ANNOTATED
    assert matching[0].binary_label == 1


def test_annotated_bad_entity_is_label_zero():
    doc = _doc_with_salient_span()
    out = generate_candidates(doc, (), "train")
    bad = [c for c in out if c.span.entity_id == "e2"]
    assert bad[0].provenance is Provenance.ANNOTATED
    assert bad[0].binary_label == 0


def test_out_of_range_phrase_is_domain_error():
    doc = _doc_with_salient_span()
    with pytest.raises(DataError):
        generate_candidates(doc, [MentionSpan("det", 50, 60, "x")], "train")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.integers(1, 3)), max_size=6))
def test_candidate_trichotomy(pool_specs):
    """Each pool phrase gets exactly one provenance, decided by overlap."""
    doc = _doc_with_salient_span()
    pool = [MentionSpan("det", s, min(s + l, 10), "x")
            for s, l in pool_specs if s < 10]
    out = generate_candidates(doc, pool, "eval")
    salient_spans = [m for m in doc.mentions if m.entity_id == "e1"]
    annotated_keys = {m.key for m in doc.mentions}
    unique = {p.key: p for p in pool}
    for key, phrase in unique.items():
        produced = [c for c in out
                    if c.span.key == key and c.provenance is not Provenance.ANNOTATED]
        if key in annotated_keys:
            assert not produced
            continue
        assert len(produced) == 1
        overlap = any(s.overlaps(phrase) for s in salient_spans)
        expected = (Provenance.EXCLUDED_PARTIAL if overlap
                    else Provenance.SAMPLED_NEGATIVE)
        assert produced[0].provenance is expected


# ---------------------------------------------------------------------------
# JSONL round trip
# ---------------------------------------------------------------------------

def _tiny_corpus() -> Corpus:
    return synth_generate(SyntheticConfig(n_docs=6, doc_len_range=(30, 40),
                                          vocab_size=20, negatives_per_doc=2,
                                          seed=3))


def test_corpus_round_trip_is_identity(tmp_path):
    corpus = _tiny_corpus()
    path = tmp_path / "corpus.jsonl"
    save_corpus(corpus, path)
    loaded = load_corpus(path)
    assert len(loaded) == len(corpus)
    for a, b in zip(corpus.documents, loaded.documents):
        assert a.doc_id == b.doc_id
        assert a.title == b.title and a.body == b.body
        assert a.split == b.split
        assert a.annotations == b.annotations
        assert a.mentions == b.mentions
        assert a.tokens == b.tokens


def test_missing_doc_id_errors_with_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = {"doc_id": "d", "title": "a", "body": "b", "split": "train",
            "entities": [], "mentions": []}
    bad = {k: v for k, v in good.items() if k != "doc_id"}
    path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(CorpusFormatError, match="line 2.*doc_id"):
        load_corpus(path)


def test_empty_corpus_is_valid(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert len(load_corpus(path)) == 0


def test_malformed_json_names_line(tmp_path):
    path = tmp_path / "mangled.jsonl"
    path.write_text("{not json}\n")
    with pytest.raises(CorpusFormatError, match="line 1"):
        load_corpus(path)


def test_mention_beyond_tokens_rejected(tmp_path):
    path = tmp_path / "overrun.jsonl"
    record = {"doc_id": "d", "title": "a b", "body": "", "split": "train",
              "entities": [{"entity_id": "e", "canonical_name": "a",
                            "aliases": [], "references": [],
                            "wiki_entity": None, "salience": "Good"}],
              "mentions": [{"entity_id": "e", "token_start": 0,
                            "token_end": 9, "surface": "a"}]}
    path.write_text(json.dumps(record) + "\n")
    with pytest.raises(CorpusFormatError):
        load_corpus(path)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def test_split_exact_ratios():
    corpus = synth_generate(SyntheticConfig(n_docs=100, doc_len_range=(30, 40),
                                            vocab_size=20, negatives_per_doc=2,
                                            seed=4))
    out = split_corpus(corpus, (0.8, 0.1, 0.1), seed=7)
    counts = {s: len(out.split_docs(s)) for s in Split}
    assert counts == {Split.TRAIN: 80, Split.VALID: 10, Split.TEST: 10}


def test_split_deterministic():
    corpus = _tiny_corpus()
    a = split_corpus(corpus, (0.5, 0.25, 0.25), seed=9)
    b = split_corpus(corpus, (0.5, 0.25, 0.25), seed=9)
    assert [d.split for d in a.documents] == [d.split for d in b.documents]


def test_split_bad_ratios_rejected():
    with pytest.raises(ValueError):
        split_corpus(_tiny_corpus(), (0.5, 0.2, 0.2), seed=0)


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

def test_synthetic_labels_satisfy_rule_exactly():
    config = SyntheticConfig(n_docs=30, doc_len_range=(50, 80), vocab_size=30,
                             salient_rule=SalientRule(3, 0.1),
                             negatives_per_doc=4, seed=21)
    corpus = synth_generate(config)
    checked = 0
    for doc in corpus.documents:
        for ann in doc.annotations:
            spans = doc.mentions_of(ann.entity_id)
            expected = config.salient_rule.applies(
                len(spans), first_offset_fraction(doc, ann.entity_id))
            assert binarize(ann.label) == int(expected)
            checked += 1
    assert checked > 50


def test_synthetic_rule_examples():
    rule = SalientRule(min_frequency=3, max_first_offset_fraction=0.1)
    assert rule.applies(4, 0.9)          # frequent, late
    assert not rule.applies(1, 0.9)      # rare, late
    assert rule.applies(1, 0.05)         # rare, early


def test_synthetic_deterministic():
    config = SyntheticConfig(n_docs=8, doc_len_range=(30, 40), vocab_size=20,
                             negatives_per_doc=2, seed=13)
    a, b = synth_generate(config), synth_generate(config)
    for da, db in zip(a.documents, b.documents):
        assert da.body == db.body
        assert da.annotations == db.annotations
        assert da.mentions == db.mentions


def test_synthetic_bad_length_range():
    with pytest.raises(ValueError, match="doc_len_range"):
        SyntheticConfig(doc_len_range=(50, 40))


# ---------------------------------------------------------------------------
# Window coverage
# ---------------------------------------------------------------------------

def test_coverage_full_window():
    corpus = _tiny_corpus()
    longest = max(len(d.tokens) for d in corpus.documents)
    assert coverage_within_window(corpus, longest) == (1.0, 1.0)


def test_coverage_hand_count():
    spec = spec_for("t a b c d e f g h i")
    annotations = [EntityAnnotation("e1", "c", SalienceLabel.PERFECT),
                   EntityAnnotation("e2", "h", SalienceLabel.EXCELLENT)]
    mentions = [MentionSpan("e1", 2, 3, "c"), MentionSpan("e2", 7, 8, "h")]
    doc = make_document("d", "t", "a b c d e f g h i", Split.TRAIN,
                        annotations, mentions, spec)
    corpus = Corpus(documents=[doc], tokenizer=spec)
    salient, _ = coverage_within_window(corpus, 5)
    assert salient == 0.5


def test_coverage_empty_corpus_errors():
    with pytest.raises(DataError, match="no mentions"):
        coverage_within_window(Corpus(documents=[], tokenizer=spec_for("x")), 10)


def test_document_rejects_unknown_mention_entity():
    spec = spec_for("t a b")
    with pytest.raises(DataError, match="unknown entity"):
        make_document("d", "t", "a b", Split.TRAIN, [],
                      [MentionSpan("ghost", 0, 1, "t")], spec)
