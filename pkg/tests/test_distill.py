"""Distillation: temperature scaling, ensemble averaging, the soft-label
loss and its optimum, transfer-set scoping, and student determinism."""

import math

import numpy as np
import pytest

from salience_lab.corpus import (DataError, Split, SyntheticConfig,
                                 split_corpus, synth_generate, tokenize)
from salience_lab.distill import (DistillConfig, SoftLabelSet, TeacherEnsemble,
                                  build_transfer_set, distill_loss,
                                  distill_train, ensemble_predict,
                                  temperature_score)
from salience_lab.encoder import EncoderConfig
from salience_lab.heads import HeadKind, TrainConfig, score_document, train
from salience_lab.tensor_engine import ParameterSet, Tensor, grad_check


def small_corpus(n_docs=10, seed=6):
    config = SyntheticConfig(n_docs=n_docs, doc_len_range=(24, 30),
                             vocab_size=20, negatives_per_doc=2, seed=seed)
    return split_corpus(synth_generate(config), (0.6, 0.2, 0.2), seed=seed)


def encoder_config(corpus, seed=1):
    return EncoderConfig(vocab_size=len(corpus.tokenizer.vocab), d_model=8,
                         n_layers=1, n_heads=2, d_ff=12, max_len=64, seed=seed)


def quick_model(corpus, seed=1, head=HeadKind.POOLING):
    config = TrainConfig(epochs=1, batch_size=4, learning_rate=1e-3, seed=seed,
                         head_kind=head)
    return train(corpus, encoder_config(corpus, seed), config).model


# ---------------------------------------------------------------------------
# temperature
# ---------------------------------------------------------------------------

def test_temperature_zero_logit_is_half():
    for t in (0.1, 1.0, 7.0):
        assert temperature_score(0.0, t) == 0.5


def test_temperature_one_is_plain_sigmoid():
    assert temperature_score(1.3, 1.0) == pytest.approx(1 / (1 + math.exp(-1.3)))


def test_temperature_hand_value():
    assert temperature_score(1.0, 0.5) == pytest.approx(0.8807970779778823)


def test_temperature_must_be_positive():
    with pytest.raises(ValueError):
        temperature_score(1.0, 0.0)


# ---------------------------------------------------------------------------
# ensemble prediction
# ---------------------------------------------------------------------------

def test_single_member_ensemble_is_identity():
    corpus = small_corpus()
    member = quick_model(corpus)
    soft = ensemble_predict(TeacherEnsemble([member]), corpus, split=Split.TRAIN)
    doc = corpus.split_docs(Split.TRAIN)[0]
    ids = tokenize(doc.title, doc.body, member.tokenizer)
    direct = score_document(member, ids, list(doc.mentions))
    for scored in direct.scored:
        key = (doc.doc_id, scored.span.token_start, scored.span.token_end)
        assert soft.scores[key] == pytest.approx(scored.score, abs=1e-15)


def test_ensemble_mean_of_member_scores():
    corpus = small_corpus()
    members = [quick_model(corpus, seed=s) for s in (1, 2, 3, 4)]
    ensemble_scores = ensemble_predict(TeacherEnsemble(members), corpus,
                                       split=Split.TRAIN).scores
    individual = [ensemble_predict(TeacherEnsemble([m]), corpus,
                                   split=Split.TRAIN).scores for m in members]
    for key, value in ensemble_scores.items():
        expected = sum(scores[key] for scores in individual) / len(members)
        assert value == pytest.approx(expected, abs=1e-12)
        assert min(s[key] for s in individual) - 1e-12 <= value \
               <= max(s[key] for s in individual) + 1e-12


def test_ensemble_member_order_irrelevant():
    corpus = small_corpus()
    members = [quick_model(corpus, seed=s) for s in (1, 2, 3)]
    forward = ensemble_predict(TeacherEnsemble(members), corpus, split=Split.TRAIN)
    reverse = ensemble_predict(TeacherEnsemble(members[::-1]), corpus,
                               split=Split.TRAIN)
    assert forward.scores.keys() == reverse.scores.keys()
    for key in forward.scores:
        assert forward.scores[key] == pytest.approx(reverse.scores[key], abs=1e-12)


def test_ensemble_requires_members():
    with pytest.raises(ValueError):
        TeacherEnsemble([])


# ---------------------------------------------------------------------------
# distillation loss
# ---------------------------------------------------------------------------

def test_distill_loss_half_target_minimum_at_half():
    at_half = distill_loss(Tensor([[0.0]]), [0.5]).item()
    assert at_half == pytest.approx(math.log(2))
    for logit in (-2.0, -0.5, 0.5, 2.0):
        assert distill_loss(Tensor([[logit]]), [0.5]).item() > at_half


def test_distill_loss_at_teacher_equals_entropy():
    teacher = [0.2, 0.5, 0.9]
    logits = Tensor([[math.log(p / (1 - p))] for p in teacher])
    expected = -sum(p * math.log(p) + (1 - p) * math.log(1 - p) for p in teacher)
    assert distill_loss(logits, teacher).item() == pytest.approx(expected, abs=1e-12)


def test_distill_loss_gradient_zero_at_teacher():
    teacher = [0.3, 0.7]
    params = ParameterSet()
    logits = params.add("z", np.array([[math.log(0.3 / 0.7)],
                                       [math.log(0.7 / 0.3)]]))
    err = grad_check(lambda: distill_loss(logits, teacher), params, eps=1e-5)
    assert err < 1e-4
    params.zero_grads()
    distill_loss(logits, teacher).backward()
    np.testing.assert_allclose(logits.grad, 0.0, atol=1e-12)


def test_distill_loss_student_temperature_scales_logits():
    # with T_s, the loss sees sigmoid(z / T_s)
    direct = distill_loss(Tensor([[2.0]]), [0.8], t_student=2.0).item()
    equivalent = distill_loss(Tensor([[1.0]]), [0.8], t_student=1.0).item()
    assert direct == pytest.approx(equivalent, abs=1e-12)


# ---------------------------------------------------------------------------
# transfer sets
# ---------------------------------------------------------------------------

def test_transfer_set_keys_are_train_candidates():
    corpus = small_corpus()
    member = quick_model(corpus)
    transfer = build_transfer_set(corpus, TeacherEnsemble([member]), 1.0)
    train_keys = set()
    for doc in corpus.split_docs(Split.TRAIN):
        for m in doc.mentions:
            train_keys.add((doc.doc_id, m.token_start, m.token_end))
    assert set(transfer.scores) <= train_keys
    assert len(transfer) > 0


def test_transfer_set_t1_equals_raw_prediction():
    corpus = small_corpus()
    ensemble = TeacherEnsemble([quick_model(corpus)])
    a = build_transfer_set(corpus, ensemble, 1.0)
    b = ensemble_predict(ensemble, corpus, split=Split.TRAIN)
    assert a.scores == b.scores


def test_low_teacher_temperature_sharpens():
    corpus = small_corpus()
    ensemble = TeacherEnsemble([quick_model(corpus)])
    raw = build_transfer_set(corpus, ensemble, 1.0)
    sharp = build_transfer_set(corpus, ensemble, 0.1)
    moved = 0
    for key, value in raw.scores.items():
        if abs(value - 0.5) > 1e-6:
            assert abs(sharp.scores[key] - 0.5) > abs(value - 0.5) - 1e-12
            moved += 1
    assert moved > 0


def test_soft_label_set_round_trip(tmp_path):
    labels = SoftLabelSet({("d1", 0, 2): 0.25, ("d0", 5, 6): 0.75})
    path = tmp_path / "soft.jsonl"
    labels.save(path)
    assert SoftLabelSet.load(path).scores == labels.scores


def test_soft_label_set_missing_key_errors():
    labels = SoftLabelSet({})
    from salience_lab.corpus import MentionSpan
    with pytest.raises(DataError, match="missing"):
        labels.get("d9", MentionSpan("e", 0, 1, "x"))


# ---------------------------------------------------------------------------
# student training
# ---------------------------------------------------------------------------

def test_distill_train_smoke_and_determinism():
    corpus = small_corpus()
    ensemble = TeacherEnsemble([quick_model(corpus)])
    transfer = build_transfer_set(corpus, ensemble, 1.0)
    config = DistillConfig(epochs=1, batch_size=4, learning_rate=1e-3, seed=11)
    student_a, history = distill_train(encoder_config(corpus, 11),
                                       HeadKind.POOLING, transfer, corpus, config)
    assert len(history) == 1 and math.isfinite(history[0].train_loss)
    student_b, _ = distill_train(encoder_config(corpus, 11), HeadKind.POOLING,
                                 transfer, corpus, config)
    for name in student_a.params.names():
        assert student_a.params[name].data.tobytes() == \
               student_b.params[name].data.tobytes()


def test_distill_train_empty_transfer_errors():
    corpus = small_corpus()
    with pytest.raises(DataError, match="empty transfer"):
        distill_train(encoder_config(corpus), HeadKind.POOLING,
                      SoftLabelSet({}), corpus, DistillConfig(epochs=1))


def test_distill_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(t_teacher=0.0)
    with pytest.raises(ValueError):
        DistillConfig(t_student=-1.0)


def test_student_temperature_preserves_ranking():
    logits = np.array([-1.2, 0.3, 2.0, 0.9])
    for temperature in (0.1, 0.5, 2.0, 10.0):
        scaled = [temperature_score(z, temperature) for z in logits]
        assert np.argsort(scaled).tolist() == np.argsort(logits).tolist()
