"""Micro bidirectional transformer encoder.

Pre-layer-norm residual blocks with learned absolute position embeddings.
A single forward produces one contextual vector per input token; padding
positions are masked out of attention so they never influence real rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor_engine as te
from .corpus import CAND_CLOSE_ID, CAND_OPEN_ID, MentionSpan
from .tensor_engine import ParameterSet, Tensor


class OverlapError(ValueError):
    """Candidate spans overlap; tagging needs a separate pass per group."""


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 128
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by "
                             f"n_heads {self.n_heads}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {"vocab_size": self.vocab_size, "d_model": self.d_model,
                "n_layers": self.n_layers, "n_heads": self.n_heads,
                "d_ff": self.d_ff, "max_len": self.max_len,
                "dropout_rate": self.dropout_rate, "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(**data)


class EncodeCounter:
    """Counts full encoder passes; used to verify re-encoding costs."""

    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0


encode_counter = EncodeCounter()


def init_encoder_params(config: EncoderConfig,
                        params: ParameterSet | None = None,
                        rng: np.random.Generator | None = None) -> ParameterSet:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains.

    Reserved token embeddings (tags, separators) use the same init scheme as
    ordinary tokens.
    """
    if params is None:
        params = ParameterSet()
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(config.seed))

    def glorot(fan_in: int, fan_out: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    d, h = config.d_model, config.d_ff
    params.add("tok_emb", rng.normal(0.0, 0.02, size=(config.vocab_size, d)))
    params.add("pos_emb", rng.normal(0.0, 0.02, size=(config.max_len, d)))
    for i in range(config.n_layers):
        p = f"layer{i}"
        params.add(f"{p}.ln1.gain", np.ones(d))
        params.add(f"{p}.ln1.bias", np.zeros(d))
        for name in ("Wq", "Wk", "Wv", "Wo"):
            params.add(f"{p}.attn.{name}", glorot(d, d))
        for name in ("bq", "bk", "bv", "bo"):
            params.add(f"{p}.attn.{name}", np.zeros(d))
        params.add(f"{p}.ln2.gain", np.ones(d))
        params.add(f"{p}.ln2.bias", np.zeros(d))
        params.add(f"{p}.ff.W1", glorot(d, h))
        params.add(f"{p}.ff.b1", np.zeros(h))
        params.add(f"{p}.ff.W2", glorot(h, d))
        params.add(f"{p}.ff.b2", np.zeros(d))
    params.add("ln_f.gain", np.ones(d))
    params.add("ln_f.bias", np.zeros(d))
    return params


def _attention(x: Tensor, params: ParameterSet, prefix: str,
               config: EncoderConfig, mask_bias: np.ndarray | None) -> Tensor:
    d_head = config.d_model // config.n_heads
    q = te.add(te.matmul(x, params[f"{prefix}.Wq"]), params[f"{prefix}.bq"])
    k = te.add(te.matmul(x, params[f"{prefix}.Wk"]), params[f"{prefix}.bk"])
    v = te.add(te.matmul(x, params[f"{prefix}.Wv"]), params[f"{prefix}.bv"])
    scale = 1.0 / np.sqrt(d_head)
    heads = []
    for h in range(config.n_heads):
        lo, hi = h * d_head, (h + 1) * d_head
        qh = te.slice_cols(q, lo, hi)
        kh = te.slice_cols(k, lo, hi)
        vh = te.slice_cols(v, lo, hi)
        scores = te.mul(te.matmul(qh, te.transpose(kh)), scale)
        if mask_bias is not None:
            scores = te.add(scores, mask_bias)
        attn = te.softmax(scores, axis=-1)
        heads.append(te.matmul(attn, vh))
    merged = te.concat(heads, axis=1)
    return te.add(te.matmul(merged, params[f"{prefix}.Wo"]), params[f"{prefix}.bo"])


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return te.mul(x, keep)


def encode(tokens: Sequence[int], attention_mask: Sequence[int] | None,
           params: ParameterSet, config: EncoderConfig,
           train_rng: np.random.Generator | None = None) -> Tensor:
    """Contextual representations, one row per token.

    `attention_mask` marks real tokens with 1 and padding with 0; masked key
    positions receive a large negative attention bias, so real rows match a
    padding-free forward. Deterministic unless `train_rng` enables dropout.
    """
    ids = np.asarray(tokens, dtype=np.intp)
    if ids.size == 0:
        raise ValueError("encode: empty token sequence")
    if ids.size > config.max_len:
        raise ValueError(f"encode: sequence length {ids.size} exceeds "
                         f"max_len {config.max_len}")
    if ids.max() >= config.vocab_size or ids.min() < 0:
        raise ValueError("encode: token id outside vocabulary")
    encode_counter.count += 1

    mask_bias = None
    if attention_mask is not None:
        mask = np.asarray(attention_mask, dtype=np.float64)
        if mask.shape != (ids.size,):
            raise ValueError("encode: attention_mask length mismatch")
        if (mask == 0.0).any():
            mask_bias = np.where(mask == 0.0, -1e30, 0.0)[None, :]

    x = te.add(te.embedding_gather(params["tok_emb"], ids),
               te.embedding_gather(params["pos_emb"], np.arange(ids.size)))
    x = _dropout(x, config.dropout_rate, train_rng)
    for i in range(config.n_layers):
        p = f"layer{i}"
        normed = te.layer_norm(x, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
        attn_out = _attention(normed, params, f"{p}.attn", config, mask_bias)
        x = te.add(x, _dropout(attn_out, config.dropout_rate, train_rng))
        normed = te.layer_norm(x, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
        ff = te.matmul(te.relu(te.add(te.matmul(normed, params[f"{p}.ff.W1"]),
                                      params[f"{p}.ff.b1"])),
                       params[f"{p}.ff.W2"])
        ff = te.add(ff, params[f"{p}.ff.b2"])
        x = te.add(x, _dropout(ff, config.dropout_rate, train_rng))
    return te.layer_norm(x, params["ln_f.gain"], params["ln_f.bias"])


# ---------------------------------------------------------------------------
# Candidate tags
# ---------------------------------------------------------------------------

def insert_candidate_tags(tokens: Sequence[int], spans: Sequence[MentionSpan],
                          max_len: int | None = None
                          ) -> tuple[list[int], dict[tuple[int, int], int]]:
    """Wrap each span in open/close tag tokens.

    Returns the tagged sequence and a map from the original (start, end) span
    to the index of its close tag. Spans must be pairwise non-overlapping;
    overlapping candidates need separate passes.
    """
    ordered = sorted(spans, key=lambda s: (s.token_start, s.token_end))
    for prev, cur in zip(ordered, ordered[1:]):
        if prev.overlaps(cur):
            raise OverlapError(f"spans {prev.key} and {cur.key} overlap")
    if ordered and ordered[-1].token_end > len(tokens):
        raise ValueError(f"span {ordered[-1].key} beyond sequence of {len(tokens)}")
    if max_len is not None and len(tokens) + 2 * len(ordered) > max_len:
        raise OverflowError(f"tagged length {len(tokens) + 2 * len(ordered)} "
                            f"exceeds window {max_len}")

    tagged: list[int] = []
    close_index: dict[tuple[int, int], int] = {}
    cursor = 0
    for span in ordered:
        tagged.extend(tokens[cursor:span.token_start])
        tagged.append(CAND_OPEN_ID)
        tagged.extend(tokens[span.token_start:span.token_end])
        tagged.append(CAND_CLOSE_ID)
        close_index[span.key] = len(tagged) - 1
        cursor = span.token_end
    tagged.extend(tokens[cursor:])
    return tagged, close_index
