"""Scaled dot-product attention, multi-head self-attention and the encoder block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .numerics import RngStream, Tensor


@dataclass
class AttentionParams:
    """Projection weights for self-attention.

    Keys carry no bias: a key bias shifts every score in a row by the same
    amount, which the softmax cancels, so it would be a dead parameter.
    """

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    n_heads: int

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        names = ("w_q", "b_q", "w_k", "w_v", "b_v", "w_o", "b_o")
        return {prefix + n: getattr(self, n) for n in names}

    @classmethod
    def init(cls, d_model: int, n_heads: int, rng: RngStream) -> "AttentionParams":
        check_heads(d_model, n_heads)
        std = 1.0 / math.sqrt(d_model)
        mats = [Tensor(rng.normal((d_model, d_model), std), requires_grad=True) for _ in range(4)]
        biases = [Tensor(np.zeros(d_model), requires_grad=True) for _ in range(3)]
        return cls(mats[0], biases[0], mats[1], mats[2], biases[1], mats[3], biases[2], n_heads)


@dataclass
class TransformerBlockParams:
    attention: AttentionParams
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    dropout: float = 0.1
    norm_first: bool = True
    ffn_activation: str = "gelu"

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = self.attention.named(prefix + "attn.")
        for n in ("ln1_gamma", "ln1_beta", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln2_gamma", "ln2_beta"):
            out[prefix + n] = getattr(self, n)
        return out

    @classmethod
    def init(
        cls,
        d_model: int,
        n_heads: int,
        rng: RngStream,
        ffn_expansion: int = 4,
        dropout: float = 0.1,
        norm_first: bool = True,
        ffn_activation: str = "gelu",
    ) -> "TransformerBlockParams":
        if ffn_expansion < 1:
            raise ConfigError(f"ffn_expansion must be >= 1, got {ffn_expansion}")
        d_ff = ffn_expansion * d_model
        attn = AttentionParams.init(d_model, n_heads, rng)

        def param(values):
            return Tensor(values, requires_grad=True)

        return cls(
            attention=attn,
            ln1_gamma=param(np.ones(d_model)),
            ln1_beta=param(np.zeros(d_model)),
            ffn_w1=param(rng.normal((d_model, d_ff), 1.0 / math.sqrt(d_model))),
            ffn_b1=param(np.zeros(d_ff)),
            ffn_w2=param(rng.normal((d_ff, d_model), 1.0 / math.sqrt(d_ff))),
            ffn_b2=param(np.zeros(d_model)),
            ln2_gamma=param(np.ones(d_model)),
            ln2_beta=param(np.zeros(d_model)),
            dropout=dropout,
            norm_first=norm_first,
            ffn_activation=ffn_activation,
        )


def check_heads(d_model: int, n_heads: int) -> None:
    if n_heads < 1 or d_model < n_heads or d_model % n_heads:
        raise ConfigError(f"n_heads={n_heads} must divide d_model={d_model}")


def block_param_count(d_model: int, ffn_expansion: int = 4) -> int:
    """Closed-form parameter count of one encoder block."""
    d_ff = ffn_expansion * d_model
    attention = 4 * d_model * d_model + 3 * d_model
    ffn = d_model * d_ff + d_ff + d_ff * d_model + d_model
    norms = 4 * d_model
    return attention + ffn + norms


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic matrix softmax(q k^T / sqrt(d_k)) over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    d_k = q.shape[-1]
    k_t = nx.transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2))
    scores = nx.scale(nx.matmul(q, k_t), 1.0 / math.sqrt(d_k))
    return nx.softmax_rows(scores)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key/value length mismatch: {k.shape} vs {v.shape}")
    return nx.matmul(attention_weights(q, k), v)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, length, d = x.shape
    x = nx.reshape(x, (*lead, length, n_heads, d // n_heads))
    nd = len(lead)
    return nx.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, length, d_k = x.shape
    nd = len(lead)
    x = nx.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    return nx.reshape(x, (*lead, length, h * d_k))


def multi_head_attention(
    x: Tensor,
    params: AttentionParams,
    rng: RngStream | None = None,
    training: bool = False,
    return_weights: bool = False,
):
    """Self-attention with queries, keys and values all projected from ``x``.

    With ``return_weights`` the per-head attention matrices
    ``[..., h, L, L]`` are returned alongside the output.
    """
    check_heads(x.shape[-1], params.n_heads)
    h = params.n_heads
    q = _split_heads(nx.linear(x, params.w_q, params.b_q), h)
    k = _split_heads(nx.linear(x, params.w_k), h)
    v = _split_heads(nx.linear(x, params.w_v, params.b_v), h)
    weights = attention_weights(q, k)
    heads = nx.matmul(weights, v)
    out = nx.linear(_merge_heads(heads), params.w_o, params.b_o)
    return (out, weights) if return_weights else out


def feed_forward(x: Tensor, params: TransformerBlockParams) -> Tensor:
    hidden = nx.activation(nx.linear(x, params.ffn_w1, params.ffn_b1), params.ffn_activation)
    return nx.linear(hidden, params.ffn_w2, params.ffn_b2)


def transformer_block(
    x: Tensor, params: TransformerBlockParams, rng: RngStream | None = None, training: bool = False
) -> Tensor:
    p = params.dropout
    if params.norm_first:
        normed = nx.layer_norm(x, params.ln1_gamma, params.ln1_beta)
        x = nx.add(x, nx.dropout(multi_head_attention(normed, params.attention, rng, training), p, rng, training))
        normed = nx.layer_norm(x, params.ln2_gamma, params.ln2_beta)
        return nx.add(x, nx.dropout(feed_forward(normed, params), p, rng, training))
    attn = nx.dropout(multi_head_attention(x, params.attention, rng, training), p, rng, training)
    x = nx.layer_norm(nx.add(x, attn), params.ln1_gamma, params.ln1_beta)
    ffn = nx.dropout(feed_forward(x, params), p, rng, training)
    return nx.layer_norm(nx.add(x, ffn), params.ln2_gamma, params.ln2_beta)
