"""Causal self-attention with grouped-query heads, partial rotary application,
and optional QK-Norm.

The pipeline per head is fixed: project, optionally RMS-normalize queries
and keys over the head dimension (one learned gain per channel, shared by
all heads), rotate the rotary slice, scale scores by 1 / sqrt(head_dim),
mask, softmax, mix values, and project out.  Normalizing before rotation
keeps the rotation an isometry of already-unit-RMS vectors, which is what
bounds the attention logits (see ``qk_logit_bound``).

Grouped-query attention shares each key/value head across a contiguous
group of query heads; ``n_kv_heads == n_heads`` is exactly standard
multi-head attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ParameterError, ShapeError
from .rope import RopeCache, RopeConfig, apply_partial_rope
from .tensor import (Tensor, masked_softmax_lastdim, matmul, mul, reshape,
                     rms_norm, softmax_lastdim, transpose)

# Fixed ordering: QK-Norm happens before the rotary rotation, never after.
QK_NORM_BEFORE_ROTATION = True


@dataclass(frozen=True)
class AttentionConfig:
    """Head layout for one attention operator."""

    model_dim: int
    n_heads: int
    n_kv_heads: int
    rope: RopeConfig
    qk_norm: bool = False

    def __post_init__(self):
        if self.model_dim <= 0 or self.n_heads <= 0 or self.n_kv_heads <= 0:
            raise ParameterError("model_dim, n_heads, and n_kv_heads must be positive")
        if self.model_dim % self.n_heads != 0:
            raise ParameterError(
                f"model_dim {self.model_dim} is not divisible by n_heads {self.n_heads}")
        if self.n_heads % self.n_kv_heads != 0:
            raise ParameterError(
                f"n_kv_heads {self.n_kv_heads} must divide n_heads {self.n_heads}")
        if self.rope.head_dim != self.model_dim // self.n_heads:
            raise ParameterError(
                f"rotary head_dim {self.rope.head_dim} != attention head_dim "
                f"{self.model_dim // self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads


@dataclass
class QkNormParams:
    """Learned per-channel gains for query/key RMS normalization."""

    gain_q: Tensor
    gain_k: Tensor
    eps: float = 1e-6


@dataclass
class AttentionParams:
    """Projection weights (no biases) and optional QK-Norm gains."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    qk: Optional[QkNormParams] = None


def init_attention_params(config: AttentionConfig, rng: np.random.Generator,
                          std: float = 0.02, out_std: Optional[float] = None
                          ) -> AttentionParams:
    """Gaussian projection weights; QK gains start at one."""
    d, hd = config.model_dim, config.head_dim
    q_width = config.n_heads * hd
    kv_width = config.n_kv_heads * hd
    params = AttentionParams(
        wq=Tensor(rng.normal(0.0, std, (d, q_width)), requires_grad=True),
        wk=Tensor(rng.normal(0.0, std, (d, kv_width)), requires_grad=True),
        wv=Tensor(rng.normal(0.0, std, (d, kv_width)), requires_grad=True),
        wo=Tensor(rng.normal(0.0, out_std if out_std is not None else std,
                             (q_width, d)), requires_grad=True),
    )
    if config.qk_norm:
        params.qk = QkNormParams(
            gain_q=Tensor(np.ones(hd), requires_grad=True),
            gain_k=Tensor(np.ones(hd), requires_grad=True),
        )
    return params


def qk_normalize(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """RMS-normalize over the trailing head dimension, then apply the gain."""
    return rms_norm(x, gain, eps)


def qk_logit_bound(params: AttentionParams, config: AttentionConfig) -> float:
    """Largest achievable |pre-softmax logit| under QK-Norm.

    After normalization, |q| <= max|gain_q| * sqrt(head_dim) per head row
    and likewise for k; rotation preserves norms and the score divides by
    sqrt(head_dim), so |q . k| / sqrt(head_dim) is at most
    max|gain_q| * max|gain_k| * sqrt(head_dim).
    """
    if params.qk is None:
        raise ParameterError("qk_logit_bound needs QK-Norm parameters")
    gq = float(np.abs(params.qk.gain_q.data).max())
    gk = float(np.abs(params.qk.gain_k.data).max())
    return gq * gk * math.sqrt(config.head_dim)


def causal_mask(seq: int) -> np.ndarray:
    """Boolean [seq, seq] keep-mask: True at or below the diagonal.

    False entries act as negative-infinity logits inside the masked
    softmax, so position ``i`` can only attend to positions ``<= i``.
    """
    if seq < 1:
        raise ParameterError(f"causal_mask needs seq >= 1, got {seq}")
    return np.tril(np.ones((seq, seq), dtype=bool))


def attention_forward(x: Tensor, params: AttentionParams, config: AttentionConfig,
                      cache: Optional[RopeCache], causal: bool = True,
                      collect: Optional[dict] = None) -> Tensor:
    """Full attention pass over ``x`` of shape [batch, seq, model_dim].

    ``cache=None`` removes the rotary stage entirely (a zero-fraction cache
    is computationally identical).  ``causal=False`` drops the mask and
    exists for order-equivariance checks, not for language modeling.
    ``collect``, if a dict, receives copies of the scaled pre-mask scores,
    the attention weights (both [batch, n_heads, seq, seq]), and the raw
    value projection [batch, seq, n_kv_heads * head_dim].
    """
    if x.ndim != 3:
        raise ShapeError(f"attention_forward: need [batch, seq, model_dim], got {x.shape}")
    if x.shape[-1] != config.model_dim:
        raise ShapeError(
            f"attention_forward: model_dim {x.shape[-1]} != configured {config.model_dim}")
    if config.qk_norm and params.qk is None:
        raise ParameterError("config enables qk_norm but params carry no gains")
    batch, seq, _ = x.shape
    heads, kv_heads = config.n_heads, config.n_kv_heads
    hd, group = config.head_dim, config.group_size

    q = matmul(x, params.wq)
    k = matmul(x, params.wk)
    v = matmul(x, params.wv)
    if collect is not None:
        collect["v"] = v.data.copy()

    # [batch, seq, heads * hd] -> [batch, heads, seq, hd]
    q = transpose(reshape(q, (batch, seq, heads, hd)), (0, 2, 1, 3))
    k = transpose(reshape(k, (batch, seq, kv_heads, hd)), (0, 2, 1, 3))

    if config.qk_norm:
        q = qk_normalize(q, params.qk.gain_q, params.qk.eps)
        k = qk_normalize(k, params.qk.gain_k, params.qk.eps)
    if cache is not None:
        q = apply_partial_rope(q, cache)
        k = apply_partial_rope(k, cache)

    # Group query heads over their shared kv head and let matmul broadcast.
    q = reshape(q, (batch, kv_heads, group, seq, hd))
    k_t = reshape(transpose(k, (0, 1, 3, 2)), (batch, kv_heads, 1, hd, seq))
    scores = mul(matmul(q, k_t), 1.0 / math.sqrt(hd))
    if collect is not None:
        collect["scores"] = scores.data.reshape(batch, heads, seq, seq).copy()

    if causal:
        weights = masked_softmax_lastdim(scores, causal_mask(seq))
    else:
        weights = softmax_lastdim(scores)
    if collect is not None:
        collect["weights"] = weights.data.reshape(batch, heads, seq, seq).copy()

    v = transpose(reshape(v, (batch, seq, kv_heads, hd)), (0, 2, 1, 3))
    v = reshape(v, (batch, kv_heads, 1, seq, hd))
    mixed = matmul(weights, v)  # [batch, kv_heads, group, seq, hd]
    mixed = transpose(reshape(mixed, (batch, heads, seq, hd)), (0, 2, 1, 3))
    mixed = reshape(mixed, (batch, seq, heads * hd))
    return matmul(mixed, params.wo)
