"""Post-norm multi-head Transformer encoder.

Per layer, for every element i::

    h~_i  = sum_m W_m sum_j A^m_ij V_m x_j          (attention)
    h_i   = LayerNorm(x_i + h~_i)
    x~_i  = W_2 GELU(W_1 h_i + b_1) + b_2           (feed-forward)
    x'_i  = LayerNorm(h_i + x~_i)

with A^m_ij proportional to exp((Q_m x_i)^T (K_m x_j) * scale). No term
depends on where an element sits in the sequence, so the encoder is
permutation-equivariant; order lives only in the input embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .engine import Tensor, ops, parameter

INIT_STD = 0.02


@dataclass
class LayerParams:
    """Weights of one encoder layer. Head projections are stacked on axis 0."""

    query: Tensor  # [M, d, d_h]
    key: Tensor  # [M, d, d_h]
    value: Tensor  # [M, d, d_h]
    mix: Tensor  # [M, d_h, d]
    ff1_w: Tensor  # [d, d_ff]
    ff1_b: Tensor  # [d_ff]
    ff2_w: Tensor  # [d_ff, d]
    ff2_b: Tensor  # [d]
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def __post_init__(self):
        heads, d, d_h = self.query.shape
        if heads * d_h != d:
            raise ValueError(f"{heads} heads x {d_h} != hidden size {d}")
        for t in (self.key, self.value):
            if t.shape != self.query.shape:
                raise ValueError(f"head projection shape {t.shape} != {self.query.shape}")
        if self.mix.shape != (heads, d_h, d):
            raise ValueError(f"head mixer shape {self.mix.shape} != {(heads, d_h, d)}")
        d_ff = self.ff1_w.shape[1]
        expected = {"ff1_w": (d, d_ff), "ff1_b": (d_ff,), "ff2_w": (d_ff, d), "ff2_b": (d,),
                    "ln1_gain": (d,), "ln1_bias": (d,), "ln2_gain": (d,), "ln2_bias": (d,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def heads(self) -> int:
        return self.query.shape[0]

    @property
    def hidden(self) -> int:
        return self.query.shape[1]

    @property
    def head_dim(self) -> int:
        return self.query.shape[2]

    @classmethod
    def init(cls, d: int, heads: int, d_ff: int, rng: np.random.Generator, dtype=None) -> "LayerParams":
        if d % heads:
            raise ValueError(f"hidden size {d} not divisible by {heads} heads")
        d_h = d // heads

        def normal(*shape):
            return parameter(rng.normal(0.0, INIT_STD, size=shape), dtype=dtype)

        def const(value, n):
            return parameter(np.full(n, value), dtype=dtype)

        return cls(
            query=normal(heads, d, d_h),
            key=normal(heads, d, d_h),
            value=normal(heads, d, d_h),
            mix=normal(heads, d_h, d),
            ff1_w=normal(d, d_ff),
            ff1_b=const(0.0, d_ff),
            ff2_w=normal(d_ff, d),
            ff2_b=const(0.0, d),
            ln1_gain=const(1.0, d),
            ln1_bias=const(0.0, d),
            ln2_gain=const(1.0, d),
            ln2_bias=const(0.0, d),
        )

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class AttentionRecord:
    layer: int
    head: int
    weights: np.ndarray  # [N, N] or [B, N, N]; rows sum to 1


def _key_bias(valid: Optional[np.ndarray], batch: int, n: int, dtype) -> Optional[np.ndarray]:
    if valid is None:
        return None
    valid = np.asarray(valid, dtype=bool).reshape(batch, n)
    if not valid.any(axis=1).all():
        raise ValueError("every sequence needs at least one valid element")
    bias = np.where(valid, 0.0, -np.inf).astype(dtype)
    return bias[:, None, None, :]


def multi_head_attention(
    x: Tensor,
    params: LayerParams,
    capture: bool = False,
    valid: Optional[np.ndarray] = None,
    scaled: bool = True,
    layer_index: int = 0,
) -> tuple[Tensor, Optional[list[AttentionRecord]]]:
    """Attention sublayer on ``x`` of shape [N, d] or [B, N, d].

    ``valid`` marks real (non-padding) elements; invalid keys get -inf logits.
    """
    unbatched = x.ndim == 2
    if unbatched:
        x = x.reshape(1, *x.shape)
    batch, n, d = x.shape
    if d != params.hidden:
        raise ValueError(f"input width {d} != layer width {params.hidden}")

    xh = x.reshape(batch, 1, n, d)
    q = ops.matmul(xh, params.query)  # [B, M, N, d_h]
    k = ops.matmul(xh, params.key)
    v = ops.matmul(xh, params.value)
    logits = ops.matmul(q, ops.swap_last(k))
    if scaled:
        logits = logits * (1.0 / math.sqrt(params.head_dim))
    bias = _key_bias(valid, batch, n, x.dtype)
    if bias is not None:
        logits = logits + bias
    attn = ops.softmax(logits, axis=-1)  # [B, M, N, N]
    per_head = ops.matmul(ops.matmul(attn, v), params.mix)  # [B, M, N, d]
    out = ops.sum(per_head, axis=1)

    records = None
    if capture:
        w = attn.data[0] if unbatched else attn.data
        records = [
            AttentionRecord(layer_index, m, (w[m] if unbatched else w[:, m]).copy())
            for m in range(params.heads)
        ]
    if unbatched:
        out = out.reshape(n, d)
    return out, records


def feed_forward(h: Tensor, params: LayerParams) -> Tensor:
    return ops.linear(ops.gelu(ops.linear(h, params.ff1_w, params.ff1_b)), params.ff2_w, params.ff2_b)


def transformer_layer(
    x: Tensor,
    params: LayerParams,
    capture: bool = False,
    valid: Optional[np.ndarray] = None,
    scaled: bool = True,
    layer_index: int = 0,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    eps: float = 1e-12,
):
    """One encoder layer. Returns the new features, plus records when capturing."""
    attended, records = multi_head_attention(x, params, capture, valid, scaled, layer_index)
    attended = ops.dropout(attended, dropout, rng)
    h = ops.layer_norm(x + attended, params.ln1_gain, params.ln1_bias, eps)
    ff = ops.dropout(feed_forward(h, params), dropout, rng)
    out = ops.layer_norm(h + ff, params.ln2_gain, params.ln2_bias, eps)
    return (out, records) if capture else out


def encoder_forward(
    x: Tensor,
    layers: Sequence[LayerParams],
    capture: bool = False,
    valid: Optional[np.ndarray] = None,
    scaled: bool = True,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, Optional[list[AttentionRecord]]]:
    if not layers:
        raise ValueError("encoder needs at least one layer")
    records: Optional[list[AttentionRecord]] = [] if capture else None
    for index, params in enumerate(layers):
        result = transformer_layer(x, params, capture, valid, scaled, index, dropout, rng)
        if capture:
            x, layer_records = result
            records.extend(layer_records)
        else:
            x = result
    return x, records
