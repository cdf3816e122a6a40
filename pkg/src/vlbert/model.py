"""The single-stream visual-linguistic encoder with its prediction heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .embedding import EmbeddingTables, Features, InputSequence, Kind, featurize, geometry_embeddings
from .engine import Tensor, get_default_dtype, ops, parameter
from .transformer import INIT_STD, AttentionRecord, LayerParams, encoder_forward
from .world import NUM_CATEGORIES, DetectorParams


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 64
    layers: int = 4
    heads: int = 4
    d_ff: int = 256
    d_app: int = 32
    d_g: int = 32
    max_positions: int = 128
    num_categories: int = NUM_CATEGORIES
    attention_scaled: bool = True
    embedding_layer_norm: bool = True
    dropout: float = 0.0

    def validate(self) -> None:
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d_g % 8:
            raise ValueError(f"d_g={self.d_g} must be divisible by 8")
        for name in ("vocab_size", "d", "layers", "heads", "d_ff", "d_app", "d_g", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class Batch:
    """Padded numeric view of several InputSequences."""

    token_ids: np.ndarray  # [B, N]
    segments: np.ndarray
    positions: np.ndarray
    kinds: np.ndarray
    pooled: np.ndarray  # [B, N, 48]
    geometry: np.ndarray  # [B, N, d_g]
    valid: np.ndarray  # [B, N] bool
    text_only: np.ndarray  # [B] bool
    lengths: list[int]

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]


def collate(features: Sequence[Features], d_g: int) -> Batch:
    b = len(features)
    n = max(len(f.token_ids) for f in features)

    def pad(name, fill=0, tail=()):
        first = getattr(features[0], name)
        out = np.full((b, n) + tail, fill, dtype=first.dtype)
        for i, f in enumerate(features):
            arr = getattr(f, name)
            out[i, : len(arr)] = arr
        return out

    boxes = np.zeros((b, n, 4))
    valid = np.zeros((b, n), dtype=bool)
    for i, f in enumerate(features):
        boxes[i, : len(f.boxes)] = f.boxes
        valid[i, : len(f.token_ids)] = True
    return Batch(
        token_ids=pad("token_ids"),
        segments=pad("segments"),
        positions=pad("positions"),
        kinds=pad("kinds", fill=-1),
        pooled=pad("pooled", tail=(features[0].pooled.shape[1],)),
        geometry=geometry_embeddings(boxes, d_g),
        valid=valid,
        text_only=np.array([f.text_only for f in features]),
        lengths=[len(f.token_ids) for f in features],
    )


class Head:
    """Affine map from model width to ``out`` scores."""

    def __init__(self, d: int, out: int, rng: np.random.Generator, dtype=None):
        self.weight = parameter(rng.normal(0.0, INIT_STD, size=(d, out)), dtype=dtype)
        self.bias = parameter(np.zeros(out), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}


PRETRAIN_HEADS = ("mlm", "roi_cls", "nsp")


class VLBert:
    """Embeddings, detector stub, encoder layers and named heads.

    Heads are created on demand with :meth:`add_head`; the three
    pretraining heads exist from the start.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=None):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype or get_default_dtype())
        rng = np.random.default_rng(seed)
        self._rng = rng
        d = config.d
        self.tables = EmbeddingTables.init(config.vocab_size, d, config.d_app, config.d_g,
                                           config.max_positions, rng, self.dtype)
        self.detector = DetectorParams.init(config.d_app, rng, self.dtype)
        self.embed_ln_gain = parameter(np.ones(d), dtype=self.dtype)
        self.embed_ln_bias = parameter(np.zeros(d), dtype=self.dtype)
        self.layers = [LayerParams.init(d, config.heads, config.d_ff, rng, self.dtype) for _ in range(config.layers)]
        self.heads: dict[str, Head] = {}
        self.add_head("mlm", config.vocab_size)
        self.add_head("roi_cls", config.num_categories)
        self.add_head("nsp", 1)
        self.tune_detector = True

    # --- parameters -------------------------------------------------------

    def add_head(self, name: str, out: int, seed: Optional[int] = None) -> Head:
        rng = self._rng if seed is None else np.random.default_rng(seed)
        head = Head(self.config.d, out, rng, self.dtype)
        self.heads[name] = head
        return head

    def named_parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        named.update(self.tables.named_parameters("embed."))
        if self.config.embedding_layer_norm:
            named["embed.ln_gain"] = self.embed_ln_gain
            named["embed.ln_bias"] = self.embed_ln_bias
        named.update(self.detector.named_parameters("detector."))
        for i, layer in enumerate(self.layers):
            named.update(layer.named_parameters(f"encoder.{i}."))
        for name, head in self.heads.items():
            named.update(head.named_parameters(f"head.{name}."))
        return dict(sorted(named.items()))

    def parameters(self, trainable_only: bool = True) -> list[Tensor]:
        return [p for p in self.named_parameters().values() if p.requires_grad or not trainable_only]

    def set_detector_tuning(self, enabled: bool) -> None:
        """Freeze or unfreeze the detector head; frozen params never receive grad."""
        self.tune_detector = bool(enabled)
        for p in self.detector.named_parameters().values():
            p.requires_grad = self.tune_detector
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    # --- forward -----------------------------------------------------------

    def featurize(self, sequences: Sequence[InputSequence]) -> Batch:
        return collate([featurize(s) for s in sequences], self.config.d_g)

    def embed(self, batch: Batch) -> Tensor:
        t = self.tables
        token = ops.embedding_lookup(t.token, batch.token_ids)
        segment = ops.embedding_lookup(t.segment, batch.segments)
        if batch.positions.max() >= self.config.max_positions:
            raise ValueError(f"sequence position {batch.positions.max()} exceeds table size")
        position = ops.embedding_lookup(t.position, batch.positions)
        appearance = self.detector(Tensor(batch.pooled, dtype=self.dtype))
        geometry = Tensor(batch.geometry, dtype=self.dtype)
        visual = ops.linear(ops.concat([appearance, geometry], axis=-1), t.visual_weight, t.visual_bias)
        if batch.text_only.any():
            text = batch.text_only.astype(self.dtype)[:, None, None]
            visual = visual * (1.0 - text) + ops.mul(t.text_visual, np.broadcast_to(text, visual.shape))
        x = token + visual + segment + position
        if self.config.embedding_layer_norm:
            x = ops.layer_norm(x, self.embed_ln_gain, self.embed_ln_bias)
        return x

    def encode(self, batch: Batch, capture: bool = False, rng: Optional[np.random.Generator] = None
               ) -> tuple[Tensor, Optional[list[AttentionRecord]]]:
        x = self.embed(batch)
        return encoder_forward(x, self.layers, capture=capture, valid=batch.valid,
                               scaled=self.config.attention_scaled, dropout=self.config.dropout, rng=rng)

    def forward(self, sequences: Sequence[InputSequence], capture: bool = False):
        batch = self.featurize(sequences)
        out, records = self.encode(batch, capture=capture)
        return out, batch, records

    def head_scores(self, name: str, features: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
        """Apply head ``name`` to the features at ``(rows[k], cols[k])``."""
        picked = ops.index(features, (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)))
        return self.heads[name](picked)


def positions_of_kind(batch: Batch, kind: Kind) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.nonzero(batch.kinds == int(kind))
    return rows, cols


def copy_parameters(src: VLBert, dst: VLBert, names: Optional[Iterable[str]] = None) -> None:
    s, d = src.named_parameters(), dst.named_parameters()
    for name in names or s:
        if name in d:
            d[name].data[...] = s[name].data
