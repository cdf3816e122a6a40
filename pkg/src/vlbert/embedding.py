"""Input layout and the four-term input embedding.

A sequence reads ``[CLS] sentence_A [SEP] (sentence_B [SEP]) [IMG]* [END]``.
Each element's embedding is the sum of a token embedding, a visual feature
embedding, a segment embedding and a sequence-position embedding. All
visual elements share one position index so their order carries no
information.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .engine import Tensor, ops, parameter
from .world import POOLED_DIM, DetectorParams, RoI, full_image_roi, pool_rois

CLS, SEP, END, MASK, IMG = "[CLS]", "[SEP]", "[END]", "[MASK]", "[IMG]"
SPECIALS = (CLS, SEP, END, MASK, IMG)
GEOMETRY_BASE = 10000.0


class Vocabulary:
    """Dense token <-> id map with the five special tokens first."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[: len(SPECIALS)] != list(SPECIALS):
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def token(self, index: int) -> str:
        return self.tokens[index]

    @property
    def mask_id(self) -> int:
        return self._ids[MASK]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls([line for line in Path(path).read_text(encoding="utf-8").splitlines() if line])


def build_vocab(corpus: Union[str, Iterable[str]]) -> Vocabulary:
    """Specials, then whitespace tokens in order of first appearance."""
    if isinstance(corpus, str):
        corpus = corpus.split()
    tokens = list(SPECIALS)
    seen = set(tokens)
    empty = True
    for chunk in corpus:
        for tok in chunk.split():
            empty = False
            if tok not in seen:
                seen.add(tok)
                tokens.append(tok)
    if empty:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(tokens)


class Segment(enum.IntEnum):
    A = 0
    B = 1
    C = 2


class Kind(enum.IntEnum):
    CLS = 0
    WORD = 1
    SEP = 2
    VISUAL = 3
    END = 4


class InputFormat(str, enum.Enum):
    CAPTION_IMAGE = "caption-image"
    QUESTION_ANSWER_IMAGE = "question-answer-image"
    QUERY_IMAGE = "query-image"
    TEXT_ONLY = "text-only"


@dataclass(frozen=True)
class InputElement:
    kind: Kind
    token_id: int
    segment: Segment
    position: int
    roi: Optional[int] = None  # index into InputSequence.rois


@dataclass
class InputSequence:
    elements: list[InputElement]
    rois: list[RoI] = field(default_factory=list)
    image: Optional[np.ndarray] = None
    full_image: RoI = field(default_factory=full_image_roi)
    text_only: bool = False

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def token_ids(self) -> list[int]:
        return [e.token_id for e in self.elements]

    def positions_of(self, kind: Kind) -> list[int]:
        return [i for i, e in enumerate(self.elements) if e.kind == kind]

    def validate(self, vocab: Optional[Vocabulary] = None) -> None:
        """Raise ``ValueError`` if the layout rules are broken."""
        els = self.elements
        if len(els) < 3 or els[0].kind != Kind.CLS or els[-1].kind != Kind.END:
            raise ValueError("sequence must start with [CLS] and end with [END]")
        kinds = [e.kind for e in els]
        visual = [i for i, k in enumerate(kinds) if k == Kind.VISUAL]
        if visual:
            if visual != list(range(visual[0], visual[-1] + 1)) or visual[-1] != len(els) - 2:
                raise ValueError("visual elements must form one block right before [END]")
            if kinds[visual[0] - 1] != Kind.SEP:
                raise ValueError("a [SEP] must separate linguistic and visual elements")
            if len({els[i].position for i in visual}) != 1:
                raise ValueError("visual elements must share one position index")
        if Kind.SEP not in kinds:
            raise ValueError("sequence has no [SEP]")
        linguistic = [e.position for e in els if e.kind != Kind.VISUAL]
        if any(b <= a for a, b in zip(linguistic, linguistic[1:])):
            raise ValueError("positions of non-visual elements must increase")
        for e in els:
            is_visual = e.kind == Kind.VISUAL
            if is_visual != (e.roi is not None):
                raise ValueError("exactly the visual elements carry an RoI reference")
            if is_visual and e.segment != Segment.C:
                raise ValueError("visual elements belong to segment C")
            if e.kind in (Kind.CLS, Kind.WORD, Kind.SEP) and e.segment == Segment.C:
                raise ValueError("linguistic elements cannot be in segment C")
            if e.roi is not None and not 0 <= e.roi < len(self.rois):
                raise ValueError(f"dangling RoI reference {e.roi}")
        if vocab is not None:
            for e in els:
                if e.kind == Kind.VISUAL and e.token_id != vocab.id(IMG):
                    raise ValueError("visual elements carry the [IMG] token")
        if self.text_only and visual:
            raise ValueError("text-only sequences have no visual elements")


def assemble_input(
    fmt: Union[InputFormat, str],
    sentences: Sequence[Sequence[str]],
    rois: Sequence[RoI],
    image: Optional[np.ndarray],
    vocab: Vocabulary,
) -> InputSequence:
    """Lay out ``[CLS] … [SEP] … [IMG]* [END]`` with segment tags and positions.

    For the question-answer format an empty answer becomes a single [MASK].
    ``[END]`` is tagged segment C.
    """
    try:
        fmt = InputFormat(fmt)
    except ValueError:
        raise ValueError(f"unknown input format {fmt!r}") from None
    expected = {InputFormat.CAPTION_IMAGE: 1, InputFormat.QUERY_IMAGE: 1,
                InputFormat.TEXT_ONLY: 1, InputFormat.QUESTION_ANSWER_IMAGE: 2}[fmt]
    sentences = [list(s) for s in sentences]
    if len(sentences) != expected:
        raise ValueError(f"{fmt.value} takes {expected} sentence(s), got {len(sentences)}")
    if fmt == InputFormat.QUESTION_ANSWER_IMAGE and not sentences[1]:
        sentences[1] = [MASK]
    if fmt != InputFormat.TEXT_ONLY and not rois:
        raise ValueError(f"{fmt.value} needs at least one RoI")
    if fmt == InputFormat.TEXT_ONLY:
        rois, image = [], None

    els: list[InputElement] = []
    pos = 0

    def push(kind, token, segment, roi=None, advance=True):
        nonlocal pos
        els.append(InputElement(kind, vocab.id(token), segment, pos, roi))
        if advance:
            pos += 1

    push(Kind.CLS, CLS, Segment.A)
    for seg, sentence in zip((Segment.A, Segment.B), sentences):
        for tok in sentence:
            push(Kind.WORD, tok, seg)
        push(Kind.SEP, SEP, seg)
    for k in range(len(rois)):
        push(Kind.VISUAL, IMG, Segment.C, roi=k, advance=False)
    if rois:
        pos += 1
    push(Kind.END, END, Segment.C)
    seq = InputSequence(els, list(rois), image, full_image_roi(), text_only=fmt == InputFormat.TEXT_ONLY)
    return seq


def replace_tokens(seq: InputSequence, updates: dict[int, int]) -> InputSequence:
    """Copy of ``seq`` with element ``i`` re-tokenised to ``updates[i]``."""
    from dataclasses import replace

    els = [replace(e, token_id=updates[i]) if i in updates else e for i, e in enumerate(seq.elements)]
    return InputSequence(els, list(seq.rois), seq.image, seq.full_image, seq.text_only)


def permute_visual(seq: InputSequence, perm: Sequence[int]) -> InputSequence:
    """Reorder the visual block; element ``k`` of the block becomes old element ``perm[k]``."""
    vis = seq.positions_of(Kind.VISUAL)
    if sorted(perm) != list(range(len(vis))):
        raise ValueError("not a permutation of the visual block")
    els = list(seq.elements)
    block = [seq.elements[vis[p]] for p in perm]
    els[vis[0]:vis[-1] + 1] = block
    return InputSequence(els, list(seq.rois), seq.image, seq.full_image, seq.text_only)


# --- geometry and visual features ------------------------------------------


def geometry_embedding(box: Sequence[float], d_g: int, base: float = GEOMETRY_BASE) -> np.ndarray:
    """Sinusoidal embedding of a normalised box.

    For coordinate c and frequency k < d_g/8 the pair
    ``sin(c / base**(8k/d_g)), cos(c / base**(8k/d_g))`` is emitted; pairs
    are ordered coordinate-major, then by frequency, sine first.
    """
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (4,):
        raise ValueError(f"box {box.tolist()} is not a 4-vector")
    return geometry_embeddings(box[None, :], d_g, base)[0]


def geometry_embeddings(boxes: np.ndarray, d_g: int, base: float = GEOMETRY_BASE) -> np.ndarray:
    """Vectorised :func:`geometry_embedding` over ``[..., 4]`` boxes."""
    if d_g % 8:
        raise ValueError(f"geometry width {d_g} must be divisible by 8")
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.shape[-1] != 4:
        raise ValueError("boxes must have 4 coordinates on the last axis")
    if boxes.size and (boxes.min() < 0.0 or boxes.max() > 1.0):
        raise ValueError("box coordinates must lie in [0, 1]")
    freqs = base ** (-8.0 * np.arange(d_g // 8) / d_g)
    angles = boxes[..., :, None] * freqs  # [..., 4, d_g/8]
    return np.stack([np.sin(angles), np.cos(angles)], axis=-1).reshape(*boxes.shape[:-1], d_g)


@dataclass
class EmbeddingTables:
    token: Tensor  # [V, d]
    segment: Tensor  # [3, d]
    position: Tensor  # [P, d]
    visual_weight: Tensor  # [d_app + d_g, d]
    visual_bias: Tensor  # [d]
    text_visual: Tensor  # [d], shared visual term of text-only inputs
    d_g: int

    def __post_init__(self):
        d = self.token.shape[1]
        if self.visual_weight.shape[1] != d:
            raise ValueError("visual projection output width != model width")
        if self.visual_weight.shape[0] <= self.d_g:
            raise ValueError("visual projection input must be appearance + geometry")

    @property
    def width(self) -> int:
        return self.token.shape[1]

    @property
    def d_app(self) -> int:
        return self.visual_weight.shape[0] - self.d_g

    @classmethod
    def init(cls, vocab_size: int, d: int, d_app: int, d_g: int, max_positions: int,
             rng: np.random.Generator, dtype=None, std: float = 0.02) -> "EmbeddingTables":
        if d_g % 8:
            raise ValueError("d_g must be divisible by 8")

        def normal(*shape):
            return parameter(rng.normal(0.0, std, size=shape), dtype=dtype)

        return cls(
            token=normal(vocab_size, d),
            segment=normal(3, d),
            position=normal(max_positions, d),
            visual_weight=normal(d_app + d_g, d),
            visual_bias=parameter(np.zeros(d), dtype=dtype),
            text_visual=normal(d),
            d_g=d_g,
        )

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        names = ("token", "segment", "position", "visual_weight", "visual_bias", "text_visual")
        return {prefix + n: getattr(self, n) for n in names}


def visual_feature_embedding(appearance: Tensor, box, tables: EmbeddingTables) -> Tensor:
    """Affine projection of ``[appearance ‖ geometry(box)]`` to the model width.

    ``appearance`` and ``box`` may carry matching leading batch axes.
    """
    if appearance.shape[-1] != tables.d_app:
        raise ValueError(f"appearance width {appearance.shape[-1]} != {tables.d_app}")
    geo = Tensor(geometry_embeddings(np.asarray(box), tables.d_g), dtype=appearance.dtype)
    x = ops.concat([appearance, geo], axis=-1)
    if x.ndim == 1:
        return ops.reshape(ops.linear(ops.reshape(x, (1, -1)), tables.visual_weight, tables.visual_bias), (-1,))
    return ops.linear(x, tables.visual_weight, tables.visual_bias)


# --- featurisation ----------------------------------------------------------


@dataclass
class Features:
    """Numeric view of one InputSequence, ready for batching."""

    token_ids: np.ndarray  # [N] int
    segments: np.ndarray  # [N] int
    positions: np.ndarray  # [N] int
    kinds: np.ndarray  # [N] int
    pooled: np.ndarray  # [N, 48] pooled appearance grid per element
    boxes: np.ndarray  # [N, 4]
    text_only: bool


def element_boxes(seq: InputSequence) -> np.ndarray:
    """Box per element: its RoI for visual elements, the whole image otherwise."""
    full = seq.full_image.box
    return np.array([seq.rois[e.roi].box if e.roi is not None else full for e in seq.elements], dtype=np.float64)


def featurize(seq: InputSequence) -> Features:
    """Numeric arrays for ``seq``; cached on the sequence, which is treated as immutable."""
    cached = seq.__dict__.get("_features")
    if cached is not None:
        return cached
    feats = _featurize(seq)
    seq.__dict__["_features"] = feats
    return feats


def _featurize(seq: InputSequence) -> Features:
    n = len(seq.elements)
    boxes = element_boxes(seq)
    if seq.text_only:
        pooled = np.zeros((n, POOLED_DIM))
    else:
        if seq.image is None:
            raise ValueError("visual-linguistic sequence has no image to extract appearance from")
        unique, inverse = np.unique(boxes, axis=0, return_inverse=True)
        pooled = pool_rois(seq.image, unique)[inverse.reshape(-1)]
    return Features(
        token_ids=np.array([e.token_id for e in seq.elements], dtype=np.int64),
        segments=np.array([int(e.segment) for e in seq.elements], dtype=np.int64),
        positions=np.array([e.position for e in seq.elements], dtype=np.int64),
        kinds=np.array([int(e.kind) for e in seq.elements], dtype=np.int64),
        pooled=pooled,
        boxes=boxes,
        text_only=seq.text_only,
    )


def sum_embeddings(seq: InputSequence, tables: EmbeddingTables, detector: DetectorParams) -> Tensor:
    """Token + visual feature + segment + position embedding for every element.

    Appearance comes from ``seq.image`` through ``detector``: visual elements
    use their RoI, all other elements the whole-image box. Text-only
    sequences use the shared ``tables.text_visual`` vector instead.
    """
    feats = featurize(seq)
    token = ops.embedding_lookup(tables.token, feats.token_ids)
    segment = ops.embedding_lookup(tables.segment, feats.segments)
    position = ops.embedding_lookup(tables.position, feats.positions)
    if seq.text_only:
        visual = ops.mul(tables.text_visual, np.ones((len(seq), 1)))
    else:
        visual = visual_feature_embedding(detector(feats.pooled), feats.boxes, tables)
    return token + visual + segment + position
