"""Pretraining objectives: masked words with visual clues, masked RoIs with
linguistic clues, text-only masked language modelling and the optional
sentence-image relationship loss. Also the pseudo-likelihood reading of
masked language modelling.

Task #1 and Task #2 run as two forward passes over each visual-linguistic
sample: the first sees masked words and the clean image, the second sees
the intact caption and the image with masked RoI pixels zeroed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .corpus import VLExample
from .embedding import (
    CLS,
    MASK,
    InputFormat,
    InputSequence,
    Kind,
    Vocabulary,
    assemble_input,
    replace_tokens,
)
from .engine import Tensor, ops
from .model import VLBert
from .world import RoI, full_image_roi, mask_roi_pixels, render_scene, with_masks

VISUAL_LINGUISTIC = "visual_linguistic"
TEXT_ONLY = "text_only"

RngLike = Union[int, np.random.Generator, None]


def _rng(seed: RngLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass(frozen=True)
class TaskFlags:
    mlm: bool = True  # Task #1
    roi: bool = True  # Task #2
    nsp: bool = False  # sentence-image relationship
    text: bool = True  # mix in the text-only corpus
    tune_detector: bool = True

    @property
    def any_loss(self) -> bool:
        return self.mlm or self.roi or self.nsp or self.text


ABLATION_SETTINGS: dict[str, Optional[TaskFlags]] = {
    "w/o pre-training": None,
    "(a)": TaskFlags(mlm=True, roi=False, nsp=False, text=False, tune_detector=False),
    "(b)": TaskFlags(mlm=True, roi=True, nsp=False, text=False, tune_detector=False),
    "(c)": TaskFlags(mlm=True, roi=True, nsp=True, text=False, tune_detector=False),
    "(d)": TaskFlags(mlm=True, roi=True, nsp=False, text=True, tune_detector=False),
    "full": TaskFlags(mlm=True, roi=True, nsp=False, text=True, tune_detector=True),
}


@dataclass
class PretrainSample:
    source: str
    input: InputSequence  # masked words, clean image
    word_positions: list[int]
    word_targets: list[int]
    roi_input: Optional[InputSequence] = None  # clean words, pixel-masked image
    roi_positions: list[int] = field(default_factory=list)
    roi_targets: list[int] = field(default_factory=list)
    nsp_label: Optional[int] = None
    image: Optional[np.ndarray] = None
    masked_image: Optional[np.ndarray] = None


@dataclass
class MiniBatch:
    samples: list[PretrainSample]

    @property
    def counts(self) -> dict[str, int]:
        out = {VISUAL_LINGUISTIC: 0, TEXT_ONLY: 0}
        for s in self.samples:
            out[s.source] += 1
        return out

    @property
    def visual(self) -> list[PretrainSample]:
        return [s for s in self.samples if s.source == VISUAL_LINGUISTIC]

    @property
    def text(self) -> list[PretrainSample]:
        return [s for s in self.samples if s.source == TEXT_ONLY]


# --- masking ----------------------------------------------------------------


def mask_words(seq: InputSequence, p: float, seed: RngLike, vocab: Vocabulary,
               scheme: str = "mask") -> tuple[InputSequence, list[int], list[int]]:
    """Independently mask each word with probability ``p``.

    ``scheme="mask"`` always substitutes [MASK]; ``scheme="bert"`` uses the
    80/10/10 mask/random/keep split. If nothing is drawn, the first word is
    masked so every sample has a target.
    """
    if scheme not in ("mask", "bert"):
        raise ValueError(f"unknown masking scheme {scheme!r}")
    rng = _rng(seed)
    words = seq.positions_of(Kind.WORD)
    if not words:
        raise ValueError("sequence has no word elements to mask")
    draws = rng.random(len(words)) < p
    if not draws.any():
        draws[0] = True
    positions = [w for w, hit in zip(words, draws) if hit]
    targets = [seq.elements[i].token_id for i in positions]
    updates = {}
    for i in positions:
        token = vocab.mask_id
        if scheme == "bert":
            u = rng.random()
            if u >= 0.9:
                token = seq.elements[i].token_id
            elif u >= 0.8:
                token = int(rng.integers(len(vocab)))
        updates[i] = token
    return replace_tokens(seq, updates), positions, targets


def mask_rois(rois: Sequence[RoI], p: float, seed: RngLike) -> tuple[list[bool], list[int]]:
    """Flag each RoI with probability ``p``; the full-image RoI is never flagged.

    When nothing is drawn one eligible RoI is flagged at random. Returns the
    flags and the categories of the flagged RoIs.
    """
    rng = _rng(seed)
    eligible = [i for i, r in enumerate(rois) if not r.full_image]
    if not eligible:
        raise ValueError("no maskable RoI")
    draws = rng.random(len(rois)) < p
    flags = [bool(d) and not r.full_image for d, r in zip(draws, rois)]
    if not any(flags):
        flags[eligible[int(rng.integers(len(eligible)))]] = True
    targets = [r.category for r, f in zip(rois, flags) if f]
    return flags, targets


# --- sample construction -----------------------------------------------------


def make_vl_sample(example: VLExample, vocab: Vocabulary, seed: RngLike, word_p: float = 0.15,
                   roi_p: float = 0.15, scheme: str = "mask", caption: Optional[list[str]] = None,
                   nsp_label: Optional[int] = None) -> PretrainSample:
    rng = _rng(seed)
    image = render_scene(example.scene)
    rois = [full_image_roi()] + list(example.rois)
    seq = assemble_input(InputFormat.CAPTION_IMAGE, [caption or example.caption], rois, image, vocab)
    masked_seq, wpos, wtgt = mask_words(seq, word_p, rng, vocab, scheme)
    flags, rtgt = mask_rois(rois, roi_p, rng)
    flagged = with_masks(rois, flags)
    masked_image = mask_roi_pixels(image, flagged)
    roi_seq = InputSequence(list(seq.elements), flagged, masked_image, seq.full_image)
    rpos = [i for i, e in enumerate(seq.elements) if e.kind == Kind.VISUAL and flags[e.roi]]
    return PretrainSample(VISUAL_LINGUISTIC, masked_seq, wpos, wtgt, roi_seq, rpos, rtgt, nsp_label,
                          image, masked_image)


def make_text_sample(tokens: Sequence[str], vocab: Vocabulary, seed: RngLike, word_p: float = 0.15,
                     scheme: str = "mask", max_len: int = 64) -> PretrainSample:
    seq = assemble_input(InputFormat.TEXT_ONLY, [list(tokens)[:max_len]], [], None, vocab)
    masked_seq, wpos, wtgt = mask_words(seq, word_p, seed, vocab, scheme)
    return PretrainSample(TEXT_ONLY, masked_seq, wpos, wtgt)


def split_counts(batch_size: int, ratio: tuple[int, int]) -> tuple[int, int]:
    vl, text = ratio
    if vl < 0 or text < 0 or vl + text == 0:
        raise ValueError(f"bad corpus ratio {ratio}")
    if (batch_size * vl) % (vl + text):
        raise ValueError(f"batch size {batch_size} cannot be split exactly at ratio {vl}:{text}")
    n_vl = batch_size * vl // (vl + text)
    return n_vl, batch_size - n_vl


def sample_minibatch(vl_corpus: Sequence[VLExample], text_corpus: Sequence[Sequence[str]], batch_size: int,
                     ratio: tuple[int, int], seed: RngLike, vocab: Vocabulary, word_p: float = 0.15,
                     roi_p: float = 0.15, scheme: str = "mask", nsp: bool = False,
                     text_max_len: int = 64) -> MiniBatch:
    """Draw ``batch_size`` samples from the two corpora at the given ratio.

    With ``nsp`` set, half of the visual-linguistic samples (in pairs) have
    their captions swapped and are labelled 0; the rest are labelled 1.
    """
    rng = _rng(seed)
    n_vl, n_text = split_counts(batch_size, ratio)
    if n_vl and not vl_corpus:
        raise ValueError("visual-linguistic corpus is empty")
    if n_text and not text_corpus:
        raise ValueError("text-only corpus is empty")
    picks = [vl_corpus[i] for i in rng.integers(len(vl_corpus), size=n_vl)] if n_vl else []
    captions = [list(e.caption) for e in picks]
    labels: list[Optional[int]] = [None] * n_vl
    if nsp and n_vl:
        labels = [1] * n_vl
        order = rng.permutation(n_vl)
        n_swap = (n_vl // 2) // 2 * 2
        for a, b in zip(order[:n_swap:2], order[1:n_swap:2]):
            captions[a], captions[b] = captions[b], captions[a]
            labels[a] = labels[b] = 0
    samples = [make_vl_sample(e, vocab, rng, word_p, roi_p, scheme, caption=c, nsp_label=t)
               for e, c, t in zip(picks, captions, labels)]
    if n_text:
        for i in rng.integers(len(text_corpus), size=n_text):
            samples.append(make_text_sample(text_corpus[i], vocab, rng, word_p, scheme, text_max_len))
    return MiniBatch(samples)


# --- losses -----------------------------------------------------------------


def _gather(samples: Sequence[PretrainSample], attr_pos: str, attr_tgt: str):
    rows, cols, targets = [], [], []
    for b, s in enumerate(samples):
        pos = getattr(s, attr_pos)
        rows += [b] * len(pos)
        cols += pos
        targets += getattr(s, attr_tgt)
    return np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), np.array(targets, dtype=np.int64)


def masked_word_logits(model: VLBert, samples: Sequence[PretrainSample], features: Optional[Tensor] = None):
    if features is None:
        features, _, _ = model.forward([s.input for s in samples])
    rows, cols, targets = _gather(samples, "word_positions", "word_targets")
    if not len(rows):
        raise ValueError("no masked word positions")
    return model.head_scores("mlm", features, rows, cols), targets


def mlm_visual_loss(model: VLBert, samples: Sequence[PretrainSample], features: Optional[Tensor] = None) -> Tensor:
    """Softmax cross-entropy of the vocabulary head at masked word positions."""
    logits, targets = masked_word_logits(model, samples, features)
    return ops.cross_entropy(logits, targets)


def text_only_mlm_loss(model: VLBert, samples: Sequence[PretrainSample], features: Optional[Tensor] = None) -> Tensor:
    for s in samples:
        if s.source != TEXT_ONLY or s.input.positions_of(Kind.VISUAL):
            raise ValueError("text-only loss received a sample with visual elements")
    return mlm_visual_loss(model, samples, features)


def masked_roi_logits(model: VLBert, samples: Sequence[PretrainSample], features: Optional[Tensor] = None):
    if features is None:
        features, _, _ = model.forward([s.roi_input for s in samples])
    rows, cols, targets = _gather(samples, "roi_positions", "roi_targets")
    if not len(rows):
        raise ValueError("no masked RoI positions")
    return model.head_scores("roi_cls", features, rows, cols), targets


def masked_roi_cls_loss(model: VLBert, samples: Sequence[PretrainSample], features: Optional[Tensor] = None) -> Tensor:
    """Category cross-entropy at masked RoIs, computed on the pixel-masked image."""
    logits, targets = masked_roi_logits(model, samples, features)
    return ops.cross_entropy(logits, targets)


def nsp_loss(model: VLBert, samples: Sequence[PretrainSample], features: Optional[Tensor] = None) -> Tensor:
    """``-[t log g + (1-t) log(1-g)]`` with ``g`` the sigmoid of the [CLS] score."""
    if any(s.nsp_label is None for s in samples):
        raise ValueError("sentence-image relationship loss needs a label on every sample")
    if features is None:
        features, _, _ = model.forward([s.input for s in samples])
    rows = np.arange(len(samples))
    logits = model.head_scores("nsp", features, rows, np.zeros_like(rows)).reshape(len(samples))
    return ops.binary_cross_entropy_with_logits(logits, np.array([s.nsp_label for s in samples], dtype=float))


# --- pseudo-likelihood --------------------------------------------------------


def _masked_copies(seq: InputSequence, positions: Sequence[int], vocab_mask_id: int) -> list[InputSequence]:
    return [replace_tokens(seq, {i: vocab_mask_id}) for i in positions]


def conditional_logits(model: VLBert, seq: InputSequence, positions: Sequence[int], mask_id: int) -> Tensor:
    """Vocabulary logits ``f_i(x_without_i)`` for each ``i`` in ``positions``; shape [len, V]."""
    copies = _masked_copies(seq, positions, mask_id)
    features, _, _ = model.forward(copies)
    rows = np.arange(len(positions))
    return model.head_scores("mlm", features, rows, np.asarray(positions))


def log_potential(model: VLBert, seq: InputSequence, i: int, mask_id: int) -> float:
    """``x_i . f_i(x_without_i)``: the head logit of the true token at ``i``."""
    if seq.elements[i].kind != Kind.WORD:
        raise ValueError(f"element {i} is not a word")
    logits = conditional_logits(model, seq, [i], mask_id)
    return float(logits.data[0, seq.elements[i].token_id])


def pseudo_log_likelihood(model: VLBert, seq: InputSequence, mask_id: int,
                          return_terms: bool = False):
    """Sum over words of ``log softmax(f_i(x_without_i))[x_i]``.

    The partition function of the joint model is never formed; each term is
    normalised on its own.
    """
    positions = seq.positions_of(Kind.WORD)
    if not positions:
        raise ValueError("sequence has no words")
    logits = conditional_logits(model, seq, positions, mask_id)
    logp = ops.log_softmax(logits, axis=-1).data
    truth = np.array([seq.elements[i].token_id for i in positions])
    terms = logp[np.arange(len(positions)), truth]
    total = float(terms.sum())
    return (total, terms) if return_terms else total


# --- one optimisation step -----------------------------------------------------


LOSS_KEYS = ("mlm", "roi", "nsp", "text")


def pretrain_losses(model: VLBert, batch: MiniBatch, flags: TaskFlags) -> dict[str, Tensor]:
    """Build the graph for every enabled loss; disabled ones are absent."""
    if not flags.any_loss:
        raise ValueError("at least one pretraining task must be enabled")
    losses: dict[str, Tensor] = {}
    vl = batch.visual
    first_pass = [s for s in batch.samples if (s.source == VISUAL_LINGUISTIC and (flags.mlm or flags.nsp))
                  or (s.source == TEXT_ONLY and flags.text)]
    if first_pass:
        features, _, _ = model.forward([s.input for s in first_pass])
        vl_rows = [k for k, s in enumerate(first_pass) if s.source == VISUAL_LINGUISTIC]
        text_rows = [k for k, s in enumerate(first_pass) if s.source == TEXT_ONLY]
        if flags.mlm and vl_rows:
            losses["mlm"] = _subset_loss(model, first_pass, vl_rows, features, mlm_visual_loss)
        if flags.text and text_rows:
            losses["text"] = _subset_loss(model, first_pass, text_rows, features, text_only_mlm_loss)
        if flags.nsp and vl_rows:
            losses["nsp"] = _subset_loss(model, first_pass, vl_rows, features, nsp_loss)
    if flags.roi and vl:
        losses["roi"] = masked_roi_cls_loss(model, vl)
    return losses


def _subset_loss(model, samples, rows, features, fn):
    picked = ops.index(features, np.asarray(rows))
    return fn(model, [samples[k] for k in rows], picked)


def pretrain_step(model: VLBert, batch: MiniBatch, optimizer, flags: TaskFlags,
                  lr: Optional[float] = None) -> dict[str, float]:
    """Sum the enabled losses, backpropagate, and apply one optimizer update."""
    model.zero_grad()
    losses = pretrain_losses(model, batch, flags)
    total = None
    for loss in losses.values():
        total = loss if total is None else total + loss
    total.backward()
    if lr is None or lr > 0:
        optimizer.step(lr)
    metrics = {k: float(losses[k].data) if k in losses else 0.0 for k in LOSS_KEYS}
    metrics["total"] = float(total.data)
    return metrics


# --- evaluation ----------------------------------------------------------------


def masked_word_accuracy(model: VLBert, samples: Sequence[PretrainSample], batch_size: int = 64) -> float:
    hits = total = 0
    for k in range(0, len(samples), batch_size):
        chunk = samples[k:k + batch_size]
        logits, targets = masked_word_logits(model, chunk)
        hits += int((logits.data.argmax(-1) == targets).sum())
        total += len(targets)
    return hits / max(total, 1)


def masked_roi_accuracy(model: VLBert, samples: Sequence[PretrainSample], batch_size: int = 64) -> float:
    hits = total = 0
    for k in range(0, len(samples), batch_size):
        chunk = samples[k:k + batch_size]
        logits, targets = masked_roi_logits(model, chunk)
        hits += int((logits.data.argmax(-1) == targets).sum())
        total += len(targets)
    return hits / max(total, 1)


def with_caption(sample: PretrainSample, caption_seq: InputSequence) -> PretrainSample:
    """Swap the linguistic part of the Task #2 view for another caption's."""
    roi_seq = sample.roi_input
    lang = [e for e in caption_seq.elements if e.kind in (Kind.CLS, Kind.WORD, Kind.SEP)]
    vis = [e for e in roi_seq.elements if e.kind == Kind.VISUAL]
    end = roi_seq.elements[-1]
    shift = len(lang) - len([e for e in roi_seq.elements if e.kind in (Kind.CLS, Kind.WORD, Kind.SEP)])
    vis_pos = lang[-1].position + 1
    vis = [replace(e, position=vis_pos) for e in vis]
    end = replace(end, position=vis_pos + 1)
    els = lang + vis + [end]
    new = InputSequence(els, roi_seq.rois, roi_seq.image, roi_seq.full_image)
    return replace(sample, roi_input=new, roi_positions=[p + shift for p in sample.roi_positions])


__all__ = [
    "ABLATION_SETTINGS", "CLS", "MASK", "MiniBatch", "PretrainSample", "TaskFlags", "conditional_logits",
    "log_potential", "make_text_sample", "make_vl_sample", "mask_rois", "mask_words", "masked_roi_accuracy",
    "masked_roi_cls_loss", "masked_word_accuracy", "mlm_visual_loss", "nsp_loss", "pretrain_losses",
    "pretrain_step", "pseudo_log_likelihood", "sample_minibatch", "text_only_mlm_loss", "with_caption",
]
