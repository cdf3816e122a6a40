"""Held-out probes for the two cross-modal pretraining tasks.

The colour probe masks one colour word of a caption and asks for it back,
with the real image or a black one. The RoI probe erases one object from
the image and asks for its category, with the real caption or a caption
borrowed from another scene.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .corpus import VLExample
from .embedding import InputFormat, Kind, Vocabulary, assemble_input, replace_tokens
from .model import VLBert
from .pretraining import (
    VISUAL_LINGUISTIC,
    PretrainSample,
    masked_roi_accuracy,
    masked_word_accuracy,
    with_caption,
)
from .world import COLORS, full_image_roi, mask_roi_pixels, render_scene, with_masks


def color_probe(examples: Sequence[VLExample], vocab: Vocabulary, seed: int,
                zero_image: bool = False) -> list[PretrainSample]:
    rng = np.random.default_rng([seed, 5])
    color_ids = {vocab.id(c) for c in COLORS}
    out = []
    for ex in examples:
        image = render_scene(ex.scene)
        if zero_image:
            image = np.zeros_like(image)
        rois = [full_image_roi()] + list(ex.rois)
        seq = assemble_input(InputFormat.CAPTION_IMAGE, [ex.caption], rois, image, vocab)
        slots = [i for i in seq.positions_of(Kind.WORD) if seq.elements[i].token_id in color_ids]
        pick = slots[int(rng.integers(len(slots)))]
        target = seq.elements[pick].token_id
        out.append(PretrainSample(VISUAL_LINGUISTIC, replace_tokens(seq, {pick: vocab.mask_id}), [pick], [target],
                                  image=image))
    return out


def roi_probe(examples: Sequence[VLExample], vocab: Vocabulary, seed: int,
              shuffle_captions: bool = False) -> list[PretrainSample]:
    """Erase one object (every proposal around it) and target its category.

    With ``shuffle_captions`` each sample takes the caption of the next
    example in a random cyclic order, so no sample keeps its own.
    """
    rng = np.random.default_rng([seed, 6])
    out = []
    for ex in examples:
        image = render_scene(ex.scene)
        rois = [full_image_roi()] + list(ex.rois)
        victim = int(rng.integers(len(ex.scene.objects)))
        flags = [r.object_index == victim and not r.full_image for r in rois]
        flagged = with_masks(rois, flags)
        masked_image = mask_roi_pixels(image, flagged)
        seq = assemble_input(InputFormat.CAPTION_IMAGE, [ex.caption], flagged, masked_image, vocab)
        pos = [i for i, e in enumerate(seq.elements) if e.kind == Kind.VISUAL and flags[e.roi]]
        tgt = [flagged[seq.elements[i].roi].category for i in pos]
        out.append(PretrainSample(VISUAL_LINGUISTIC, seq, [], [], seq, pos, tgt, image=image,
                                  masked_image=masked_image))
    if shuffle_captions:
        if len(out) < 2:
            raise ValueError("need at least two examples to shuffle captions")
        order = rng.permutation(len(out))
        donors = {order[k]: order[(k + 1) % len(order)] for k in range(len(order))}
        out = [with_caption(s, out[donors[k]].roi_input) for k, s in enumerate(out)]
    return out


def color_accuracy(model: VLBert, examples, vocab, seed: int = 0, zero_image: bool = False) -> float:
    return masked_word_accuracy(model, color_probe(examples, vocab, seed, zero_image))


def roi_accuracy(model: VLBert, examples, vocab, seed: int = 0, shuffle_captions: bool = False) -> float:
    return masked_roi_accuracy(model, roi_probe(examples, vocab, seed, shuffle_captions))
