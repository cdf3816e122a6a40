"""Toy corpora: captioned scenes, a text-only grammar, and the closed vocabulary."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .embedding import Vocabulary, build_vocab
from .world import (
    CAPTION_WORDS,
    COLORS,
    SHAPES,
    RoI,
    SceneSpec,
    caption_for_scene,
    propose_rois,
    random_scene,
)

RELATIONS = (("left", "of"), ("right", "of"), ("above",), ("below",), ("near",))
TEXT_WORDS = ("the", "is", "and", "but", "while", "there", "small", "large", "next", "to", "near", "it", "shape")
QUESTION_WORDS = ("what", "color", "shape", "how", "many", "object", "because", "squares", "circles", "triangles")
COUNT_WORDS = ("zero", "one", "two", "three", "four")
ANSWER_POOL = COLORS + SHAPES + COUNT_WORDS  # 12 shared answers for toy VQA


def toy_vocabulary() -> Vocabulary:
    """Every word any template in this package can emit, in a fixed order."""
    return build_vocab(" ".join(CAPTION_WORDS + TEXT_WORDS + QUESTION_WORDS + COUNT_WORDS))


@dataclass
class WorldConfig:
    width: int = 32
    height: int = 32
    min_objects: int = 1
    max_objects: int = 3
    size_range: tuple[int, int] = (7, 11)
    gap: int = 2
    jitter: int = 1
    duplicates: int = 2
    max_rois: int = 100
    min_rois: int = 10
    score_threshold: float = 0.5


@dataclass
class VLExample:
    scene_id: int
    scene: SceneSpec
    caption: list[str]
    rois: list[RoI] = field(default_factory=list)


def make_vl_example(scene_id: int, world: WorldConfig, n_objects: Optional[int] = None) -> VLExample:
    rng = np.random.default_rng([scene_id, 17])
    if n_objects is None:
        n_objects = int(rng.integers(world.min_objects, world.max_objects + 1))
    scene = random_scene(rng, n_objects, world.width, world.height, world.size_range, world.gap, seed=scene_id)
    caption = caption_for_scene(scene, template_seed=int(rng.integers(2**31)))
    rois = propose_rois(scene, jitter_seed=int(rng.integers(2**31)), max_rois=world.max_rois,
                        min_rois=world.min_rois, score_threshold=world.score_threshold,
                        jitter=world.jitter, duplicates=world.duplicates)
    return VLExample(scene_id, scene, caption, rois)


def make_vl_corpus(n: int, world: WorldConfig, first_id: int = 0) -> list[VLExample]:
    return [make_vl_example(first_id + i, world) for i in range(n)]


def _noun_phrase(rng) -> list[str]:
    words = ["the"]
    if rng.random() < 0.3:
        words.append(("small", "large")[rng.integers(2)])
    return words + [COLORS[rng.integers(len(COLORS))], SHAPES[rng.integers(len(SHAPES))]]


def _clause(rng) -> list[str]:
    kind = rng.integers(3)
    if kind == 0:
        return _noun_phrase(rng) + ["is", *RELATIONS[rng.integers(len(RELATIONS))], *_noun_phrase(rng)]
    if kind == 1:
        return ["there", "is", *_noun_phrase(rng)[1:], "next", "to", *_noun_phrase(rng)]
    np_ = _noun_phrase(rng)
    return np_ + ["is", np_[-2]] if rng.random() < 0.5 else ["it", "is", "a", *_noun_phrase(rng)[-2:]]


def text_sentence(rng: np.random.Generator, max_len: int) -> list[str]:
    """A run-on sentence from a tiny grammar, cut to at most ``max_len`` tokens."""
    tokens = _clause(rng)
    target = int(rng.integers(8, max_len + 1))
    while len(tokens) < target:
        tokens += [("and", "but", "while")[rng.integers(3)], *_clause(rng)]
    return tokens[:max_len]


def make_text_corpus(n: int, seed: int, max_len: int = 32) -> list[list[str]]:
    rng = np.random.default_rng([seed, 29])
    return [text_sentence(rng, max_len) for _ in range(n)]
