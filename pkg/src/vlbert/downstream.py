"""Fine-tuning formats, heads and losses for the three downstream tasks, plus
toy versions of each task built on the synthetic world.

* VCR: four ``<Question, Answer, Image>`` sequences per instance, one scalar
  [CLS] logit each, softmax over the four. ``vcr_qar`` moves the correct
  answer into the question section and scores rationales.
* VQA: ``<Question, [MASK], Image>``; the [MASK] feature is classified over a
  fixed answer pool.
* REF: ``<Query, Image>``; every [IMG] feature gets a binary score and the
  best-scoring RoI is the prediction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .corpus import ANSWER_POOL, WorldConfig
from .embedding import InputFormat, InputSequence, Kind, Vocabulary, assemble_input
from .engine import Tensor, ops
from .model import VLBert
from .pretraining import mask_rois
from .world import (
    COLORS,
    SHAPES,
    RoI,
    SceneSpec,
    format_scene,
    ground_truth_rois,
    mask_roi_pixels,
    parse_scene,
    random_scene,
    relation_words,
    render_scene,
    with_masks,
)

TASKS = ("vcr_qa", "vcr_qar", "vqa", "ref")
VCR_CANDIDATES = 4
HEAD_OUT = {"vcr": 1, "ref": 1}


def task_head(task: str) -> str:
    return "vcr" if task.startswith("vcr") else task


def chance_accuracy(task: str, pool_size: int = len(ANSWER_POOL), mean_rois: float = 3.0) -> float:
    if task.startswith("vcr"):
        return 1.0 / VCR_CANDIDATES
    if task == "vqa":
        return 1.0 / pool_size
    return 1.0 / mean_rois


@dataclass
class TaskInstance:
    task: str
    scene_id: int
    scene: SceneSpec
    text: list[str]  # question (VCR/VQA) or query (REF)
    target: int  # candidate index, answer-pool index, or RoI index
    rois: list[RoI]
    candidates: list[list[str]] = field(default_factory=list)
    answer: list[str] = field(default_factory=list)  # correct answer, used by vcr_qar
    _image: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task.startswith("vcr") and len(self.candidates) != VCR_CANDIDATES:
            raise ValueError(f"VCR needs exactly {VCR_CANDIDATES} candidates, got {len(self.candidates)}")
        if self.task == "ref" and not 0 <= self.target < len(self.rois):
            raise ValueError(f"REF target {self.target} does not index one of {len(self.rois)} RoIs")

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            self._image = render_scene(self.scene)
        return self._image


# --- packers ------------------------------------------------------------------


def pack_vcr(question: Sequence[str], candidates: Sequence[Sequence[str]], rois: Sequence[RoI],
             image: np.ndarray, subtask: str, vocab: Vocabulary,
             answer: Sequence[str] = ()) -> list[InputSequence]:
    """One ``<Question, Answer, Image>`` sequence per candidate.

    For ``QA->R`` the question section is the question followed by the
    correct answer and the candidates are rationales.
    """
    if len(candidates) != VCR_CANDIDATES:
        raise ValueError(f"VCR needs exactly {VCR_CANDIDATES} candidates, got {len(candidates)}")
    if subtask in ("Q->A", "vcr_qa"):
        head = list(question)
    elif subtask in ("QA->R", "vcr_qar"):
        if not answer:
            raise ValueError("QA->R packing needs the correct answer")
        head = list(question) + list(answer)
    else:
        raise ValueError(f"unknown VCR subtask {subtask!r}")
    return [assemble_input(InputFormat.QUESTION_ANSWER_IMAGE, [head, list(c)], rois, image, vocab)
            for c in candidates]


def pack_vqa(question: Sequence[str], rois: Sequence[RoI], image: np.ndarray, vocab: Vocabulary) -> InputSequence:
    if not question:
        raise ValueError("VQA question is empty")
    return assemble_input(InputFormat.QUESTION_ANSWER_IMAGE, [list(question), []], rois, image, vocab)


def pack_ref(query: Sequence[str], rois: Sequence[RoI], image: np.ndarray, vocab: Vocabulary) -> InputSequence:
    if not query:
        raise ValueError("REF query is empty")
    return assemble_input(InputFormat.QUERY_IMAGE, [list(query)], rois, image, vocab)


def pack_instance(inst: TaskInstance, vocab: Vocabulary) -> Union[InputSequence, list[InputSequence]]:
    if inst.task.startswith("vcr"):
        return pack_vcr(inst.text, inst.candidates, inst.rois, inst.image, inst.task, vocab, inst.answer)
    if inst.task == "vqa":
        return pack_vqa(inst.text, inst.rois, inst.image, vocab)
    return pack_ref(inst.text, inst.rois, inst.image, vocab)


def ensure_head(model: VLBert, task: str, pool_size: int = len(ANSWER_POOL), seed: Optional[int] = None) -> str:
    name = task_head(task)
    out = pool_size if name == "vqa" else HEAD_OUT[name]
    if name not in model.heads or model.heads[name].bias.shape[0] != out:
        model.add_head(name, out, seed=seed)
    return name


# --- losses and inference --------------------------------------------------------


def vcr_logits(model: VLBert, instances: Sequence[TaskInstance], vocab: Vocabulary) -> Tensor:
    """``[B, 4]`` candidate logits from the [CLS] features."""
    seqs = [s for inst in instances for s in pack_instance(inst, vocab)]
    features, _, _ = model.forward(seqs)
    rows = np.arange(len(seqs))
    scores = model.head_scores("vcr", features, rows, np.zeros_like(rows))
    return scores.reshape(len(instances), VCR_CANDIDATES)


def vcr_aux_loss(model: VLBert, instances: Sequence[TaskInstance], vocab: Vocabulary,
                 rng: np.random.Generator, p: float = 0.15) -> Tensor:
    """Masked-RoI classification on the correct candidate's sequence."""
    seqs, rows, cols, targets = [], [], [], []
    for b, inst in enumerate(instances):
        flags, tgt = mask_rois(inst.rois, p, rng)
        flagged = with_masks(inst.rois, flags)
        masked = mask_roi_pixels(inst.image, flagged)
        head = list(inst.text) + (list(inst.answer) if inst.task == "vcr_qar" else [])
        seq = assemble_input(InputFormat.QUESTION_ANSWER_IMAGE, [head, inst.candidates[inst.target]],
                             flagged, masked, vocab)
        pos = [i for i, e in enumerate(seq.elements) if e.kind == Kind.VISUAL and flags[e.roi]]
        seqs.append(seq)
        rows += [b] * len(pos)
        cols += pos
        targets += tgt
    features, _, _ = model.forward(seqs)
    logits = model.head_scores("roi_cls", features, np.array(rows), np.array(cols))
    return ops.cross_entropy(logits, np.array(targets))


def vcr_forward_loss(model: VLBert, instances: Sequence[TaskInstance], vocab: Vocabulary,
                     aux_weight: float = 1.0, rng: Optional[np.random.Generator] = None) -> Tensor:
    logits = vcr_logits(model, instances, vocab)
    loss = ops.cross_entropy(logits, np.array([i.target for i in instances]))
    if aux_weight:
        loss = loss + vcr_aux_loss(model, instances, vocab, rng or np.random.default_rng(0)) * aux_weight
    return loss


def _mask_positions(seqs: Sequence[InputSequence], vocab: Vocabulary) -> np.ndarray:
    cols = []
    for s in seqs:
        hits = [i for i, e in enumerate(s.elements) if e.token_id == vocab.mask_id]
        if len(hits) != 1:
            raise ValueError("VQA sequence must hold exactly one [MASK]")
        cols.append(hits[0])
    return np.array(cols)


def vqa_logits(model: VLBert, instances: Sequence[TaskInstance], vocab: Vocabulary) -> Tensor:
    seqs = [pack_instance(i, vocab) for i in instances]
    features, _, _ = model.forward(seqs)
    return model.head_scores("vqa", features, np.arange(len(seqs)), _mask_positions(seqs, vocab))


def vqa_forward_loss(model: VLBert, instances: Sequence[TaskInstance], vocab: Vocabulary,
                     pool_size: int = len(ANSWER_POOL)) -> Tensor:
    for inst in instances:
        if not 0 <= inst.target < pool_size:
            raise ValueError(f"answer {inst.target} outside a pool of {pool_size}")
    logits = vqa_logits(model, instances, vocab)
    return ops.cross_entropy(logits, np.array([i.target for i in instances]))


def ref_scores(model: VLBert, instances: Sequence[TaskInstance], vocab: Vocabulary) -> list[Tensor]:
    """Per-instance vectors of RoI logits, in RoI order."""
    seqs = [pack_instance(i, vocab) for i in instances]
    features, _, _ = model.forward(seqs)
    rows, cols, sizes = [], [], []
    for b, s in enumerate(seqs):
        vis = s.positions_of(Kind.VISUAL)
        order = sorted(vis, key=lambda i: s.elements[i].roi)
        rows += [b] * len(order)
        cols += order
        sizes.append(len(order))
    flat = model.head_scores("ref", features, np.array(rows), np.array(cols)).reshape(len(rows))
    out, start = [], 0
    for k in sizes:
        out.append(ops.index(flat, slice(start, start + k)))
        start += k
    return out


def ref_forward_loss(model: VLBert, instances: Sequence[TaskInstance], vocab: Vocabulary) -> Tensor:
    """Binary logistic loss per RoI, averaged over RoIs, then over instances."""
    total = None
    for inst, scores in zip(instances, ref_scores(model, instances, vocab)):
        t = np.zeros(scores.shape[0])
        t[inst.target] = 1.0
        loss = ops.binary_cross_entropy_with_logits(scores, t)
        total = loss if total is None else total + loss
    return total * (1.0 / len(instances))


def argmax_lowest(scores: np.ndarray) -> int:
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ValueError("no RoI to choose from")
    return int(np.argmax(scores))  # first maximum wins


def ref_inference(model: VLBert, instances: Sequence[TaskInstance], vocab: Vocabulary) -> list[int]:
    return [argmax_lowest(s.data) for s in ref_scores(model, instances, vocab)]


def task_loss(model: VLBert, task: str, instances: Sequence[TaskInstance], vocab: Vocabulary,
              rng: Optional[np.random.Generator] = None, aux_weight: float = 1.0) -> Tensor:
    if task.startswith("vcr"):
        return vcr_forward_loss(model, instances, vocab, aux_weight, rng)
    if task == "vqa":
        return vqa_forward_loss(model, instances, vocab)
    return ref_forward_loss(model, instances, vocab)


def predict(model: VLBert, task: str, instances: Sequence[TaskInstance], vocab: Vocabulary) -> list[int]:
    if task.startswith("vcr"):
        return [int(k) for k in vcr_logits(model, instances, vocab).data.argmax(-1)]
    if task == "vqa":
        return [int(k) for k in vqa_logits(model, instances, vocab).data.argmax(-1)]
    return ref_inference(model, instances, vocab)


def evaluate(model: VLBert, task: str, instances: Sequence[TaskInstance], vocab: Vocabulary,
             batch_size: int = 64) -> float:
    hits = 0
    for k in range(0, len(instances), batch_size):
        chunk = instances[k:k + batch_size]
        hits += sum(p == i.target for p, i in zip(predict(model, task, chunk, vocab), chunk))
    return hits / max(len(instances), 1)


# --- toy task generation ------------------------------------------------------------


@dataclass
class ToyTaskConfig:
    train_size: int = 2000
    val_size: int = 500
    min_objects: int = 2
    max_objects: int = 4
    roi_jitter: int = 1
    val_offset: int = 1_000_000  # val scene ids start here; train ids stay below


def _scene(rng, world: WorldConfig, cfg: ToyTaskConfig, seed: int, n: Optional[int] = None) -> SceneSpec:
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1)) if n is None else n
    return random_scene(rng, n, world.width, world.height, world.size_range, world.gap, seed=seed)


def _plural(shape: str) -> str:
    return shape + "s"


def _rois(scene: SceneSpec, rng, cfg: ToyTaskConfig) -> list[RoI]:
    return ground_truth_rois(scene, jitter=cfg.roi_jitter, seed=int(rng.integers(2**31)))


def make_ref_instance(scene_id: int, world: WorldConfig, cfg: ToyTaskConfig) -> TaskInstance:
    """``the <color> <shape>`` naming an object whose category is unique in its scene."""
    rng = np.random.default_rng([scene_id, 101])
    while True:
        scene = _scene(rng, world, cfg, scene_id)
        cats = [o.category for o in scene.objects]
        unique = [k for k, c in enumerate(cats) if cats.count(c) == 1]
        if unique:
            break
    k = unique[int(rng.integers(len(unique)))]
    obj = scene.objects[k]
    query = ["the", obj.color, obj.shape]
    satisfying = [j for j, o in enumerate(scene.objects) if (o.color, o.shape) == (obj.color, obj.shape)]
    assert satisfying == [k]
    return TaskInstance("ref", scene_id, scene, query, k, _rois(scene, rng, cfg))


def make_vqa_instance(scene_id: int, world: WorldConfig, cfg: ToyTaskConfig) -> TaskInstance:
    rng = np.random.default_rng([scene_id, 102])
    kind = int(rng.integers(3))
    while True:
        scene = _scene(rng, world, cfg, scene_id)
        shapes = [o.shape for o in scene.objects]
        colors = [o.color for o in scene.objects]
        if kind == 0:  # what color is the <shape>
            unique = [s for s in SHAPES if shapes.count(s) == 1]
            if not unique:
                continue
            shape = unique[int(rng.integers(len(unique)))]
            question = ["what", "color", "is", "the", shape]
            answer = colors[shapes.index(shape)]
        elif kind == 1:  # what shape is the <color> object
            unique = [c for c in COLORS if colors.count(c) == 1]
            if not unique:
                continue
            color = unique[int(rng.integers(len(unique)))]
            question = ["what", "shape", "is", "the", color, "object"]
            answer = shapes[colors.index(color)]
        else:  # how many <shape>s
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            question = ["how", "many", _plural(shape)]
            answer = ANSWER_POOL[len(COLORS) + len(SHAPES) + shapes.count(shape)]
        break
    return TaskInstance("vqa", scene_id, scene, question, ANSWER_POOL.index(answer), _rois(scene, rng, cfg))


def _left_neighbour(scene: SceneSpec, anchor: int) -> Optional[int]:
    left = [k for k, o in enumerate(scene.objects)
            if k != anchor and relation_words(o, scene.objects[anchor]) == ["left", "of"]]
    return left[0] if len(left) == 1 else None


def make_vcr_instance(scene_id: int, world: WorldConfig, cfg: ToyTaskConfig, task: str = "vcr_qa") -> TaskInstance:
    """``what color is the shape left of the <shape>`` with the four colours as candidates.

    The rationale candidates for ``vcr_qar`` read ``because the <color> <shape>
    is left of the <shape>``; the three distractors name a wrong colour.
    """
    rng = np.random.default_rng([scene_id, 103 if task == "vcr_qa" else 104])
    while True:
        scene = _scene(rng, world, cfg, scene_id)
        shapes = [o.shape for o in scene.objects]
        anchors = [k for k, s in enumerate(shapes) if shapes.count(s) == 1 and _left_neighbour(scene, k) is not None]
        if anchors:
            break
    anchor = anchors[int(rng.integers(len(anchors)))]
    subject = scene.objects[_left_neighbour(scene, anchor)]
    anchor_shape = scene.objects[anchor].shape
    question = ["what", "color", "is", "the", "shape", "left", "of", "the", anchor_shape]
    order = [COLORS[k] for k in rng.permutation(len(COLORS))]
    target = order.index(subject.color)
    if task == "vcr_qa":
        candidates = [[c] for c in order]
        answer: list[str] = []
    else:
        candidates = [["because", "the", c, subject.shape, "is", "left", "of", "the", anchor_shape] for c in order]
        answer = [subject.color]
    return TaskInstance(task, scene_id, scene, question, target, _rois(scene, rng, cfg), candidates, answer)


_MAKERS = {
    "ref": make_ref_instance,
    "vqa": make_vqa_instance,
    "vcr_qa": lambda i, w, c: make_vcr_instance(i, w, c, "vcr_qa"),
    "vcr_qar": lambda i, w, c: make_vcr_instance(i, w, c, "vcr_qar"),
}


def make_toy_tasks(world: WorldConfig, seed: int, tasks: Iterable[str] = TASKS,
                   cfg: Optional[ToyTaskConfig] = None) -> dict[str, dict[str, list[TaskInstance]]]:
    """``{task: {"train": [...], "val": [...]}}`` with disjoint scene ids."""
    cfg = cfg or ToyTaskConfig()
    if cfg.train_size > cfg.val_offset:
        raise ValueError("train split would overlap the val id range")
    base = seed * 10 * cfg.val_offset
    out = {}
    for task in tasks:
        if task not in _MAKERS:
            raise ValueError(f"unknown task {task!r}")
        make = _MAKERS[task]
        out[task] = {
            "train": [make(base + i, world, cfg) for i in range(cfg.train_size)],
            "val": [make(base + cfg.val_offset + i, world, cfg) for i in range(cfg.val_size)],
        }
    return out


# --- serialisation -------------------------------------------------------------------


def instance_to_json(inst: TaskInstance) -> str:
    record = {
        "task": inst.task,
        "scene_id": inst.scene_id,
        "scene": format_scene(inst.scene),
        "text": " ".join(inst.text),
        "candidates": [" ".join(c) for c in inst.candidates],
        "answer": " ".join(inst.answer),
        "target": inst.target,
        "rois": [list(r.box) for r in inst.rois],
        "categories": [r.category for r in inst.rois],
    }
    return json.dumps(record, sort_keys=True)


def instance_from_json(line: str) -> TaskInstance:
    r = json.loads(line)
    scene = parse_scene(r["scene"], seed=r["scene_id"])
    rois = [RoI(tuple(b), 1.0, c, object_index=k) for k, (b, c) in enumerate(zip(r["rois"], r["categories"]))]
    return TaskInstance(r["task"], r["scene_id"], scene, r["text"].split(), r["target"], rois,
                        [c.split() for c in r["candidates"]], r["answer"].split())


def save_instances(path, instances: Iterable[TaskInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(instance_to_json(inst) + "\n")


def load_instances(path) -> list[TaskInstance]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [instance_from_json(line) for line in lines if line.strip()]


def write_report(path, rows: Iterable[dict]) -> None:
    """TSV with columns task, split, accuracy, steps, seed."""
    cols = ("task", "split", "accuracy", "steps", "seed")
    lines = ["\t".join(cols)]
    for row in rows:
        lines.append("\t".join(f"{row[c]:.4f}" if c == "accuracy" else str(row[c]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- fine-tuning loop ----------------------------------------------------------------


@dataclass
class FinetuneConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 30
    weight_decay: float = 1e-4
    optimizer: str = "adam"  # or "sgd": SGD with momentum 0.9
    aux_weight: float = 1.0
    seed: int = 0


def make_optimizer(model: VLBert, kind: str, lr: float, weight_decay: float):
    from .engine import Adam, SGDMomentum

    if kind == "adam":
        return Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    if kind == "sgd":
        return SGDMomentum(model.parameters(), lr=lr, momentum=0.9, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


def finetune(model: VLBert, task: str, train: Sequence[TaskInstance], vocab: Vocabulary,
             cfg: FinetuneConfig, log=None) -> list[float]:
    """Fine-tune every trainable parameter end to end; returns per-step losses."""
    from .engine import lr_schedule

    ensure_head(model, task, seed=cfg.seed + 7919)
    opt = make_optimizer(model, cfg.optimizer, cfg.lr, cfg.weight_decay)
    losses = []
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step, 3])
        batch = [train[k] for k in rng.integers(len(train), size=cfg.batch_size)]
        model.zero_grad()
        loss = task_loss(model, task, batch, vocab, rng, cfg.aux_weight)
        loss.backward()
        lr = lr_schedule(step, cfg.lr, min(cfg.warmup, cfg.steps - 1), cfg.steps)
        if lr > 0:
            opt.step(lr)
        losses.append(float(loss.data))
        if log is not None:
            log(step, losses[-1])
    return losses
