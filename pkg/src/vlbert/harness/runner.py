"""The five commands: pretrain, finetune, ablate, dump-attention, gradcheck.

Metrics files hold only values that follow from config and seed, so two
identical runs write identical bytes. Wall-clock times go to ``log.txt``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..corpus import make_text_corpus, make_vl_corpus, make_vl_example, toy_vocabulary
from ..downstream import TASKS, chance_accuracy, ensure_head, evaluate, finetune, make_toy_tasks, write_report
from ..embedding import InputFormat, Kind, Vocabulary, assemble_input
from ..engine import Adam, SGDMomentum, default_dtype, lr_schedule
from ..model import VLBert
from ..pretraining import ABLATION_SETTINGS, LOSS_KEYS, TaskFlags, pretrain_step, sample_minibatch
from ..transformer import AttentionRecord
from ..world import full_image_roi, render_scene
from .checkpoint import load_checkpoint, model_state, restore_model, restore_optimizer, save_checkpoint
from .config import RunConfig

METRIC_COLUMNS = ("step", "lr") + LOSS_KEYS + ("total",)


def _fmt(v: float) -> str:
    return f"{v:.8f}"


class RunLog:
    """Timestamped free-form log, kept apart from the deterministic metrics."""

    def __init__(self, out: Optional[Path], echo: bool = False):
        self.path = out / "log.txt" if out else None
        self.echo = echo

    def __call__(self, msg: str) -> None:
        line = f"{time.strftime('%Y-%m-%d %H:%M:%S')} {msg}"
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        if self.echo:
            print(line, flush=True)


def load_vocab(cfg: RunConfig) -> Vocabulary:
    return Vocabulary.load(cfg.vocab_path) if cfg.vocab_path else toy_vocabulary()


def build_model(cfg: RunConfig, vocab: Vocabulary, seed: Optional[int] = None) -> VLBert:
    dtype = np.float64 if cfg.precision == "f64" else np.float32
    return VLBert(cfg.model_config(len(vocab)), seed=cfg.seed if seed is None else seed, dtype=dtype)


def make_optimizer(cfg: RunConfig, model: VLBert):
    if cfg.optimizer == "sgd":
        return SGDMomentum(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    return Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def _prepare_out(out_dir) -> Optional[Path]:
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- pretrain ------------------------------------------------------------------------


@dataclass
class PretrainResult:
    model: VLBert
    optimizer: object
    step: int
    metrics: list[dict] = field(default_factory=list)
    attention: list[AttentionRecord] = field(default_factory=list)
    detector_grad_norm: float = 0.0  # after the first step of this run


def pretrain(cfg: RunConfig, out_dir=None, init=None, stop_after: Optional[int] = None,
             capture_every: int = 0, echo: bool = False) -> PretrainResult:
    """Run the pretraining loop to ``cfg.steps`` (or ``stop_after``) steps.

    ``init`` resumes from a checkpoint: weights always, and optimizer state
    plus step counter when it holds them.
    """
    cfg.validate()
    out = _prepare_out(out_dir)
    log = RunLog(out, echo)
    vocab = load_vocab(cfg)
    with default_dtype(cfg.precision):
        model = build_model(cfg, vocab)
        flags = cfg.flags()
        model.set_detector_tuning(flags.tune_detector)
        optimizer = make_optimizer(cfg, model)
        start = 0
        if init is not None:
            ckpt = load_checkpoint(init, cfg.fingerprint())
            restore_model(model, ckpt)
            if ckpt.optimizer:
                restore_optimizer(optimizer, model, ckpt)
                start = ckpt.step
            log(f"initialised from {init} at step {start}")
        world = cfg.world()
        vl = make_vl_corpus(cfg.vl_corpus_size, world)
        text = make_text_corpus(cfg.text_corpus_size, cfg.seed, cfg.text_max_len)
        end = cfg.steps if stop_after is None else min(stop_after, cfg.steps)
        result = PretrainResult(model, optimizer, start)
        if out:
            (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        t0 = time.time()
        for step in range(start, end):
            batch = sample_minibatch(vl, text, cfg.batch_size, cfg.ratio, np.random.default_rng([cfg.seed, step]),
                                     vocab, cfg.word_mask_p, cfg.roi_mask_p, cfg.mask_scheme, nsp=flags.nsp,
                                     text_max_len=cfg.text_max_len)
            lr = lr_schedule(step, cfg.lr, cfg.warmup, cfg.steps)
            metrics = pretrain_step(model, batch, optimizer, flags, lr)
            if step == start:
                grads = [p.grad for p in model.detector.named_parameters().values() if p.grad is not None]
                result.detector_grad_norm = float(sum(np.abs(g).sum() for g in grads))
            result.metrics.append({"step": step, "lr": lr, **metrics})
            result.step = step + 1
            if capture_every and step % capture_every == 0:
                _, _, records = model.forward([batch.samples[0].input], capture=True)
                result.attention.extend(records)
            if out and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model_state(model, optimizer, step + 1, cfg.fingerprint()),
                                out / f"ckpt_{step + 1:06d}.vlbc")
            if step % cfg.log_every == 0:
                log(f"step {step} lr {lr:.3g} " + " ".join(f"{k} {metrics[k]:.4f}" for k in metrics)
                    + f" ({time.time() - t0:.1f}s)")
        if out:
            write_metrics(out / "metrics.tsv", result.metrics)
            save_checkpoint(model_state(model, optimizer, result.step, cfg.fingerprint()), out / "pretrain.vlbc")
        return result


def write_metrics(path, rows: Sequence[dict]) -> None:
    lines = ["\t".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append("\t".join(str(row[c]) if c == "step" else _fmt(row[c]) for c in METRIC_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- finetune -------------------------------------------------------------------------


@dataclass
class FinetuneResult:
    task: str
    accuracy: float
    model: VLBert
    losses: list[float]


def finetune_task(cfg: RunConfig, task: str, init=None, out_dir=None, steps: Optional[int] = None,
                  data=None, echo: bool = False, tune_detector: bool = True) -> FinetuneResult:
    """Fine-tune on one toy task from ``init`` (a path or a model) or from scratch."""
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, not {task!r}")
    cfg.validate()
    out = _prepare_out(out_dir)
    log = RunLog(out, echo)
    vocab = load_vocab(cfg)
    with default_dtype(cfg.precision):
        model = build_model(cfg, vocab)
        if isinstance(init, VLBert):
            restore_model(model, model_state(init))
        elif init is not None:
            restore_model(model, load_checkpoint(init))
        model.set_detector_tuning(tune_detector)
        if data is None:
            data = make_toy_tasks(cfg.world(), cfg.seed, (task,), cfg.toy_tasks())[task]
        ft = cfg.finetune_config(task, steps)
        ensure_head(model, task, seed=cfg.seed + 7919)
        every = cfg.log_every
        losses = finetune(model, task, data["train"], vocab, ft,
                          log=lambda s, v: log(f"{task} step {s} loss {v:.4f}") if s % every == 0 else None)
        acc = evaluate(model, task, data["val"], vocab)
    log(f"{task} val accuracy {acc:.4f}")
    if out:
        write_report(out / f"report_{task}.tsv", [{"task": task, "split": "val", "accuracy": acc,
                                                   "steps": ft.steps, "seed": cfg.seed}])
        save_checkpoint(model_state(model, step=ft.steps, fingerprint=cfg.fingerprint()), out / f"finetune_{task}.vlbc")
    return FinetuneResult(task, acc, model, losses)


# --- ablate -----------------------------------------------------------------------------


ABLATION_COLUMNS = ("setting", "task_mlm", "task_roi", "task_nsp", "task_text", "tune_detector", "detector_grad")


@dataclass
class AblationRow:
    setting: str
    flags: Optional[TaskFlags]
    detector_grad_norm: float
    accuracy: dict[str, float]


def ablate(cfg: RunConfig, out_dir=None, tasks: Sequence[str] = TASKS, echo: bool = False) -> list[AblationRow]:
    """Six pretraining settings, each fine-tuned on every task at half the fine-tune steps."""
    cfg.validate()
    out = _prepare_out(out_dir)
    log = RunLog(out, echo)
    half = max(1, cfg.finetune_steps // 2)
    data = make_toy_tasks(cfg.world(), cfg.seed, tasks, cfg.toy_tasks())
    rows = []
    for name, flags in ABLATION_SETTINGS.items():
        init, grad = None, 0.0
        if flags is not None:
            sub = cfg.replace(task_mlm=flags.mlm, task_roi=flags.roi, task_nsp=flags.nsp, task_text=flags.text,
                              tune_detector=flags.tune_detector)
            result = pretrain(sub)
            init, grad = result.model, result.detector_grad_norm
        acc = {t: finetune_task(cfg, t, init=init, steps=half, data=data[t]).accuracy for t in tasks}
        log(f"{name}: " + " ".join(f"{t} {a:.4f}" for t, a in acc.items()))
        rows.append(AblationRow(name, flags, grad, acc))
    if out:
        write_ablation(out / "ablation.tsv", rows, tasks)
        (out / "observations.txt").write_text("\n".join(ablation_observations(rows, tasks)) + "\n", encoding="utf-8")
    return rows


def write_ablation(path, rows: Sequence[AblationRow], tasks: Sequence[str]) -> None:
    lines = ["\t".join(ABLATION_COLUMNS + tuple(tasks))]
    for row in rows:
        f = row.flags
        marks = ["-"] * 5 if f is None else ["x" if v else "" for v in (f.mlm, f.roi, f.nsp, f.text, f.tune_detector)]
        grad = "-" if f is None else ("nonzero" if row.detector_grad_norm > 0 else "zero")
        lines.append("\t".join([row.setting, *marks, grad] + [f"{row.accuracy[t]:.4f}" for t in tasks]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def ablation_observations(rows: Sequence[AblationRow], tasks: Sequence[str]) -> list[str]:
    """Directional comparisons, reported but never asserted."""
    by = {r.setting: r.accuracy for r in rows}
    pairs = [("w/o pre-training", "(b)", "pretraining with both cross-modal tasks"),
             ("(a)", "(b)", "adding masked RoI classification"),
             ("(b)", "(c)", "adding sentence-image relationship prediction"),
             ("(b)", "(d)", "adding the text-only corpus"),
             ("(d)", "full", "tuning the detector")]
    lines = []
    for base, new, what in pairs:
        for t in tasks:
            delta = by[new][t] - by[base][t]
            verb = "helps" if delta > 0 else ("hurts" if delta < 0 else "does not change")
            lines.append(f"{t}: {what} {verb} ({base} {by[base][t]:.4f} -> {new} {by[new][t]:.4f})")
    lines += [f"{t}: chance {chance_accuracy(t):.4f}" for t in tasks]
    return lines


# --- dump-attention ------------------------------------------------------------------------


ATTENTION_COLUMNS = ("layer", "head", "query", "key", "query_token", "key_roi", "probability", "intensity")


def attention_sample(cfg: RunConfig, vocab: Vocabulary, scene_id: Optional[int] = None):
    ex = make_vl_example(cfg.attention_scene if scene_id is None else scene_id, cfg.world())
    image = render_scene(ex.scene)
    rois = [full_image_roi()] + list(ex.rois)
    return assemble_input(InputFormat.CAPTION_IMAGE, [ex.caption], rois, image, vocab)


def rescale_per_layer(records: Sequence[AttentionRecord], rows: Sequence[int], cols: Sequence[int]) -> dict:
    """Affine map of each layer's text-query x RoI-key block onto [0, 1], shared by its heads."""
    blocks = {}
    for r in records:
        blocks.setdefault(r.layer, []).append(r.weights[np.ix_(rows, cols)])
    scaled = {}
    for layer, mats in blocks.items():
        lo = min(m.min() for m in mats)
        hi = max(m.max() for m in mats)
        span = hi - lo
        for head, m in enumerate(mats):
            scaled[(layer, head)] = (m - lo) / span if span > 0 else np.zeros_like(m)
    return scaled


def write_pgm(path, image: np.ndarray, scale: int = 8) -> None:
    """Binary P5 greyscale from values in [0, 1], each cell blown up to ``scale`` pixels."""
    pix = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    pix = np.kron(pix, np.ones((scale, scale), dtype=np.uint8))
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, payload = raw.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def dump_attention(cfg: RunConfig, checkpoint, out_dir, scene_id: Optional[int] = None) -> Path:
    out = _prepare_out(out_dir)
    vocab = load_vocab(cfg)
    with default_dtype(cfg.precision):
        model = build_model(cfg, vocab)
        restore_model(model, load_checkpoint(checkpoint))
        seq = attention_sample(cfg, vocab, scene_id)
        _, _, records = model.forward([seq], capture=True)
    records = [AttentionRecord(r.layer, r.head, r.weights.reshape(r.weights.shape[-2:])) for r in records]
    words = seq.positions_of(Kind.WORD)
    rois = seq.positions_of(Kind.VISUAL)
    scaled = rescale_per_layer(records, words, rois)
    lines = ["\t".join(ATTENTION_COLUMNS)]
    for r in records:
        block = scaled[(r.layer, r.head)]
        for a, q in enumerate(words):
            for b, k in enumerate(rois):
                lines.append("\t".join([str(r.layer), str(r.head), str(q), str(k),
                                        vocab.token(seq.elements[q].token_id), str(seq.elements[k].roi),
                                        f"{r.weights[q, k]:.8f}", f"{block[a, b]:.8f}"]))
        write_pgm(out / f"attention_l{r.layer}_h{r.head}.pgm", block)
    path = out / "attention.tsv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# --- gradcheck -----------------------------------------------------------------------------


def gradcheck(cfg: RunConfig, out_dir=None, seeds: Optional[Sequence[int]] = None, tolerance: float = 1e-4,
              max_entries: Optional[int] = 2) -> tuple[bool, dict[str, float]]:
    """Every op and the composed model at 64-bit; returns (passed, worst error per check)."""
    from ..gradsuite import run_suite

    seeds = list(seeds) if seeds is not None else list(range(cfg.seed, cfg.seed + 20))
    worst = run_suite(seeds, tolerance, max_entries)
    passed = all(v <= tolerance for v in worst.values())
    if out_dir is not None:
        out = _prepare_out(out_dir)
        lines = ["check\tmax_rel_error\tstatus"]
        lines += [f"{k}\t{v:.3e}\t{'ok' if v <= tolerance else 'FAIL'}" for k, v in worst.items()]
        (out / "gradcheck.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return passed, worst
