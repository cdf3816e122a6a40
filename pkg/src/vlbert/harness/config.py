"""Run configuration: ``key = value`` lines with ``#`` comments.

Unknown keys are rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from ..corpus import WorldConfig
from ..downstream import FinetuneConfig, ToyTaskConfig
from ..engine import PRECISIONS
from ..model import ModelConfig
from ..pretraining import TaskFlags


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    d: int = 64
    layers: int = 4
    heads: int = 4
    d_ff: int = 256
    d_app: int = 32
    d_g: int = 32
    max_positions: int = 128
    attention_scaled: bool = True
    embedding_layer_norm: bool = True
    dropout: float = 0.0
    vocab_path: str = ""  # empty: the built-in toy vocabulary
    # pretraining tasks
    task_mlm: bool = True
    task_roi: bool = True
    task_nsp: bool = False
    task_text: bool = True
    tune_detector: bool = True
    # optimisation
    optimizer: str = "adam"
    lr: float = 2e-3
    weight_decay: float = 1e-4
    steps: int = 2000
    warmup: int = 200
    batch_size: int = 48
    corpus_ratio: str = "1:1"
    # masking
    word_mask_p: float = 0.15
    roi_mask_p: float = 0.15
    mask_scheme: str = "mask"
    # RoI rules and world
    max_rois: int = 100
    min_rois: int = 10
    score_threshold: float = 0.5
    min_objects: int = 1
    max_objects: int = 3
    vl_corpus_size: int = 4000
    text_corpus_size: int = 4000
    text_max_len: int = 32
    # fine-tuning
    finetune_steps: int = 1500
    finetune_batch_size: int = 16
    finetune_lr: float = 1e-3
    finetune_sgd_lr: float = 2e-2
    finetune_optimizer: str = "adam"  # or sgd (momentum 0.9, finetune_sgd_lr)
    finetune_warmup: int = 30
    aux_weight: float = 1.0
    task_train_size: int = 2000
    task_val_size: int = 500
    # run
    seed: int = 0
    precision: str = "f32"
    out_dir: str = "runs/default"
    checkpoint_every: int = 500
    log_every: int = 50
    # dump-attention
    attention_scene: int = 123456

    # --- validation ---------------------------------------------------------

    def validate(self) -> None:
        try:
            self.model_config(vocab_size=1).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not (self.task_mlm or self.task_roi or self.task_nsp or self.task_text):
            raise ConfigError("every pretraining task is disabled; enable at least one")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, not {self.optimizer!r}")
        for name in ("lr", "finetune_lr", "finetune_sgd_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.steps < 1 or not 0 <= self.warmup < self.steps:
            raise ConfigError("need steps >= 1 and 0 <= warmup < steps")
        if self.finetune_optimizer not in ("adam", "sgd"):
            raise ConfigError(f"finetune_optimizer must be adam or sgd, not {self.finetune_optimizer!r}")
        if self.finetune_steps < 1:
            raise ConfigError("finetune_steps must be positive")
        if self.batch_size < 1 or self.finetune_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        vl, text = self.ratio
        if (self.batch_size * vl) % (vl + text):
            raise ConfigError(f"batch_size {self.batch_size} cannot be split at ratio {self.corpus_ratio}")
        for name in ("word_mask_p", "roi_mask_p"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1]")
        if self.mask_scheme not in ("mask", "bert"):
            raise ConfigError("mask_scheme must be mask or bert")
        if not self.max_rois >= self.min_rois >= 1:
            raise ConfigError("need max_rois >= min_rois >= 1")
        if not 1 <= self.min_objects <= self.max_objects <= 6:
            raise ConfigError("need 1 <= min_objects <= max_objects <= 6")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.vl_corpus_size < 1 or self.text_corpus_size < 1:
            raise ConfigError("corpus sizes must be positive")
        if self.task_train_size < 1 or self.task_val_size < 1:
            raise ConfigError("task sizes must be positive")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be positive")

    @property
    def ratio(self) -> tuple[int, int]:
        try:
            vl, text = (int(x) for x in self.corpus_ratio.split(":"))
        except ValueError:
            raise ConfigError(f"corpus_ratio must look like 1:1, got {self.corpus_ratio!r}") from None
        if vl < 0 or text < 0 or vl + text == 0:
            raise ConfigError(f"bad corpus_ratio {self.corpus_ratio!r}")
        return vl, text

    # --- views for the library ------------------------------------------------

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d=self.d, layers=self.layers, heads=self.heads, d_ff=self.d_ff,
                           d_app=self.d_app, d_g=self.d_g, max_positions=self.max_positions,
                           attention_scaled=self.attention_scaled, embedding_layer_norm=self.embedding_layer_norm,
                           dropout=self.dropout)

    def world(self) -> WorldConfig:
        return WorldConfig(min_objects=self.min_objects, max_objects=self.max_objects, max_rois=self.max_rois,
                           min_rois=self.min_rois, score_threshold=self.score_threshold)

    def flags(self) -> TaskFlags:
        return TaskFlags(self.task_mlm, self.task_roi, self.task_nsp, self.task_text, self.tune_detector)

    def toy_tasks(self) -> ToyTaskConfig:
        return ToyTaskConfig(train_size=self.task_train_size, val_size=self.task_val_size)

    def finetune_config(self, task: str, steps: Optional[int] = None) -> FinetuneConfig:
        sgd = self.finetune_optimizer == "sgd"
        return FinetuneConfig(steps=steps or self.finetune_steps, batch_size=self.finetune_batch_size,
                              lr=self.finetune_sgd_lr if sgd else self.finetune_lr, warmup=self.finetune_warmup,
                              weight_decay=self.weight_decay, optimizer=self.finetune_optimizer,
                              aux_weight=self.aux_weight, seed=self.seed)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # --- text form ------------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def fingerprint(self) -> str:
        """Hash of everything that shapes the model and its training data."""
        skip = {"out_dir", "checkpoint_every", "log_every", "attention_scene"}
        text = "".join(f"{f.name}={_format(getattr(self, f.name))};" for f in fields(self) if f.name not in skip)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(name: str, raw: str, kind):
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    cfg = dataclasses.replace(base or RunConfig(), **values)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
