"""Referring expressions from a pretrained checkpoint versus from scratch.

Usage: python demos/03_finetune.py [CHECKPOINT]

Without a checkpoint a pretraining run is made first (about five minutes).
Both fine-tunes see the same data and the same number of steps: half the
default budget, as in the ablation grid. Given the full budget the scratch
model closes much of the gap on this easy task.
"""

import sys
from pathlib import Path

from vlbert.downstream import chance_accuracy, make_toy_tasks
from vlbert.harness import runner
from vlbert.harness.config import RunConfig

cfg = RunConfig(out_dir="demo_out/pretrain")
ckpt = sys.argv[1] if len(sys.argv) > 1 else None
if ckpt is None:
    runner.pretrain(cfg, cfg.out_dir)
    ckpt = str(Path(cfg.out_dir) / "pretrain.vlbc")

data = make_toy_tasks(cfg.world(), cfg.seed, ("ref",), cfg.toy_tasks())["ref"]
q = data["val"][0]
print("example query:", " ".join(q.text), "->", f"region {q.target} of {len(q.rois)}")

steps = cfg.finetune_steps // 2
pre = runner.finetune_task(cfg, "ref", init=ckpt, steps=steps, data=data)
scratch = runner.finetune_task(cfg, "ref", init=None, steps=steps, data=data)
print(f"\nref val accuracy after {steps} steps")
print(f"  pretrained   {pre.accuracy:.3f}")
print(f"  from scratch {scratch.accuracy:.3f}")
print(f"  chance       {chance_accuracy('ref'):.3f}")
