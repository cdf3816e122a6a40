"""Short pretraining followed by the two cross-modal probes.

The colour probe hides one colour word; only the image can supply it. The
region probe blacks out one object; only the caption can name it. Each probe
runs twice, once with the informative modality removed, to show the model
actually uses the other modality. With the default 2,000 steps this takes
about five minutes; pass a smaller step count for a quicker look.
"""

import sys

from vlbert.corpus import make_vl_corpus
from vlbert.harness import runner
from vlbert.harness.config import RunConfig
from vlbert.probes import color_accuracy, roi_accuracy

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
cfg = RunConfig(steps=steps, warmup=min(200, steps // 10))
print(f"pretraining {cfg.steps} steps, batch {cfg.batch_size}, d={cfg.d}, L={cfg.layers}")
result = runner.pretrain(cfg, echo=True)

vocab = runner.load_vocab(cfg)
held_out = make_vl_corpus(300, cfg.world(), first_id=100_000)
m = result.model
print("\nmasked colour word   with image  {:.3f}   black image      {:.3f}   (chance 0.25)".format(
    color_accuracy(m, held_out, vocab), color_accuracy(m, held_out, vocab, zero_image=True)))
print("masked region class  with caption {:.3f}   borrowed caption {:.3f}   (chance 0.083)".format(
    roi_accuracy(m, held_out, vocab), roi_accuracy(m, held_out, vocab, shuffle_captions=True)))
