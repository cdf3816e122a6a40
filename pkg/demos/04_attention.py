"""Where do caption words look? Dumps text-to-region attention heatmaps.

Usage: python demos/04_attention.py CHECKPOINT [OUT_DIR]

Writes attention.tsv plus one PGM per layer and head. Intensities are
rescaled per layer so the weakest text-to-region weight is 0 and the
strongest is 1, across all heads of that layer.
"""

import sys
from collections import defaultdict

from vlbert.harness import runner
from vlbert.harness.config import RunConfig

ckpt = sys.argv[1]
out = sys.argv[2] if len(sys.argv) > 2 else "demo_out/attention"
path = runner.dump_attention(RunConfig(), ckpt, out)

rows = [line.split("\t") for line in path.read_text().splitlines()[1:]]
print(f"{len(rows)} records in {path}")

# strongest region for each word, averaged over heads in the last layer
last = max(int(r[0]) for r in rows)
mass = defaultdict(float)
for layer, _, q, _, word, roi, p, _ in rows:
    if int(layer) == last:
        mass[(int(q), word, roi)] += float(p)
best = {}
for (q, word, roi), m in mass.items():
    if q not in best or m > best[q][2]:
        best[q] = (word, roi, m)
print(f"layer {last}: most attended region per word")
for q in sorted(best):
    word, roi, m = best[q]
    print(f"  {word:>8s} -> region {roi}")
