"""A tour of the synthetic world that replaces images and the detector.

Renders one captioned scene, lists the proposed regions with their scores,
zeroes the pixels of one region and writes both rasters as PPM files.
"""

import sys
from pathlib import Path

import numpy as np

from vlbert.corpus import WorldConfig, make_vl_example
from vlbert.world import category_name, format_scene, mask_roi_pixels, render_scene, with_masks, write_ppm

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

ex = make_vl_example(7, WorldConfig(), n_objects=3)
print("scene line:", format_scene(ex.scene))
print("caption:   ", " ".join(ex.caption))

# Each object yields a tight, high-scoring box and looser duplicates; the
# selection keeps boxes above 0.5 but never fewer than min_rois.
print(f"\n{len(ex.rois)} proposals (best first):")
for k, roi in enumerate(ex.rois):
    shape, color = category_name(roi.category)
    box = " ".join(f"{v:.2f}" for v in roi.box)
    print(f"  {k:2d}  score {roi.score:.2f}  [{box}]  {color} {shape}")

image = render_scene(ex.scene)
flagged = with_masks(ex.rois, [k == 0 for k in range(len(ex.rois))])
masked = mask_roi_pixels(image, flagged)
again = mask_roi_pixels(masked, flagged)
print(f"\nmasking region 0 zeroes {int((image != masked).any(axis=-1).sum())} pixels;"
      f" masking again changes {int((masked != again).any(axis=-1).sum())}")

write_ppm(out / "scene.ppm", image)
write_ppm(out / "scene_masked.ppm", masked)
print(f"rasters written to {out}/scene.ppm and {out}/scene_masked.ppm")
assert np.array_equal(again, masked)
