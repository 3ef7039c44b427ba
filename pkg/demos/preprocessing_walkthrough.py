"""
Preprocessing a CT-like slice
=============================

Runs the four preprocessing stages on a synthetic slice and writes each
intermediate next to this script (``out/preprocessing``).
"""
from pathlib import Path

import numpy as np

from fusionlungnet.data import save_image
from fusionlungnet.preprocessing import PreprocessConfig, preprocess
from fusionlungnet.synthetic import ellipse_sample

out = Path(__file__).parent / "out" / "preprocessing"
out.mkdir(parents=True, exist_ok=True)

# a 200x200 slice: bright body, two dark lungs, speckle
rng = np.random.default_rng(0)
raw, mask = ellipse_sample(rng, size=200)
# scanner tables and labels sit outside the body; add a bright bar to remove
raw[190:196, 20:180] = 250
print("raw", raw.shape, raw.dtype, raw.min(), raw.max())

# resize to 320x320, median filter, dynamic-threshold enhancement, body masking
cfg = PreprocessConfig(target_size=(320, 320))
stages = {}
clean = preprocess(raw, cfg, stages)

for name, img in stages.items():
    save_image(img, out / f"slice.{name}.png")
    print(f"{name:>7}: mean {img.mean():.3f}  nonzero {np.count_nonzero(img) / img.size:.1%}")

# the bar is gone: everything outside the body component is zero
print("bar removed:", float(clean[-20:].max()) == 0.0)
