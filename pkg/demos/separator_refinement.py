"""Effect of the separator map on touching glands.

Classifier maps are read off a synthetic image's ground truth and blurred,
roughly like upsampled half-resolution network outputs.  Without the
separator term (rho = 0) neighbouring glands fuse; with it they come apart.

    python demos/separator_refinement.py [OUT_DIR]
"""
import sys
from pathlib import Path

import numpy as np
from scipy import ndimage

from glandseg import pipeline
from glandseg.dataset import generate_synthetic_dataset
from glandseg.fusion import FusionParams
from glandseg.imaging import save_image
from glandseg.postmetrics import evaluate
from glandseg.tvseg import EdgeParams, PdParams

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

sample = generate_synthetic_dataset(0, 0, 1)[0]
gland = ndimage.gaussian_filter((sample.labels > 0).astype(float), 1.0)
sep = np.clip(2 * ndimage.gaussian_filter(sample.separator.astype(float), 1.0), 0, 1)
objects = np.zeros(gland.shape + (4,))
objects[..., 3], objects[..., 2] = gland, 1 - gland  # malignant image: classes 2 / 3
maps = pipeline.ClassifierMaps(np.zeros(gland.shape), objects, sep)

print(f"ground truth: {sample.labels.max()} glands")
for rho in (0.0, 1.0):
    res = pipeline.segment_maps(maps, FusionParams(rho=rho), EdgeParams(), 0.1, PdParams(), 20)
    m = evaluate(res.labels, sample.labels)
    print(f"rho={rho}: {res.labels.max()} objects, F1 {m['f1']:.3f}, object Dice {m['object_dice']:.3f}")
    save_image(pipeline.render_overlay(sample.rgb, res.mask, sample.labels > 0), out / f"separator_rho{rho}.png")
