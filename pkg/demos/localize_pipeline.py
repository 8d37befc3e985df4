"""
Segment, crop and localize
==========================

A segmentation network finds the iris, a square window is cut around it,
and a localization network predicts the pupil and limbus regions inside
the window. The masks are pasted back into the full frame and drawn.

Both networks are trained here for a few hundred steps on synthetic eyes.

Usage: python3 demos/localize_pipeline.py [output_dir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from mobile_iris.io_utils import resize_nearest, write_image
from mobile_iris.metrics import dice
from mobile_iris.mobile_unet import build_model, reduced_config
from mobile_iris.pipeline import localization_training_pair, localize, preprocess, render_overlay
from mobile_iris.synthetic import random_eye
from mobile_iris.training import AugmentationConfig, Sample, TrainConfig, TrainingData, train

out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="iris-loc-"))
out_dir.mkdir(parents=True, exist_ok=True)
SIZE = 64

rng = np.random.default_rng(5)
eyes = [random_eye(96, 128, rng, noise=0.05) for _ in range(9)]
train_eyes, probe = eyes[:8], eyes[8]
tc = TrainConfig(lr=1e-3, max_steps=300, batch_size=8, eval_every=100)
aug = AugmentationConfig(brightness_delta_max=0.05)

# stage one learns the iris disc over the whole frame
seg = build_model(reduced_config("segmentation", SIZE), seed=0)
seg_data = [Sample(preprocess(e.image, SIZE), resize_nearest(e.outer, SIZE, SIZE)[None].astype(np.float32)) for e in train_eyes]
train(seg, TrainingData(seg_data), tc, aug)

# stage two learns inner and outer regions inside the crop window
loc = build_model(reduced_config("localization", SIZE), seed=1)
loc_data = []
for e in train_eyes:
    x, y = localization_training_pair(e.image, e.outer, e.inner, e.outer, SIZE)
    loc_data.append(Sample(x, y.astype(np.float32)))
train(loc, TrainingData(loc_data), tc, aug)

result = localize(probe.image, seg, loc)
print("window (top, left, side):", (result.window.top, result.window.left, result.window.side))
print("inner dice", round(dice(result.inner_mask, probe.inner), 4))
print("outer dice", round(dice(result.outer_mask, probe.outer), 4))

overlay = render_overlay(probe.image, result.outer_mask & ~result.inner_mask, result)
write_image(out_dir / "overlay.png", overlay)
print("overlay written to", out_dir / "overlay.png")
