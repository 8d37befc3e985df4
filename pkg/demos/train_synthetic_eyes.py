"""
Training a reduced network on synthetic eyes
============================================

Eight rendered eyes (pupil, iris and sclera discs plus noise) train a
64x64 reduced network to recover the iris disc. Two more eyes are held
out. Takes about a minute on one CPU core.

Usage: python3 demos/train_synthetic_eyes.py [output_dir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from mobile_iris.io_utils import write_mask
from mobile_iris.metrics import e1
from mobile_iris.mobile_unet import build_model, reduced_config, save_weights
from mobile_iris.pipeline import preprocess, segment
from mobile_iris.synthetic import random_eye
from mobile_iris.training import (
    AugmentationConfig,
    Sample,
    TrainConfig,
    TrainingData,
    checkpoint_metadata,
    evaluate_soft_dice,
    train,
)

out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="iris-train-"))
out_dir.mkdir(parents=True, exist_ok=True)

rng = np.random.default_rng(1)
eyes = [random_eye(64, 64, rng, noise=0.05) for _ in range(10)]


def to_sample(eye):
    # the target is the full iris disc, pupil included
    return Sample(preprocess(eye.image, 64), eye.outer[None].astype(np.float32))


train_set = [to_sample(e) for e in eyes[:8]]
val_set = [to_sample(e) for e in eyes[8:]]

model = build_model(reduced_config("segmentation", 64), seed=0)
tc = TrainConfig(lr=1e-3, max_steps=500, batch_size=8, eval_every=50)
aug = AugmentationConfig(brightness_delta_max=0.05)
result = train(model, TrainingData(train_set, val_set), tc, aug, log=print)

print("train soft dice", round(evaluate_soft_dice(model, train_set), 4))
for k, eye in enumerate(eyes[8:]):
    mask = segment(eye.image, model, 0.5)
    print(f"held-out eye {k}: E1 {e1(mask, eye.outer):.4f}")
    write_mask(out_dir / f"heldout_{k}.png", mask)

save_weights(model, out_dir / "seg.irkw", metadata=checkpoint_metadata(result.history, tc, aug))
print("weights written to", out_dir / "seg.irkw")
