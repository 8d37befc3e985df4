"""
Dice loss, augmentation, dataset splitting, the training loop and the
binarization-threshold sweep.
"""

from __future__ import annotations

import csv
import io
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import tensor_nn as nn
from .errors import ConfigurationError, DimensionError
from .io_utils import atomic_write_text, resize_nearest
from .mobile_unet import MobileUNet, save_weights
from .pipeline import _check_image, _input_hw, _to_network, binarize
from .tensor_nn import Tensor

DEFAULT_SMOOTHING = 1.0
DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _dice_axes(ndim: int) -> tuple[int, ...]:
    if ndim == 4:
        return (0, 2, 3)
    if ndim == 3:
        return (1, 2)
    return tuple(range(ndim))


def soft_dice(pred, gt, smoothing: float = DEFAULT_SMOOTHING) -> float:
    """(2·Σpg + ε) / (Σp + Σg + ε), averaged over channels for (C,H,W) / (N,C,H,W) input."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    axes = _dice_axes(pred.ndim)
    inter = (pred * gt).sum(axis=axes)
    total = pred.sum(axis=axes) + gt.sum(axis=axes)
    return float(np.mean((2 * inter + smoothing) / (total + smoothing)))


def dice_loss(pred, gt, smoothing: float = DEFAULT_SMOOTHING) -> Tensor:
    """1 - soft dice, differentiable in ``pred``.

    For (C,H,W) or (N,C,H,W) input the soft dice is computed per channel
    (summing over batch and pixels) and averaged.
    """
    pred = nn.as_tensor(pred)
    g = np.asarray(gt, dtype=pred.dtype)
    if g.shape != pred.shape:
        raise DimensionError(f"prediction shape {pred.shape} differs from ground truth {g.shape}")
    axes = _dice_axes(pred.ndim)
    p = pred.data
    inter = (p * g).sum(axis=axes, keepdims=True)
    total = p.sum(axis=axes, keepdims=True) + g.sum(axis=axes, keepdims=True) + smoothing
    per_channel = (2 * inter + smoothing) / total
    n_ch = per_channel.size
    loss = np.asarray(1.0 - per_channel.mean(), dtype=pred.dtype)

    def backward(grad):
        d = (2 * g * total - (2 * inter + smoothing)) / total**2
        return (-grad * d / n_ch,)

    return nn._make(loss, (pred,), backward)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentationConfig:
    flip_probability: float = 0.5
    rotation_max_degrees: float = 15.0
    zoom_range: tuple[float, float] = (0.9, 1.1)
    brightness_delta_max: float = 0.2
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.zoom_range
        if not 0 <= self.flip_probability <= 1:
            raise ConfigurationError(f"flip_probability must be in [0, 1], got {self.flip_probability}")
        if self.rotation_max_degrees < 0:
            raise ConfigurationError("rotation_max_degrees must be >= 0")
        if not 0 < lo <= 1 <= hi:
            raise ConfigurationError(f"zoom_range must satisfy 0 < lo <= 1 <= hi, got {self.zoom_range}")
        if not 0 <= self.brightness_delta_max <= 1:
            raise ConfigurationError("brightness_delta_max must be in [0, 1]")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentationConfig":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0, seed)


def _affine(plane: np.ndarray, matrix: np.ndarray, offset: np.ndarray, order: int) -> np.ndarray:
    return ndimage.affine_transform(plane, matrix, offset=offset, order=order, mode="constant", cval=0.0)


def augment(image, masks, config: AugmentationConfig, rng: np.random.Generator):
    """Random flip / rotation / zoom applied identically to image and masks, brightness to the image.

    ``image`` is float (C, H, W) in [0, 1]; ``masks`` is (H, W) or (K, H, W).
    Masks resample nearest-neighbour, the image bilinearly; rotation and
    zoom act about the centre with zero fill, so dimensions never change.
    """
    image = np.asarray(image)
    masks = np.asarray(masks)
    single = masks.ndim == 2
    m = masks[None] if single else masks
    if image.shape[-2:] != m.shape[-2:]:
        raise DimensionError(f"image {image.shape} and masks {masks.shape} differ spatially")
    # draw every variate on every call so the stream does not depend on the config
    flip_u = rng.random()
    angle = rng.uniform(-config.rotation_max_degrees, config.rotation_max_degrees)
    zoom = rng.uniform(*config.zoom_range)
    delta = rng.uniform(-config.brightness_delta_max, config.brightness_delta_max)

    out_img, out_m = image, m
    if flip_u < config.flip_probability:
        out_img = out_img[..., ::-1]
        out_m = out_m[..., ::-1]
    if angle != 0 or zoom != 1:
        theta = math.radians(angle)
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        matrix = rot / zoom
        h, w = image.shape[-2:]
        centre = np.array([(h - 1) / 2, (w - 1) / 2])
        offset = centre - matrix @ centre
        out_img = np.stack([_affine(c, matrix, offset, 1) for c in out_img]).astype(image.dtype)
        out_m = np.stack([_affine(c.astype(np.float64), matrix, offset, 0) for c in out_m]).astype(masks.dtype)
    if delta != 0:
        out_img = np.clip(out_img + delta, 0.0, 1.0).astype(image.dtype)
    out_img = np.ascontiguousarray(out_img)
    out_m = np.ascontiguousarray(out_m)
    return out_img, (out_m[0] if single else out_m)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    ratios: tuple[float, float, float] = (0.90, 0.05, 0.05)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ConfigurationError(f"ratios must be three non-negative numbers, got {self.ratios}")
        if not math.isclose(sum(self.ratios), 1.0, abs_tol=1e-9):
            raise ConfigurationError(f"ratios must sum to 1, got {sum(self.ratios)}")


def split_sizes(n_items: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    # tiny epsilon guards products like 0.05 * 3520 = 175.99999...
    val = math.floor(ratios[1] * n_items + 1e-9)
    test = math.floor(ratios[2] * n_items + 1e-9)
    return n_items - val - test, val, test


def split_dataset(n_items: int, spec: SplitSpec) -> tuple[list[int], list[int], list[int]]:
    """Seeded shuffle, then floor(val·n) validation, floor(test·n) test, remainder train."""
    if n_items < 3:
        raise ConfigurationError(f"need at least 3 items to split, got {n_items}")
    n_train, n_val, n_test = split_sizes(n_items, spec.ratios)
    if min(n_train, n_val, n_test) == 0:
        raise ConfigurationError(
            f"ratios {spec.ratios} on {n_items} items give an empty split ({n_train}, {n_val}, {n_test})"
        )
    order = np.random.default_rng(spec.seed).permutation(n_items).tolist()
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    max_steps: int = 1000
    batch_size: int = 4
    eval_every: int = 50
    seed: int = 0
    smoothing: float = DEFAULT_SMOOTHING
    checkpoint_dir: str | None = None
    loss: str = "dice"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.max_steps < 1:
            raise ConfigurationError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss != "dice":
            raise ConfigurationError(f"only the dice loss is supported, got {self.loss!r}")


@dataclass
class Sample:
    image: np.ndarray  # float32 (3, H, W) in [0, 1], network resolution
    masks: np.ndarray  # float32 (C, H, W) with C = model output channels


@dataclass
class TrainingData:
    train: list[Sample]
    val: list[Sample] = field(default_factory=list)


@dataclass
class HistoryRow:
    step: int
    loss: float
    val_dice: float | None = None


def history_csv(history: Sequence[HistoryRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss", "val_dice"])
    for row in history:
        writer.writerow([row.step, repr(row.loss), "" if row.val_dice is None else repr(row.val_dice)])
    return buf.getvalue()


def _normalize(x: np.ndarray, normalization) -> np.ndarray:
    if normalization is None:
        return x
    mean, std = (np.asarray(v, dtype=x.dtype).reshape(-1, 1, 1) for v in normalization)
    return (x - mean) / std


def evaluate_soft_dice(model: MobileUNet, samples: Sequence[Sample], smoothing: float = DEFAULT_SMOOTHING) -> float:
    """Mean per-sample soft dice in inference mode."""
    scores = [
        soft_dice(model.predict(_normalize(s.image, model.normalization)), s.masks, smoothing) for s in samples
    ]
    return float(np.mean(scores))


def _check_data(model: MobileUNet, data: TrainingData):
    if not data.train:
        raise ConfigurationError("training set is empty")
    expected = tuple(model.config.input_size)
    for i, s in enumerate(list(data.train) + list(data.val)):
        if tuple(s.image.shape) != expected:
            raise ConfigurationError(f"sample {i}: image shape {s.image.shape} differs from model input {expected}")
        if s.masks.ndim != 3 or s.masks.shape[0] != model.out_channels:
            raise ConfigurationError(
                f"sample {i}: masks have {s.masks.shape[0] if s.masks.ndim == 3 else 'no'} channels "
                f"but the {model.task} head has {model.out_channels}"
            )
        if s.masks.shape[1:] != expected[1:]:
            raise ConfigurationError(f"sample {i}: mask size {s.masks.shape[1:]} differs from input {expected[1:]}")


@dataclass
class TrainResult:
    model: MobileUNet
    history: list[HistoryRow]


def train(
    model: MobileUNet,
    data: TrainingData,
    train_config: TrainConfig,
    aug_config: AugmentationConfig | None = None,
    log=None,
) -> TrainResult:
    """Minimize dice loss with Adam. The model is updated in place and also returned.

    Batches are drawn with a generator seeded from ``train_config.seed``;
    each item's augmentation stream is keyed by (aug seed, step, item
    index), so identical seeds give bit-identical weights.
    """
    _check_data(model, data)
    aug_config = aug_config or AugmentationConfig.identity()
    params = model.parameters()
    state = nn.AdamState.for_params(params)
    rng = np.random.default_rng(train_config.seed)
    n = len(data.train)
    bs = min(train_config.batch_size, n)
    history: list[HistoryRow] = []
    for step in range(1, train_config.max_steps + 1):
        idx = np.sort(rng.choice(n, size=bs, replace=False))
        xs, ys = [], []
        for i in idx:
            item_rng = np.random.default_rng([aug_config.seed, step, int(i)])
            x, y = augment(data.train[i].image, data.train[i].masks, aug_config, item_rng)
            xs.append(x)
            ys.append(y)
        x = _normalize(np.stack(xs).astype(model.dtype), model.normalization)
        y = np.stack(ys).astype(model.dtype)
        nn.zero_grad(params)
        out = model.forward(x, mode="train")
        loss = dice_loss(out, y, train_config.smoothing)
        grads = nn.backward(loss, params)
        nn.adam_step(params, grads, state, train_config.lr)
        val = None
        if data.val and (step % train_config.eval_every == 0 or step == train_config.max_steps):
            val = evaluate_soft_dice(model, data.val, train_config.smoothing)
        history.append(HistoryRow(step, float(loss.data), val))
        if log is not None and (val is not None or step == 1):
            log(f"step {step}: loss {float(loss.data):.4f}" + ("" if val is None else f", val dice {val:.4f}"))
    nn.zero_grad(params)
    if train_config.checkpoint_dir:
        write_checkpoint(Path(train_config.checkpoint_dir), model, history, train_config, aug_config)
    return TrainResult(model, history)


def checkpoint_metadata(history, train_config: TrainConfig, aug_config: AugmentationConfig) -> dict:
    """Sidecar fields for a checkpoint: step, loss history, seed and the config echo."""
    return {
        "step": history[-1].step if history else 0,
        "loss_history": [row.loss for row in history],
        "seed": train_config.seed,
        "train_config": asdict(train_config),
        "augmentation": asdict(aug_config),
    }


def write_checkpoint(directory: Path, model: MobileUNet, history, train_config: TrainConfig, aug_config: AugmentationConfig):
    """Weight container + JSON sidecar + history CSV inside ``directory``."""
    directory.mkdir(parents=True, exist_ok=True)
    save_weights(model, directory / "model.irkw", metadata=checkpoint_metadata(history, train_config, aug_config))
    atomic_write_text(directory / "history.csv", history_csv(history))


# ---------------------------------------------------------------------------
# Threshold sweep
# ---------------------------------------------------------------------------

def probability_maps(model, images: Sequence[np.ndarray]) -> list[np.ndarray]:
    """First-channel probabilities resampled (nearest) to each image's own size."""
    out = []
    for image in images:
        image = _check_image(image)
        x = _to_network(image, _input_hw(model), getattr(model, "normalization", None))
        probs = model.predict(x)[0]
        out.append(resize_nearest(probs, *image.shape[:2]))
    return out


def sweep_threshold(model, val_items: Sequence[tuple[np.ndarray, np.ndarray]], grid: Sequence[float] = DEFAULT_GRID):
    """Pick the binarization threshold minimizing mean E1 over ``val_items``.

    ``val_items`` holds (uint8 image, boolean ground-truth mask) pairs.
    Returns (best threshold, [(threshold, mean E1), ...] in grid order);
    ties go to the smallest threshold.
    """
    if not val_items:
        raise ConfigurationError("threshold sweep needs a non-empty validation set")
    grid = [float(t) for t in grid]
    if not grid or any(not 0 < t < 1 for t in grid):
        raise ConfigurationError(f"grid must be non-empty with values in (0, 1), got {grid}")
    probs = probability_maps(model, [img for img, _ in val_items])
    gts = [np.asarray(gt, dtype=bool) for _, gt in val_items]
    for p, g in zip(probs, gts):
        if p.shape != g.shape:
            raise DimensionError(f"probability map {p.shape} and mask {g.shape} differ")
    table, exact = [], []
    for t in grid:
        # rational means so that equal E1 ties exactly, whatever the float rounding
        mean = sum(Fraction(int(np.count_nonzero(binarize(p, t) != g)), g.size) for p, g in zip(probs, gts)) / len(gts)
        exact.append(mean)
        table.append((t, float(mean)))
    best = min(range(len(grid)), key=lambda i: (exact[i], grid[i]))
    return grid[best], table


def sweep_csv(table) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["threshold", "mean_e1"])
    for t, v in table:
        writer.writerow([repr(t), repr(v)])
    return buf.getvalue()


