"""Synthetic eye images: concentric pupil/iris disks on a bright sclera, plus noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SyntheticEye:
    image: np.ndarray  # uint8 (H, W, 3)
    iris: np.ndarray  # bool (H, W): annulus between pupil and limbus
    inner: np.ndarray  # bool (H, W): pupil disk
    outer: np.ndarray  # bool (H, W): full iris disk, pupil included
    center: tuple[float, float]
    radii: tuple[float, float]


def disk(h: int, w: int, center: tuple[float, float], radius: float) -> np.ndarray:
    rr, cc = np.mgrid[:h, :w]
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius**2


def make_eye(
    h: int,
    w: int,
    center: tuple[float, float],
    pupil_radius: float,
    iris_radius: float,
    noise: float = 0.05,
    rng: np.random.Generator | None = None,
    levels: tuple[float, float, float] = (0.08, 0.45, 0.85),
) -> SyntheticEye:
    inner = disk(h, w, center, pupil_radius)
    outer = disk(h, w, center, iris_radius) | inner
    pupil_level, iris_level, sclera_level = levels
    gray = np.full((h, w), sclera_level)
    gray[outer] = iris_level
    gray[inner] = pupil_level
    if noise > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        gray = gray + rng.normal(0, noise, size=gray.shape)
    img = np.clip(np.round(gray * 255), 0, 255).astype(np.uint8)
    return SyntheticEye(np.repeat(img[:, :, None], 3, axis=2), outer & ~inner, inner, outer, center, (pupil_radius, iris_radius))


def random_eye(h: int, w: int, rng: np.random.Generator, noise: float = 0.05) -> SyntheticEye:
    """An eye with random centre and radii that fits inside the frame."""
    side = min(h, w)
    iris_r = rng.uniform(0.2, 0.32) * side
    pupil_r = rng.uniform(0.3, 0.5) * iris_r
    margin = iris_r + 1
    cy = rng.uniform(margin, h - margin)
    cx = rng.uniform(margin, w - margin)
    return make_eye(h, w, (cy, cx), pupil_r, iris_r, noise=noise, rng=rng)
