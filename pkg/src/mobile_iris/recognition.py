"""
Nearest-neighbour iris identification with cosine similarity, run over
the five-fold 4-train/1-test protocol.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .dataset import FoldPlan, Manifest
from .errors import ConfigurationError, EmptyMaskError, IrisError
from .io_utils import read_image, read_mask, resize_bilinear

FEATURE_SIZE = 64


class FeatureError(IrisError, ValueError):
    """Feature extraction failed for a record."""


def extract_feature(image, seg_mask, size: int = FEATURE_SIZE) -> np.ndarray:
    """Masked grayscale, cropped to the mask's bounding box, resized to ``size``², L2-normalized.

    Args:
        image: (H, W, 3) or (H, W) array, any numeric dtype.
        seg_mask: boolean (H, W) iris mask.
        size: side of the resampled patch.

    Returns:
        float64 vector of length ``size * size`` with unit norm.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(seg_mask, dtype=bool)
    gray = image.mean(axis=2) if image.ndim == 3 else image
    if gray.shape != mask.shape:
        raise FeatureError(f"image {gray.shape} and mask {mask.shape} differ in size")
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        raise EmptyMaskError("cannot extract a feature from an empty mask")
    patch = (gray * mask)[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1]
    vec = resize_bilinear(patch, size, size).ravel()
    norm = np.linalg.norm(vec)
    if not np.isfinite(norm) or norm == 0:
        raise FeatureError("masked region is all zero")
    return vec / norm


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ConfigurationError(f"feature lengths differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise FeatureError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def classify_nn(probe, gallery) -> str:
    """Subject of the most similar gallery vector; exact ties go to the lowest subject id."""
    if len(gallery) == 0:
        raise ConfigurationError("gallery is empty")
    best_sim, best_subject = -np.inf, None
    for vec, subject in gallery:
        sim = cosine_similarity(probe, vec)
        if sim > best_sim or (sim == best_sim and subject < best_subject):
            best_sim, best_subject = sim, subject
    return best_subject


@dataclass
class MatchReport:
    fold_accuracy: list[float]
    mean_accuracy: float
    confusion: dict[str, dict[str, int]] = field(default_factory=dict)  # true -> predicted -> count

    def to_json(self) -> str:
        return json.dumps(
            {"fold_accuracy": self.fold_accuracy, "mean_accuracy": self.mean_accuracy, "confusion": self.confusion},
            indent=2,
            sort_keys=True,
        )


def evaluate_folds(features: dict, fold_plan: FoldPlan) -> MatchReport:
    """Score a precomputed ``{image id: vector}`` map against every fold."""
    accuracies = []
    confusion: dict[str, Counter] = {s: Counter() for s in fold_plan.subjects}
    for fold in fold_plan.folds:
        gallery = [(features[i], s) for s, ids in sorted(fold.train.items()) for i in ids]
        hits = 0
        for subject, test_id in sorted(fold.test.items()):
            predicted = classify_nn(features[test_id], gallery)
            confusion[subject][predicted] += 1
            hits += predicted == subject
        accuracies.append(hits / len(fold.test))
    mean = float(np.mean(accuracies)) if accuracies else 0.0
    return MatchReport(accuracies, mean, {s: dict(sorted(c.items())) for s, c in confusion.items()})


def run_protocol(manifest: Manifest, fold_plan: FoldPlan, seg_model=None, threshold: float = 0.5, extractor=extract_feature) -> MatchReport:
    """Extract one feature per planned image, then classify fold by fold.

    Masks come from ground truth (``seg_mask``) unless ``seg_model`` is given.
    """
    from .pipeline import segment

    records = manifest.by_id()
    features = {}
    for fold_index, fold in enumerate(fold_plan.folds):
        ids = list(fold.test.values()) + [i for v in fold.train.values() for i in v]
        for image_id in ids:
            if image_id in features:
                continue
            try:
                rec = records[image_id]
                image = read_image(rec.image)
                if seg_model is not None:
                    mask = segment(image, seg_model, threshold)
                elif rec.seg_mask is not None:
                    mask = read_mask(rec.seg_mask)
                else:
                    raise FeatureError("no seg_mask and no segmentation model")
                features[image_id] = extractor(image, mask)
            except (IrisError, KeyError, OSError) as exc:
                raise FeatureError(f"fold {fold_index}: record {image_id!r}: {exc}") from exc
    return evaluate_folds(features, fold_plan)
