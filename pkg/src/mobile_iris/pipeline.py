"""
Inference pipelines: whole-image segmentation, then centroid-crop
localization with the result mapped back to original image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, EmptyMaskError, ImageFormatError
from .io_utils import resize_bilinear, resize_nearest
from .metrics import boundary_points

DEFAULT_MARGIN = 1.5
DEFAULT_THRESHOLD = 0.5

SEG_TINT = np.array([0, 255, 0], dtype=np.uint16)
INNER_COLOR = np.array([255, 0, 0], dtype=np.uint8)
OUTER_COLOR = np.array([0, 128, 255], dtype=np.uint8)


@dataclass(frozen=True)
class CropWindow:
    top: int
    left: int
    side: int
    target_size: int = 224

    def __post_init__(self):
        if self.side < 1 or self.target_size < 1:
            raise ConfigurationError(f"window side and target size must be >= 1, got {self.side}, {self.target_size}")

    def intersects(self, h: int, w: int) -> bool:
        return self.top < h and self.left < w and self.top + self.side > 0 and self.left + self.side > 0

    @property
    def scale(self) -> float:
        """Original pixels per network pixel."""
        return self.side / self.target_size


@dataclass
class LocalizationResult:
    inner_mask: np.ndarray
    outer_mask: np.ndarray
    window: CropWindow
    empty_segmentation_fallback: bool = False
    seg_mask: np.ndarray | None = None


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _input_hw(model) -> int:
    return int(model.input_hw)


def _check_image(image) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ImageFormatError(f"expected 8-bit image, got dtype {image.dtype}")
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError(f"expected (H, W, 3) image, got shape {image.shape}")
    return image


def preprocess(image, size: int = 224, normalization=None) -> np.ndarray:
    """uint8 (H, W, 3) -> float32 (3, size, size) in [0, 1], optionally standardized per channel."""
    image = _check_image(image)
    h, w = image.shape[:2]
    if h < 8 or w < 8:
        raise DimensionError(f"image must be at least 8x8, got {h}x{w}")
    return _to_network(image, size, normalization)


def _to_network(image: np.ndarray, size: int, normalization) -> np.ndarray:
    x = resize_bilinear(image, size, size) / 255.0
    if normalization is not None:
        mean, std = (np.asarray(v, dtype=np.float64) for v in normalization)
        x = (x - mean) / std
    return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=np.float32)


def binarize(probs, threshold: float) -> np.ndarray:
    """``probs >= threshold`` on exact values.

    float32 maps are widened first; otherwise NumPy would round the
    threshold to float32 and e.g. accept float32(0.35) < 0.35.
    """
    return np.asarray(probs, dtype=np.float64) >= threshold


def predict_masks(model, image, threshold: float) -> np.ndarray:
    """Network-resolution boolean masks, one per output channel."""
    x = _to_network(_check_image(image), _input_hw(model), getattr(model, "normalization", None))
    return binarize(model.predict(x), threshold)


def segment(image, model, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Segment the iris; returns a boolean mask at the image's own resolution."""
    if not 0 < threshold < 1:
        raise ConfigurationError(f"threshold must lie in (0, 1), got {threshold}")
    if model.task != "segmentation":
        raise ConfigurationError(f"segment needs a segmentation model, got a {model.task} model")
    image = _check_image(image)
    mask = predict_masks(model, image, threshold)[0]
    return resize_nearest(mask, *image.shape[:2])


def iris_center(mask) -> tuple[int, int]:
    """Centroid of the foreground, rounded half-up to integer pixels."""
    rows, cols = np.nonzero(np.asarray(mask, dtype=bool))
    if len(rows) == 0:
        raise EmptyMaskError("cannot locate the iris centre in an empty mask")
    return _round_half_up(rows.mean()), _round_half_up(cols.mean())


def crop_window(mask, image_dims: tuple[int, int], margin_factor: float = DEFAULT_MARGIN, target_size: int = 224) -> CropWindow:
    """Square window centred on the iris, ``margin_factor`` times the larger bbox side.

    The window is translated to lie inside the image, and only shrunk if
    the image itself is smaller than the window.
    """
    mask = np.asarray(mask, dtype=bool)
    cr, cc = iris_center(mask)
    rows, cols = np.nonzero(mask)
    extent = max(rows.max() - rows.min() + 1, cols.max() - cols.min() + 1)
    h, w = image_dims
    side = max(1, _round_half_up(margin_factor * extent))
    side = min(side, h, w)
    top = min(max(cr - side // 2, 0), h - side)
    left = min(max(cc - side // 2, 0), w - side)
    return CropWindow(int(top), int(left), int(side), target_size)


def crop(array: np.ndarray, window: CropWindow) -> np.ndarray:
    """Extract the window from an (H, W, ...) array; area outside the image is zero."""
    array = np.asarray(array)
    h, w = array.shape[:2]
    out = np.zeros((window.side, window.side) + array.shape[2:], dtype=array.dtype)
    r0, c0 = max(window.top, 0), max(window.left, 0)
    r1, c1 = min(window.top + window.side, h), min(window.left + window.side, w)
    if r1 > r0 and c1 > c0:
        out[r0 - window.top : r1 - window.top, c0 - window.left : c1 - window.left] = array[r0:r1, c0:c1]
    return out


def crop_mask(mask, window: CropWindow) -> np.ndarray:
    """Crop a mask and resample it nearest-neighbour to the network size."""
    return resize_nearest(crop(np.asarray(mask, dtype=bool), window), window.target_size, window.target_size)


def map_back(mask_t, window: CropWindow, original_dims: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`crop_mask`; pixels outside the window are background."""
    mask_t = np.asarray(mask_t, dtype=bool)
    h, w = original_dims
    if mask_t.shape != (window.target_size, window.target_size):
        raise DimensionError(f"mask shape {mask_t.shape} does not match window target {window.target_size}")
    if h < 1 or w < 1 or not window.intersects(h, w):
        raise DimensionError(f"window {window} does not intersect a {h}x{w} image")
    local = resize_nearest(mask_t, window.side, window.side)
    out = np.zeros((h, w), dtype=bool)
    r0, c0 = max(window.top, 0), max(window.left, 0)
    r1, c1 = min(window.top + window.side, h), min(window.left + window.side, w)
    out[r0:r1, c0:c1] = local[r0 - window.top : r1 - window.top, c0 - window.left : c1 - window.left]
    return out


def full_image_window(image_dims: tuple[int, int], target_size: int = 224) -> CropWindow:
    h, w = image_dims
    return CropWindow(0, 0, max(h, w), target_size)


def localize(
    image,
    seg_model,
    loc_model,
    threshold: float = DEFAULT_THRESHOLD,
    margin_factor: float = DEFAULT_MARGIN,
) -> LocalizationResult:
    """Segment, crop around the iris, localize inside the crop, map both boundaries back.

    An empty segmentation falls back to a window covering the whole image
    and sets ``empty_segmentation_fallback``.
    """
    if loc_model.task != "localization":
        raise ConfigurationError(f"localize needs a localization model, got a {loc_model.task} model")
    image = _check_image(image)
    dims = image.shape[:2]
    seg = segment(image, seg_model, threshold)
    target = _input_hw(loc_model)
    fallback = False
    try:
        window = crop_window(seg, dims, margin_factor, target)
    except EmptyMaskError:
        window = full_image_window(dims, target)
        fallback = True
    masks = predict_masks(loc_model, crop(image, window), threshold)
    inner = map_back(masks[0], window, dims)
    outer = map_back(masks[1], window, dims)
    return LocalizationResult(inner & outer, outer, window, fallback, seg)


def localization_training_pair(
    image,
    window_mask,
    inner,
    outer,
    target_size: int,
    margin_factor: float = DEFAULT_MARGIN,
    normalization=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Crop an image and its inner/outer masks the way :func:`localize` will at test time.

    ``window_mask`` is whichever segmentation decides the window: the
    predicted one by default in training code, or ground truth.
    """
    image = _check_image(image)
    dims = image.shape[:2]
    try:
        window = crop_window(window_mask, dims, margin_factor, target_size)
    except EmptyMaskError:
        window = full_image_window(dims, target_size)
    x = _to_network(crop(image, window), target_size, normalization)
    y = np.stack([crop_mask(inner, window), crop_mask(outer, window)]).astype(np.float32)
    return x, y


def render_overlay(image, seg_mask, localization=None) -> np.ndarray:
    """Tint the segmentation green and trace the outer/inner boundaries.

    ``localization`` is a LocalizationResult or an (inner, outer) pair.
    """
    image = _check_image(image)
    seg = np.asarray(seg_mask, dtype=bool)
    if seg.shape != image.shape[:2]:
        raise DimensionError(f"segmentation mask {seg.shape} does not match image {image.shape[:2]}")
    out = image.copy()
    out[seg] = ((out[seg].astype(np.uint16) + SEG_TINT) // 2).astype(np.uint8)
    if localization is not None:
        if isinstance(localization, LocalizationResult):
            inner, outer = localization.inner_mask, localization.outer_mask
        else:
            inner, outer = localization
        for mask, color in ((outer, OUTER_COLOR), (inner, INNER_COLOR)):
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != image.shape[:2]:
                raise DimensionError(f"boundary mask {mask.shape} does not match image {image.shape[:2]}")
            pts = boundary_points(mask)
            out[pts[:, 0], pts[:, 1]] = color
    return out

