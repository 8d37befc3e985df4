"""Mobile-UNet iris segmentation and localization in numpy."""

from .errors import IrisError
from .metrics import dice, e1, hausdorff, normalized_hausdorff, rank_sum
from .mobile_unet import (
    MobileUNet,
    build_model,
    load_weights,
    localization_config,
    reduced_config,
    save_weights,
    segmentation_config,
)
from .pipeline import localize, segment
from .training import TrainConfig, split_dataset, train

__version__ = "0.1.0"

__all__ = [
    "IrisError",
    "MobileUNet",
    "TrainConfig",
    "build_model",
    "dice",
    "e1",
    "hausdorff",
    "load_weights",
    "localization_config",
    "localize",
    "normalized_hausdorff",
    "rank_sum",
    "reduced_config",
    "save_weights",
    "segment",
    "segmentation_config",
    "split_dataset",
    "train",
]
