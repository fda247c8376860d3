"""Desk-scale top-down keypoint pipeline.

Fixed-P2 pyramid selection, center-preserving box enlargement, RoIAlign
feature extraction, and a global-context keypoint head, with training,
ablation, and OKS/AP evaluation harnesses.
"""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigError, DataError, NumericError,
                     PoseRefineError, ShapeError)
from .geometry import Box, ImageSize, enlarge_box, jitter_box, roi_align
from .keypoints import KEYPOINT_NAMES, NUM_KEYPOINTS, KeypointSet
from .tensor import Tensor, grad_check

__all__ = [
    "Box", "CheckpointError", "ConfigError", "DataError", "ImageSize",
    "KEYPOINT_NAMES", "KeypointSet", "NUM_KEYPOINTS", "NumericError",
    "PoseRefineError", "ShapeError", "Tensor", "enlarge_box", "grad_check",
    "jitter_box", "roi_align",
]
