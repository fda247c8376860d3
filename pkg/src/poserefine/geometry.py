"""Box arithmetic and RoI feature extraction.

Boxes live in continuous image-pixel coordinates (origin top-left) and are
never clipped to the image: enlargement may push them outside, and the
sampler treats everything beyond the feature grid as zeros (the black-
background convention).
"""

from dataclasses import dataclass

from . import tensor
from .errors import ShapeError

ROI_OUTPUT_SIZE = (14, 14)
ROI_SAMPLING_RATIO = 2


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ShapeError(
                f"Box requires x2 > x1 and y2 > y1, got "
                f"({self.x1}, {self.y1}, {self.x2}, {self.y2})")
        if not (0.0 <= self.score <= 1.0):
            raise ShapeError(f"Box score must be in [0, 1], got {self.score}")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def center(self):
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @property
    def area(self):
        return self.width * self.height

    def as_xyxy(self):
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class ImageSize:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ShapeError(
                f"ImageSize must be positive, got {self.width}x{self.height}")


def enlarge_box(box, factor):
    """Scale width and height about the box center; no clipping."""
    factor = float(factor)
    if factor < 1.0:
        raise ShapeError(f"enlarge_box: factor must be >= 1.0, got {factor}")
    cx, cy = box.center
    hw = 0.5 * box.width * factor
    hh = 0.5 * box.height * factor
    return Box(cx - hw, cy - hh, cx + hw, cy + hh, box.score)


def jitter_box(box, scale_noise, shift_noise, rng):
    """Simulated proposal inaccuracy: multiplicative size noise plus a
    center shift, both uniform and proportional to the box extent."""
    if not (0.0 <= scale_noise <= 0.5 and 0.0 <= shift_noise <= 0.5):
        raise ShapeError(
            f"jitter_box: noise magnitudes must be in [0, 0.5], got "
            f"scale={scale_noise} shift={shift_noise}")
    sw = 1.0 + rng.uniform(-scale_noise, scale_noise)
    sh = 1.0 + rng.uniform(-scale_noise, scale_noise)
    dx = rng.uniform(-shift_noise, shift_noise) * box.width
    dy = rng.uniform(-shift_noise, shift_noise) * box.height
    cx, cy = box.center
    hw = 0.5 * box.width * sw
    hh = 0.5 * box.height * sh
    return Box(cx + dx - hw, cy + dy - hh, cx + dx + hw, cy + dy + hh, box.score)


def roi_align(feature, box, spatial_scale, output_size=ROI_OUTPUT_SIZE,
              sampling_ratio=ROI_SAMPLING_RATIO):
    """Average-of-bilinear-samples RoI extraction from one pyramid level.

    The box is mapped to feature coordinates with the half-pixel shift
    (scale then subtract 0.5); each output bin averages sampling_ratio^2
    samples, and taps outside the grid contribute zero, so regions beyond
    the image come back as black. Differentiable in the feature tensor.
    """
    spatial_scale = float(spatial_scale)
    fx1 = box.x1 * spatial_scale - 0.5
    fy1 = box.y1 * spatial_scale - 0.5
    fx2 = box.x2 * spatial_scale - 0.5
    fy2 = box.y2 * spatial_scale - 0.5
    if (fx2 - fx1) < 1e-6 or (fy2 - fy1) < 1e-6:
        raise ShapeError(
            f"roi_align: degenerate box after scaling, span "
            f"{fx2 - fx1:.3g}x{fy2 - fy1:.3g}")
    return tensor.roi_bilinear(feature, (fx1, fy1, fx2, fy2), output_size,
                               sampling_ratio)
