"""Toy convolutional backbone, FPN fusion, and pyramid level selection.

The backbone stands in for a full classification network at desk scale:
a strided stem plus four stages with cumulative strides 4/8/16/32. The
pyramid combines lateral 1x1 projections with top-down bilinear upsampling
and per-level 3x3 smoothing. Two level-selection strategies are provided:
the size-based assignment detection pipelines use, and the fixed highest-
resolution level this project argues for.
"""

import math
from dataclasses import dataclass

from . import tensor
from .errors import ShapeError
from .geometry import ROI_OUTPUT_SIZE, ROI_SAMPLING_RATIO, enlarge_box, roi_align

PYRAMID_LEVELS = (2, 3, 4, 5)
PYRAMID_STRIDES = {2: 4, 3: 8, 4: 16, 5: 32}


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64, 128)
    convs_per_stage: int = 3

    def __post_init__(self):
        if len(self.stage_channels) != 4:
            raise ShapeError("BackboneConfig needs exactly 4 stage widths")
        if self.stem_channels < 1 or self.convs_per_stage < 1 \
                or any(c < 1 for c in self.stage_channels):
            raise ShapeError("BackboneConfig widths/depths must be positive")


@dataclass(frozen=True)
class SizeBased:
    """Assign by sqrt(box area): floor(k0 + log2(sqrt(wh)/canonical)),
    clamped to [2, 5]."""
    k0: int = 4
    canonical: float = 224.0


@dataclass(frozen=True)
class FixedP2:
    """Always take the stride-4 level."""


@dataclass(frozen=True)
class FixedLevel:
    """Force one pyramid level; generalizes FixedP2 for level sweeps."""
    level: int

    def __post_init__(self):
        if self.level not in PYRAMID_LEVELS:
            raise ShapeError(f"FixedLevel: level must be in {PYRAMID_LEVELS}")


def _conv_params(params, rng, name, cout, cin, k):
    params[f"{name}.w"] = tensor.he_uniform(rng, (cout, cin, k, k), cin * k * k)
    params[f"{name}.b"] = tensor.parameter([0.0] * cout)


def _apply_conv(params, name, x, stride=1, padding=1):
    return tensor.conv2d(x, params[f"{name}.w"], params[f"{name}.b"],
                         stride=stride, padding=padding)


class Backbone:
    """Stem (stride 2) + four stages, each opening with a stride-2 conv."""

    def __init__(self, config, rng):
        self.config = config
        self.params = {}
        _conv_params(self.params, rng, "stem", config.stem_channels, 3, 3)
        cin = config.stem_channels
        for s, cout in enumerate(config.stage_channels):
            for j in range(config.convs_per_stage):
                _conv_params(self.params, rng, f"s{s}.c{j}",
                             cout, cin if j == 0 else cout, 3)
            cin = cout

    def forward(self, image):
        if image.data.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"backbone: expected 3,H,W image, got {image.shape}")
        h, w = image.shape[1], image.shape[2]
        if h % 32 or w % 32:
            raise ShapeError(
                f"backbone: spatial extents must be multiples of 32, got {h}x{w}")
        x = tensor.relu(_apply_conv(self.params, "stem", image, stride=2))
        stages = []
        for s in range(4):
            for j in range(self.config.convs_per_stage):
                x = tensor.relu(_apply_conv(self.params, f"s{s}.c{j}", x,
                                            stride=2 if j == 0 else 1))
            stages.append(x)
        return stages


@dataclass(frozen=True)
class FeaturePyramid:
    p2: tensor.Tensor
    p3: tensor.Tensor
    p4: tensor.Tensor
    p5: tensor.Tensor

    def level(self, idx):
        return {2: self.p2, 3: self.p3, 4: self.p4, 5: self.p5}[idx]

    @property
    def channels(self):
        return self.p2.shape[0]


class FPN:
    """Lateral 1x1 projections, top-down 2x bilinear + add, 3x3 smoothing."""

    def __init__(self, stage_channels, out_channels, rng):
        self.out_channels = out_channels
        self.params = {}
        for i, cin in enumerate(stage_channels):
            _conv_params(self.params, rng, f"lat{i}", out_channels, cin, 1)
            _conv_params(self.params, rng, f"out{i}", out_channels, out_channels, 3)

    def forward(self, stages):
        if len(stages) != 4:
            raise ShapeError(f"fpn: expected 4 stage maps, got {len(stages)}")
        for a, b in zip(stages, stages[1:]):
            if a.shape[1] != 2 * b.shape[1] or a.shape[2] != 2 * b.shape[2]:
                raise ShapeError(
                    f"fpn: stage extents must halve exactly, got {a.shape} then "
                    f"{b.shape}")
        laterals = [_apply_conv(self.params, f"lat{i}", s, padding=0)
                    for i, s in enumerate(stages)]
        merged = [laterals[3]]
        for i in (2, 1, 0):
            up = tensor.bilinear_upsample(merged[0], 2)
            merged.insert(0, tensor.add(laterals[i], up))
        outs = [_apply_conv(self.params, f"out{i}", m, padding=1)
                for i, m in enumerate(merged)]
        return FeaturePyramid(*outs)


def select_level(box, strategy):
    """Map a box to a pyramid level index in {2, 3, 4, 5}."""
    if isinstance(strategy, FixedP2):
        return 2
    if isinstance(strategy, FixedLevel):
        return strategy.level
    if isinstance(strategy, SizeBased):
        size = math.sqrt(box.width * box.height)
        k = math.floor(strategy.k0 + math.log2(size / strategy.canonical))
        return int(min(5, max(2, k)))
    raise ShapeError(f"select_level: unknown strategy {strategy!r}")


def extract_person_features(pyramid, box, strategy, magnification,
                            output_size=ROI_OUTPUT_SIZE,
                            sampling_ratio=ROI_SAMPLING_RATIO):
    """Enlarge the box, pick a level, and pull RoI features from it."""
    roi_box = enlarge_box(box, magnification)
    level = select_level(roi_box, strategy)
    feature = pyramid.level(level)
    return roi_align(feature, roi_box, 1.0 / PYRAMID_STRIDES[level],
                     output_size, sampling_ratio)
