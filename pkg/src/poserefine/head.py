"""Keypoint detection branch: baseline conv stack and global-context variants.

Three interchangeable heads map RoI features (C,14,14) to 17 heatmap
channels at 4x the RoI resolution:

  baseline8     eight 3x3 convs (receptive field 17) + deconv + bilinear 2x
  gcm_series    [global-context block -> four 3x3 convs] twice, same up-path
  gcm_parallel  per repetition, the context block and the four-conv branch
                consume the same input and are summed before the relu

The global-context block is multi-head self-attention over all spatial
positions with per-axis relative position encodings (content-content
q.kT plus content-position q.(Rh(+)Rw)T), a 3x3 conv for channel-aligned
integration of the attended features, and a residual connection.

Also houses heatmap target encoding, the spatial softmax cross-entropy
loss, argmax decoding, and receptive-field accounting for the trunks.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor
from .errors import ShapeError
from .keypoints import NUM_KEYPOINTS, KeypointSet

VARIANTS = ("baseline8", "gcm_series", "gcm_parallel")


@dataclass(frozen=True)
class HeadConfig:
    variant: str = "gcm_series"
    head_channels: int = 32
    heads: int = 4
    heatmap_size: tuple = (56, 56)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ShapeError(f"HeadConfig: unknown variant {self.variant!r}")
        if self.head_channels < 1 or self.heads < 1:
            raise ShapeError("HeadConfig: channels and heads must be positive")
        if self.head_channels % self.heads:
            raise ShapeError(
                f"HeadConfig: head_channels={self.head_channels} not divisible "
                f"by heads={self.heads}")
        hm = tuple(int(v) for v in self.heatmap_size)
        if len(hm) != 2 or any(v < 4 or v % 4 for v in hm):
            raise ShapeError(
                f"HeadConfig: heatmap_size must be two multiples of 4, got {hm}")
        object.__setattr__(self, "heatmap_size", hm)

    @property
    def roi_size(self):
        return (self.heatmap_size[0] // 4, self.heatmap_size[1] // 4)


class GcmBlock:
    """Self-attention + 3x3 conv + residual over a fixed C,h,w extent."""

    def __init__(self, channels, heads, spatial, rng, prefix="gcm"):
        if channels % heads:
            raise ShapeError(
                f"GcmBlock: channels={channels} not divisible by heads={heads}")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        self.spatial = tuple(spatial)
        h, w = self.spatial
        p = {}
        # query/key projections start at a quarter of the He bound: the
        # content logits are quadratic in this scale, and a gentle start
        # keeps the attention softmax stable at desk-scale learning rates
        for name, frac in (("wq", 0.25), ("wk", 0.25), ("wv", 1.0)):
            bound = frac * math.sqrt(6.0 / channels)
            p[f"{prefix}.{name}"] = tensor.parameter(
                rng.uniform(-bound, bound, size=(channels, channels)))
        p[f"{prefix}.rel_h"] = tensor.parameter(
            rng.uniform(-0.1, 0.1, size=(h, self.head_dim)))
        p[f"{prefix}.rel_w"] = tensor.parameter(
            rng.uniform(-0.1, 0.1, size=(w, self.head_dim)))
        p[f"{prefix}.conv.w"] = tensor.he_uniform(
            rng, (channels, channels, 3, 3), channels * 9)
        p[f"{prefix}.conv.b"] = tensor.parameter([0.0] * channels)
        self.prefix = prefix
        self.params = p

    def _p(self, name):
        return self.params[f"{self.prefix}.{name}"]


def mhsa_forward(features, block):
    """BoTNet-style multi-head self-attention over all spatial positions.

    Per head: logits = q.kT + q.(Rh(+)Rw)T, softmax over the h*w key
    positions, output = attention-weighted sum of values; the heads are
    concatenated back to the input channel count.
    """
    c, h, w = _check_block_input(features, block)
    hw = h * w
    xt = tensor.transpose2d(tensor.reshape(features, (c, hw)))  # (hw, c)
    q = tensor.matmul(xt, block._p("wq"))
    k = tensor.matmul(xt, block._p("wk"))
    v = tensor.matmul(xt, block._p("wv"))
    pos = tensor.axial_sum(block._p("rel_h"), block._p("rel_w"))  # (hw, d)
    pos_t = tensor.transpose2d(pos)
    outs = []
    d = block.head_dim
    for i in range(block.heads):
        qi = tensor.slice_cols(q, i * d, (i + 1) * d)
        ki = tensor.slice_cols(k, i * d, (i + 1) * d)
        vi = tensor.slice_cols(v, i * d, (i + 1) * d)
        logits = tensor.add(tensor.matmul(qi, tensor.transpose2d(ki)),
                            tensor.matmul(qi, pos_t))
        att = tensor.softmax_rows(logits)
        outs.append(tensor.matmul(att, vi))
    merged = outs[0] if len(outs) == 1 else tensor.concat_cols(outs)
    return tensor.reshape(tensor.transpose2d(merged), (c, h, w))


def attention_maps(features, block):
    """Per-head attention matrices (hw, hw) as plain arrays, for analysis."""
    c, h, w = _check_block_input(features, block)
    hw = h * w
    xt = features.data.reshape(c, hw).T
    q = xt @ block._p("wq").data
    k = xt @ block._p("wk").data
    pos = (block._p("rel_h").data[:, None, :]
           + block._p("rel_w").data[None, :, :]).reshape(hw, -1)
    maps = []
    d = block.head_dim
    for i in range(block.heads):
        qi = q[:, i * d:(i + 1) * d]
        ki = k[:, i * d:(i + 1) * d]
        logits = qi @ ki.T + qi @ pos.T
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        maps.append(e / e.sum(axis=1, keepdims=True))
    return maps


def gcm_forward(features, block, final_relu=True):
    """features + conv3x3(attention(features)), relu after the residual."""
    _check_block_input(features, block)
    attended = mhsa_forward(features, block)
    integrated = tensor.conv2d(attended, block._p("conv.w"), block._p("conv.b"),
                               stride=1, padding=1)
    out = tensor.add(features, integrated)
    return tensor.relu(out) if final_relu else out


def _check_block_input(features, block):
    if features.data.ndim != 3:
        raise ShapeError(f"gcm: expected C,h,w features, got {features.shape}")
    c, h, w = features.shape
    if c != block.channels:
        raise ShapeError(
            f"gcm: block built for {block.channels} channels, input has {c}")
    if (h, w) != block.spatial:
        raise ShapeError(
            f"gcm: block built for spatial {block.spatial}, input is {(h, w)}")
    return c, h, w


class KeypointHead:
    """One of the three head variants plus the shared up-path."""

    def __init__(self, config, in_channels, rng):
        self.config = config
        self.in_channels = in_channels
        hc = config.head_channels
        rh, rw = config.roi_size
        self.params = {}
        self.blocks = []
        if config.variant == "baseline8":
            for j in range(8):
                self._conv(rng, f"c{j}", hc, in_channels if j == 0 else hc, 3)
        else:
            self._conv(rng, "align", hc, in_channels, 1)
            for rep in range(2):
                block = GcmBlock(hc, config.heads, (rh, rw), rng,
                                 prefix=f"r{rep}.gcm")
                self.blocks.append(block)
                self.params.update(block.params)
                for j in range(4):
                    self._conv(rng, f"r{rep}.c{j}", hc, hc, 3)
        self.params["deconv.w"] = tensor.he_uniform(
            rng, (hc, NUM_KEYPOINTS, 2, 2), hc * 4)

    def _conv(self, rng, name, cout, cin, k):
        self.params[f"{name}.w"] = tensor.he_uniform(
            rng, (cout, cin, k, k), cin * k * k)
        self.params[f"{name}.b"] = tensor.parameter([0.0] * cout)

    def _conv_relu(self, name, x, padding=1):
        y = tensor.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                          stride=1, padding=padding)
        return tensor.relu(y)

    def forward(self, features):
        rh, rw = self.config.roi_size
        if features.shape != (self.in_channels, rh, rw):
            raise ShapeError(
                f"head: expected features ({self.in_channels}, {rh}, {rw}), "
                f"got {features.shape}")
        x = features
        if self.config.variant == "baseline8":
            for j in range(8):
                x = self._conv_relu(f"c{j}", x)
        else:
            x = tensor.conv2d(x, self.params["align.w"], self.params["align.b"],
                              stride=1, padding=0)
            for rep in range(2):
                if self.config.variant == "gcm_series":
                    x = gcm_forward(x, self.blocks[rep])
                    for j in range(4):
                        x = self._conv_relu(f"r{rep}.c{j}", x)
                else:
                    a = gcm_forward(x, self.blocks[rep], final_relu=False)
                    b = x
                    for j in range(3):
                        b = self._conv_relu(f"r{rep}.c{j}", b)
                    b = tensor.conv2d(b, self.params[f"r{rep}.c3.w"],
                                      self.params[f"r{rep}.c3.b"],
                                      stride=1, padding=1)
                    x = tensor.relu(tensor.add(a, b))
        up = tensor.conv_transpose2d(x, self.params["deconv.w"], stride=2)
        factor = self.config.heatmap_size[0] // up.shape[1]
        return tensor.bilinear_upsample(up, factor)


def head_forward(features, head):
    return head.forward(features)


# ---------------------------------------------------------------------------
# receptive-field accounting (pre-upsampling trunk)
# ---------------------------------------------------------------------------

def trunk_layers(config):
    """Layer descriptors of the trunk: ("conv", k, stride) or ("global",)."""
    if config.variant == "baseline8":
        return [("conv", 3, 1)] * 8
    layers = [("conv", 1, 1)]
    for _ in range(2):
        layers.append(("global",))
        layers.append(("conv", 3, 1))  # channel-aligning conv inside the block
        layers.extend([("conv", 3, 1)] * 4)
    return layers


def rf_from_layers(layers):
    """(receptive field, covers-everything flag) via the usual recurrence."""
    rf, jump = 1, 1
    is_global = False
    for layer in layers:
        if layer[0] == "global":
            is_global = True
            continue
        _, k, s = layer
        rf += (k - 1) * jump
        jump *= s
    return rf, is_global


def receptive_field(config):
    """Trunk receptive field in input cells; attention makes it span the
    whole RoI, reported as the full input extent."""
    rf, is_global = rf_from_layers(trunk_layers(config))
    if is_global:
        return max(config.roi_size)
    return rf


def receptive_field_report(config):
    rf, is_global = rf_from_layers(trunk_layers(config))
    return {
        "variant": config.variant,
        "conv_rf": rf,
        "global": is_global,
        "reported": "global" if is_global else str(rf),
        "input_extent": max(config.roi_size),
    }


# ---------------------------------------------------------------------------
# targets, loss, decoding
# ---------------------------------------------------------------------------

def encode_targets(keypoints, box, heatmap_size):
    """Map labeled keypoints into flat heatmap cell indices.

    Keypoints outside the box or with v == 0 are masked out. The box edge
    is inclusive: points exactly on x2/y2 land in the last cell.
    """
    hm_h, hm_w = (int(v) for v in heatmap_size)
    u = (keypoints.xy[:, 0] - box.x1) / box.width * hm_w
    v = (keypoints.xy[:, 1] - box.y1) / box.height * hm_h
    inside = (u >= 0.0) & (u <= hm_w) & (v >= 0.0) & (v <= hm_h)
    valid = inside & (keypoints.vis > 0)
    col = np.minimum(np.floor(u), hm_w - 1).astype(np.int64)
    row = np.minimum(np.floor(v), hm_h - 1).astype(np.int64)
    col = np.clip(col, 0, hm_w - 1)
    row = np.clip(row, 0, hm_h - 1)
    return row * hm_w + col, valid


def keypoint_loss(heatmaps, targets, valid):
    """Mean -log softmax probability at the target cell over valid keypoints."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        warnings.warn("keypoint_loss: no valid targets in this instance; "
                      "contributing zero loss", RuntimeWarning)
        return tensor.Tensor(np.array(0.0))
    return tensor.spatial_nll(heatmaps, targets, valid)


def decode_heatmaps(heatmaps, box):
    """Argmax decode back to image coordinates at cell centers.

    Ties break toward the smallest row-major index; the score is the
    spatial softmax probability at the argmax.
    """
    arr = np.asarray(getattr(heatmaps, "data", heatmaps), dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != NUM_KEYPOINTS:
        raise ShapeError(f"decode_heatmaps: expected (17, h, w), got {arr.shape}")
    k, hm_h, hm_w = arr.shape
    flat = arr.reshape(k, hm_h * hm_w)
    m = flat.max(axis=1, keepdims=True)
    e = np.exp(flat - m)
    probs = e / e.sum(axis=1, keepdims=True)
    idx = flat.argmax(axis=1)
    row, col = np.divmod(idx, hm_w)
    x = box.x1 + (col + 0.5) * box.width / hm_w
    y = box.y1 + (row + 0.5) * box.height / hm_h
    scores = probs[np.arange(k), idx]
    return KeypointSet(xy=np.stack([x, y], axis=1), score=scores,
                       vis=np.full(k, 2, dtype=np.int64))
