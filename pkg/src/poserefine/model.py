"""End-to-end model assembly: backbone + FPN + keypoint head.

Boxes enter the pipeline from annotations (optionally jittered to mimic
detector proposals); the model enlarges them, picks a pyramid level,
extracts RoI features, and decodes per-instance heatmaps back to image
coordinates.
"""

import numpy as np

from . import tensor
from .backbone import (FPN, Backbone, FixedP2, PYRAMID_STRIDES, select_level)
from .errors import CheckpointError
from .evaluation import GroundTruth, Prediction
from .geometry import ROI_SAMPLING_RATIO, enlarge_box, jitter_box, roi_align
from .head import KeypointHead, decode_heatmaps, encode_targets


class PoseModel:
    def __init__(self, backbone_cfg, fpn_channels, head_cfg, strategy=None,
                 magnification=1.3, seed=0):
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(backbone_cfg, rng)
        self.fpn = FPN(backbone_cfg.stage_channels, fpn_channels, rng)
        self.head = KeypointHead(head_cfg, fpn_channels, rng)
        self.strategy = FixedP2() if strategy is None else strategy
        self.magnification = float(magnification)
        self.head_cfg = head_cfg

    def parameters(self):
        """All trainable tensors keyed by a stable hierarchical name."""
        out = {}
        for prefix, part in (("backbone", self.backbone), ("fpn", self.fpn),
                             ("head", self.head)):
            for name, p in part.params.items():
                out[f"{prefix}/{name}"] = p
        return out

    def weights_arrays(self):
        return {name: p.data for name, p in self.parameters().items()}

    def load_weights(self, arrays):
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise CheckpointError(f"checkpoint is missing tensors: {missing[:4]}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"shape mismatch for tensor {name!r}: checkpoint has "
                    f"{arr.shape}, model expects {p.data.shape}")
        for name, p in params.items():
            fresh = np.ascontiguousarray(arrays[name], dtype=np.float64).copy()
            fresh.flags.writeable = False
            p.data = fresh

    def pyramid(self, pixels):
        image = tensor.Tensor(pixels)
        return self.fpn.forward(self.backbone.forward(image))

    def instance_heatmaps(self, pyramid, box, detach_features=False,
                          strategy=None, magnification=None):
        """Heatmap logits for one proposal plus the enlarged box used."""
        strategy = self.strategy if strategy is None else strategy
        mag = self.magnification if magnification is None else magnification
        roi_box = enlarge_box(box, mag)
        level = select_level(roi_box, strategy)
        feats = roi_align(self.fpn_level(pyramid, level), roi_box,
                          1.0 / PYRAMID_STRIDES[level],
                          self.head_cfg.roi_size, ROI_SAMPLING_RATIO)
        if detach_features:
            feats = feats.detach()
        return self.head.forward(feats), roi_box

    @staticmethod
    def fpn_level(pyramid, level):
        return pyramid.level(level)

    def predict_instance(self, pyramid, box, strategy=None, magnification=None):
        heatmaps, roi_box = self.instance_heatmaps(
            pyramid, box, strategy=strategy, magnification=magnification)
        kps = decode_heatmaps(heatmaps.data, roi_box)
        score = float(box.score * kps.score.mean())
        return kps, score

    def training_targets(self, keypoints, roi_box):
        return encode_targets(keypoints, roi_box, self.head_cfg.heatmap_size)


def predict_dataset(model, records, jitter=(0.0, 0.0), seed=0, strategy=None,
                    magnification=None):
    """Run the model over every annotation of a dataset.

    Proposals are ground-truth boxes, optionally jittered to mimic an
    imperfect detector. Returns (predictions, ground_truths) ready for
    evaluation; instance ids pair them one to one.
    """
    rng = np.random.default_rng(seed)
    scale_noise, shift_noise = jitter
    predictions = []
    ground_truths = []
    instance_id = 0
    for record in records:
        if not record.annotations:
            continue
        pyramid = model.pyramid(record.pixels)
        for ann in record.annotations:
            proposal = ann.box
            if scale_noise > 0 or shift_noise > 0:
                proposal = jitter_box(proposal, scale_noise, shift_noise, rng)
            kps, score = model.predict_instance(
                pyramid, proposal, strategy=strategy, magnification=magnification)
            predictions.append(Prediction(record.image_id, instance_id, kps,
                                          score))
            ground_truths.append(GroundTruth(record.image_id, instance_id,
                                             ann.keypoints, ann.area))
            instance_id += 1
    return predictions, ground_truths
