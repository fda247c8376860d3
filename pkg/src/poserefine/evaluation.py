"""OKS keypoint similarity, COCO-style AP, PCK, and miss-rate analysis.

Matching follows the COCO evaluator: per image, predictions in descending
score order greedily claim the unmatched ground truth with the highest
OKS at or above the threshold; precision/recall is integrated with
101-point interpolation. Medium/large splits treat out-of-range ground
truths as ignored (predictions claimed by them are dropped, not FPs).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .keypoints import KEYPOINT_NAMES, NUM_KEYPOINTS

# per-keypoint standard deviations of the COCO keypoint protocol
COCO_SIGMAS = np.array([
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
])

# falloff constants as the reference evaluator applies them (doubled sigmas)
COCO_KAPPAS = 2.0 * COCO_SIGMAS

OKS_THRESHOLDS = np.linspace(0.5, 0.95, 10)

AREA_BUCKETS = {
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, float("inf")),
}


@dataclass(frozen=True)
class Prediction:
    image_id: int
    instance_id: int
    keypoints: object  # KeypointSet
    score: float


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    instance_id: int
    keypoints: object  # KeypointSet
    area: float


def oks(pred, gt, gt_area, kappas=None):
    """Mean over labeled gt keypoints of exp(-d^2 / (2 * area * kappa^2))."""
    kappas = COCO_KAPPAS if kappas is None else np.asarray(kappas, dtype=np.float64)
    if kappas.shape != (NUM_KEYPOINTS,) or (kappas <= 0).any():
        raise ShapeError("oks: kappas must be 17 positive constants")
    if gt_area <= 0:
        raise ShapeError(f"oks: gt_area must be positive, got {gt_area}")
    labeled = gt.labeled()
    if not labeled.any():
        raise ShapeError("oks: ground truth has zero labeled keypoints")
    d2 = ((pred.xy - gt.xy) ** 2).sum(axis=1)
    e = np.exp(-d2 / (2.0 * gt_area * kappas ** 2))
    return float(e[labeled].mean())


def _sorted_preds(predictions):
    return sorted(predictions, key=lambda p: (-p.score, p.image_id, p.instance_id))


def _group(items):
    by_image = {}
    for it in items:
        by_image.setdefault(it.image_id, []).append(it)
    return by_image


def _oks_matrix(preds, gts, kappas):
    m = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            m[i, j] = oks(p.keypoints, g.keypoints, g.area, kappas)
    return m


def _match_threshold(okm, threshold, counted):
    """Greedy matching for one image at one threshold.

    okm rows are predictions in score order; counted marks ground truths
    that participate (others are ignored). Returns per-prediction match:
    gt column for a counted match, -1 for unmatched (FP), -2 for a match
    claimed by an ignored gt (prediction dropped from the ranking).
    """
    n_pred, n_gt = okm.shape
    taken = np.zeros(n_gt, dtype=bool)
    result = np.full(n_pred, -1, dtype=np.int64)
    for i in range(n_pred):
        best_j, best_v = -1, threshold
        for j in range(n_gt):
            if taken[j] or not counted[j]:
                continue
            if okm[i, j] >= best_v and (best_j < 0 or okm[i, j] > best_v):
                best_j, best_v = j, okm[i, j]
        if best_j >= 0:
            taken[best_j] = True
            result[i] = best_j
            continue
        # no counted gt claims it; an ignored gt may absorb it
        best_j, best_v = -1, threshold
        for j in range(n_gt):
            if taken[j] or counted[j]:
                continue
            if okm[i, j] >= best_v and (best_j < 0 or okm[i, j] > best_v):
                best_j, best_v = j, okm[i, j]
        if best_j >= 0:
            taken[best_j] = True
            result[i] = -2
    return result


def _ap_from_ranked(flags, n_gt):
    """101-point interpolated AP from TP flags in global score order."""
    if n_gt == 0:
        return 0.0
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    idx = np.searchsorted(recall, np.linspace(0.0, 1.0, 101), side="left")
    sampled = np.where(idx < precision.size,
                       precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(sampled.mean())


def _ap_sweep(predictions, ground_truths, kappas, area_range):
    preds_by_img = _group(_sorted_preds(predictions))
    gts_by_img = _group(ground_truths)
    lo, hi = area_range
    cache = {}
    for img, preds in preds_by_img.items():
        gts = gts_by_img.get(img, [])
        okm = _oks_matrix(preds, gts, kappas)
        counted = np.array([lo < g.area <= hi for g in gts], dtype=bool)
        cache[img] = (preds, okm, counted)
    n_gt = sum(1 for g in ground_truths if lo < g.area <= hi)
    aps = []
    for t in OKS_THRESHOLDS:
        scored = []
        for img, (preds, okm, counted) in cache.items():
            match = _match_threshold(okm, t, counted)
            for p, m in zip(preds, match):
                if m == -2:
                    continue
                scored.append((p.score, img, p.instance_id, m >= 0))
        scored.sort(key=lambda r: (-r[0], r[1], r[2]))
        aps.append(_ap_from_ranked([r[3] for r in scored], n_gt))
    return np.array(aps)


def instance_matching(predictions, ground_truths, kappas=None):
    """Best-effort greedy pairing (threshold 0) used by PCK and miss rates.

    Returns {(image_id, gt_instance_id): Prediction or None}.
    """
    kappas = COCO_KAPPAS if kappas is None else np.asarray(kappas)
    preds_by_img = _group(_sorted_preds(predictions))
    out = {}
    for g in ground_truths:
        out[(g.image_id, g.instance_id)] = None
    for img, preds in preds_by_img.items():
        gts = [g for g in ground_truths if g.image_id == img]
        if not gts:
            continue
        okm = _oks_matrix(preds, gts, kappas)
        taken = np.zeros(len(gts), dtype=bool)
        for i in range(len(preds)):
            order = np.argsort(-okm[i])
            for j in order:
                if not taken[j]:
                    taken[j] = True
                    out[(img, gts[j].instance_id)] = preds[i]
                    break
    return out


def miss_rate(predictions, ground_truths, radius_factor, kappas=None):
    """Fraction of labeled gt keypoints with no nearby same-type prediction.

    A gt keypoint counts as missed when its instance has no matched
    prediction, or the matched instance's same-type keypoint lies farther
    than radius_factor * sqrt(gt_area). Aggregated per keypoint type and
    per area bucket.
    """
    if radius_factor <= 0:
        raise ShapeError(f"miss_rate: radius_factor must be > 0, got {radius_factor}")
    pairing = instance_matching(predictions, ground_truths, kappas)
    kp_missed = np.zeros(NUM_KEYPOINTS)
    kp_total = np.zeros(NUM_KEYPOINTS)
    scale_missed = {name: 0.0 for name in AREA_BUCKETS}
    scale_total = {name: 0.0 for name in AREA_BUCKETS}
    for g in ground_truths:
        pred = pairing[(g.image_id, g.instance_id)]
        radius = radius_factor * math.sqrt(g.area)
        labeled = g.keypoints.labeled()
        if pred is None:
            missed = labeled.copy()
        else:
            d = np.sqrt(((pred.keypoints.xy - g.keypoints.xy) ** 2).sum(axis=1))
            missed = labeled & (d > radius)
        bucket = next(name for name, (lo, hi) in AREA_BUCKETS.items()
                      if lo < g.area <= hi or (name == "large" and g.area > lo))
        kp_missed += missed
        kp_total += labeled
        scale_missed[bucket] += missed.sum()
        scale_total[bucket] += labeled.sum()
    per_kp = np.divide(kp_missed, kp_total, out=np.zeros(NUM_KEYPOINTS),
                       where=kp_total > 0)
    per_scale = {name: (scale_missed[name] / scale_total[name]
                        if scale_total[name] else 0.0)
                 for name in AREA_BUCKETS}
    return per_kp, per_scale


def pck(predictions, ground_truths, alpha=0.2, kappas=None):
    """Probability of correct keypoint within alpha * sqrt(gt_area)."""
    pairing = instance_matching(predictions, ground_truths, kappas)
    correct = 0.0
    total = 0.0
    for g in ground_truths:
        labeled = g.keypoints.labeled()
        total += labeled.sum()
        pred = pairing[(g.image_id, g.instance_id)]
        if pred is None:
            continue
        d = np.sqrt(((pred.keypoints.xy - g.keypoints.xy) ** 2).sum(axis=1))
        correct += (labeled & (d <= alpha * math.sqrt(g.area))).sum()
    return float(correct / total) if total else 0.0


@dataclass
class EvalReport:
    ap_mean: float
    ap_per_threshold: np.ndarray
    ap_medium: float
    ap_large: float
    pck: float
    per_keypoint_miss_rate: np.ndarray
    per_scale_miss_rate: dict

    def __post_init__(self):
        self.ap_per_threshold = np.asarray(self.ap_per_threshold, dtype=np.float64)
        self.per_keypoint_miss_rate = np.asarray(self.per_keypoint_miss_rate,
                                                 dtype=np.float64)
        values = np.concatenate([
            [self.ap_mean, self.ap_medium, self.ap_large, self.pck],
            self.ap_per_threshold, self.per_keypoint_miss_rate,
            list(self.per_scale_miss_rate.values())])
        if ((values < -1e-12) | (values > 1.0 + 1e-12)).any():
            raise ShapeError("EvalReport values must lie in [0, 1]")
        if abs(self.ap_mean - self.ap_per_threshold.mean()) > 1e-12:
            raise ShapeError("EvalReport: ap_mean must equal the threshold mean")

    def to_text(self):
        lines = [
            f"ap_mean {float(self.ap_mean)!r}",
            "ap_per_threshold " + " ".join(
                repr(float(v)) for v in self.ap_per_threshold),
            f"ap_medium {float(self.ap_medium)!r}",
            f"ap_large {float(self.ap_large)!r}",
            f"pck {float(self.pck)!r}",
            "per_keypoint_miss_rate " + " ".join(
                repr(float(v)) for v in self.per_keypoint_miss_rate),
            "per_scale_miss_rate " + " ".join(
                f"{name}={float(self.per_scale_miss_rate[name])!r}"
                for name in ("small", "medium", "large")),
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        fields = {}
        for line in text.strip().splitlines():
            key, _, rest = line.partition(" ")
            fields[key] = rest.split()
        try:
            scale = dict(item.split("=") for item in fields["per_scale_miss_rate"])
            return cls(
                ap_mean=float(fields["ap_mean"][0]),
                ap_per_threshold=np.array([float(v) for v in fields["ap_per_threshold"]]),
                ap_medium=float(fields["ap_medium"][0]),
                ap_large=float(fields["ap_large"][0]),
                pck=float(fields["pck"][0]),
                per_keypoint_miss_rate=np.array(
                    [float(v) for v in fields["per_keypoint_miss_rate"]]),
                per_scale_miss_rate={k: float(v) for k, v in scale.items()},
            )
        except (KeyError, ValueError, IndexError) as exc:
            raise DataError(f"EvalReport.from_text: malformed report: {exc}") from exc

    def csv_columns(self):
        cols = [("ap_mean", float(self.ap_mean))]
        cols += [(f"ap_{t:.2f}".replace(".", ""), float(v))
                 for t, v in zip(OKS_THRESHOLDS, self.ap_per_threshold)]
        cols += [("ap_medium", float(self.ap_medium)),
                 ("ap_large", float(self.ap_large)), ("pck", float(self.pck))]
        cols += [(f"miss_{name}", float(self.per_scale_miss_rate[name]))
                 for name in ("small", "medium", "large")]
        cols += [(f"miss_{KEYPOINT_NAMES[i]}",
                  float(self.per_keypoint_miss_rate[i]))
                 for i in range(NUM_KEYPOINTS)]
        return cols


def ap_eval(predictions, ground_truths, kappas=None, radius_factor=0.2,
            pck_alpha=0.2):
    """Full evaluation report over scored predictions and ground truths."""
    kappas = COCO_KAPPAS if kappas is None else np.asarray(kappas, dtype=np.float64)
    ap_all = _ap_sweep(predictions, ground_truths, kappas, (0.0, float("inf")))
    ap_medium = _ap_sweep(predictions, ground_truths, kappas,
                          AREA_BUCKETS["medium"])
    ap_large = _ap_sweep(predictions, ground_truths, kappas, AREA_BUCKETS["large"])
    per_kp, per_scale = miss_rate(predictions, ground_truths, radius_factor, kappas)
    return EvalReport(
        ap_mean=float(ap_all.mean()),
        ap_per_threshold=ap_all,
        ap_medium=float(ap_medium.mean()),
        ap_large=float(ap_large.mean()),
        pck=pck(predictions, ground_truths, pck_alpha, kappas),
        per_keypoint_miss_rate=per_kp,
        per_scale_miss_rate=per_scale,
    )
