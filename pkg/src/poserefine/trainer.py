"""Momentum-SGD training loop over the keypoint branch.

Per iteration: sample a batch of annotations, jitter their ground-truth
boxes into imperfect proposals, enlarge and extract RoI features, run the
head, and step on the mean spatial cross-entropy. The learning rate decays
by a fixed factor at fractional milestones of the schedule. Single
optimization thread; everything is driven by one seeded generator, so a
fixed seed reproduces the loss trajectory bit for bit.
"""

import json
import time
from dataclasses import dataclass

import numpy as np

from . import tensor
from .data import augment
from .errors import CheckpointError, DataError, NumericError, ShapeError
from .geometry import jitter_box
from .head import keypoint_loss
from .model import predict_dataset
from .evaluation import pck as pck_metric


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 0.0
    total_iterations: int = 2000
    decay_milestones: tuple = (2.0 / 3.0, 8.0 / 9.0)
    decay_factor: float = 0.1
    warmup_iterations: int = 0
    batch_size: int = 4
    jitter_scale: float = 0.1
    jitter_shift: float = 0.05
    flip_probability: float = 0.5
    freeze_backbone: bool = False
    eval_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ShapeError(f"TrainConfig: base_lr must be > 0, got {self.base_lr}")
        if self.total_iterations < 1 or self.batch_size < 1:
            raise ShapeError("TrainConfig: iterations and batch size must be >= 1")
        if self.warmup_iterations < 0:
            raise ShapeError("TrainConfig: warmup_iterations must be >= 0")
        ms = tuple(float(m) for m in self.decay_milestones)
        if any(not 0.0 < m < 1.0 for m in ms) or list(ms) != sorted(set(ms)):
            raise ShapeError(
                "TrainConfig: milestones must be strictly increasing in (0, 1)")
        object.__setattr__(self, "decay_milestones", ms)


def lr_at(iteration, config):
    """base_lr scaled by decay_factor per passed milestone, with an
    optional linear ramp over the first warmup_iterations."""
    if not (0 <= iteration < config.total_iterations):
        raise ShapeError(
            f"lr_at: iteration {iteration} outside [0, "
            f"{config.total_iterations})")
    if iteration < config.warmup_iterations:
        return config.base_lr * (iteration + 1) / config.warmup_iterations
    passed = sum(
        1 for frac in config.decay_milestones
        if iteration >= int(round(frac * config.total_iterations)))
    return config.base_lr * config.decay_factor ** passed


class SGD:
    """Classic momentum SGD: v <- mu*v + g, w <- w - lr*v."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = dict(params)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {name: np.zeros_like(p.data)
                         for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            updated = p.data - lr * v
            updated.flags.writeable = False
            p.data = updated

    def state_arrays(self):
        return {name: v.copy() for name, v in self.velocity.items()}

    def load_state(self, arrays):
        for name, v in self.velocity.items():
            if name not in arrays:
                raise CheckpointError(f"optimizer state missing tensor {name!r}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != v.shape:
                raise CheckpointError(
                    f"optimizer state shape mismatch for {name!r}: "
                    f"{arr.shape} vs {v.shape}")
            self.velocity[name] = arr.copy()


@dataclass
class TrainLog:
    records: list
    timings: list
    evals: list

    def losses(self):
        return np.array([r["loss"] for r in self.records])

    def write(self, log_path, timing_path=None):
        with open(log_path, "w", encoding="utf-8") as fh:
            for row in self.records:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            for row in self.evals:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if timing_path is not None:
            with open(timing_path, "w", encoding="utf-8") as fh:
                for row in self.timings:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")


def train(records, model, config, start_iteration=0, optimizer_state=None,
          eval_records=None):
    """Run the schedule from start_iteration; returns (TrainLog, SGD).

    Wall-clock per iteration is kept separate from the loss records so
    the loss log stays bit-identical across reruns.
    """
    samples = [(ri, ai) for ri, rec in enumerate(records)
               for ai in range(len(rec.annotations))]
    if not samples:
        raise DataError("train: dataset has no annotations")
    rng = np.random.default_rng([config.seed, start_iteration])
    params = model.parameters()
    if config.freeze_backbone:
        params = {n: p for n, p in params.items() if n.startswith("head/")}
    opt = SGD(params, config.momentum, config.weight_decay)
    if optimizer_state:
        opt.load_state(optimizer_state)
    log = TrainLog(records=[], timings=[], evals=[])
    for it in range(start_iteration, config.total_iterations):
        t0 = time.perf_counter()
        lr = lr_at(it, config)
        picks = [samples[int(i)]
                 for i in rng.integers(0, len(samples), size=config.batch_size)]
        by_record = {}
        for ri, ai in picks:
            by_record.setdefault(ri, []).append(ai)
        losses = []
        for ri in by_record:
            rec = augment(records[ri], config.flip_probability, rng)
            pyramid = model.pyramid(rec.pixels)
            for ai in by_record[ri]:
                ann = rec.annotations[ai]
                proposal = jitter_box(ann.box, config.jitter_scale,
                                      config.jitter_shift, rng)
                heatmaps, roi_box = model.instance_heatmaps(
                    pyramid, proposal,
                    detach_features=config.freeze_backbone)
                targets, valid = model.training_targets(ann.keypoints, roi_box)
                losses.append(keypoint_loss(heatmaps, targets, valid))
        total = losses[0]
        for extra in losses[1:]:
            total = tensor.add(total, extra)
        loss = tensor.scale(total, 1.0 / config.batch_size)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise NumericError(
                f"non-finite loss at iteration {it}",
                snapshot={"iteration": it, "lr": lr,
                          "recent_losses": [r["loss"]
                                            for r in log.records[-8:]]})
        loss.backward()
        opt.step(lr)
        opt.zero_grad()
        log.records.append({"iteration": it, "loss": loss_value, "lr": lr})
        log.timings.append({"iteration": it,
                            "wall_ms": (time.perf_counter() - t0) * 1e3})
        if (config.eval_every > 0 and eval_records
                and (it + 1) % config.eval_every == 0):
            preds, gts = predict_dataset(model, eval_records, seed=config.seed)
            log.evals.append({"iteration": it, "eval_pck":
                              pck_metric(preds, gts)})
    return log, opt
