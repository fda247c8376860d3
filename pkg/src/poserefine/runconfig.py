"""Run configuration: JSON file with data/model/train/eval sections.

Unknown keys are rejected anywhere in the tree; omitted keys take the
defaults below. Every command writes its fully resolved configuration
next to its outputs so runs can be reproduced from the output directory
alone.
"""

import copy
import json

import numpy as np

from .backbone import BackboneConfig, FixedP2, SizeBased
from .data import SynthConfig
from .errors import ConfigError
from .head import HeadConfig
from .model import PoseModel
from .trainer import TrainConfig

DEFAULTS = {
    "output_dir": None,
    "data": {
        "source": "synth",  # synth | coco | dataset-dir
        "path": None,
        "images_dir": None,
        "synth": {
            "n_images": 200,
            "image_size": [128, 128],
            "persons_min": 1,
            "persons_max": 3,
            "scale_mix": [0.35, 0.5, 0.15],
            "limb_thickness": 2.0,
            "edge_keypoint_bias": 0.5,
            "occlusion_probability": 0.08,
            "seed": 0,
        },
    },
    "model": {
        "backbone": {
            "stem_channels": 16,
            "stage_channels": [16, 32, 64, 128],
            "convs_per_stage": 3,
        },
        "fpn_channels": 32,
        "head": {
            "variant": "gcm_series",
            "head_channels": 32,
            "heads": 4,
            "heatmap_size": [56, 56],
        },
        "level_strategy": {"kind": "fixed_p2", "k0": 4, "canonical": 224.0},
        "magnification": 1.3,
        "seed": 0,
    },
    "train": {
        "base_lr": 0.0025,
        "momentum": 0.9,
        "weight_decay": 0.0,
        "total_iterations": 2000,
        "decay_milestones": [2.0 / 3.0, 8.0 / 9.0],
        "decay_factor": 0.1,
        "warmup_iterations": 0,
        "batch_size": 4,
        "jitter_scale": 0.1,
        "jitter_shift": 0.05,
        "flip_probability": 0.5,
        "freeze_backbone": False,
        "eval_every": 0,
        "seed": 0,
    },
    "eval": {
        "kappas": None,
        "radius_factor": 0.2,
        "pck_alpha": 0.2,
        "jitter_scale": 0.1,
        "jitter_shift": 0.05,
        "use_gt_boxes": False,
        "seed": 0,
    },
}


def _merge(defaults, override, path):
    if isinstance(defaults, dict):
        if not isinstance(override, dict):
            raise ConfigError(f"{path}: expected an object")
        merged = {}
        for key in override:
            if key not in defaults:
                raise ConfigError(f"unknown config key {path}.{key}".lstrip("."))
            merged[key] = None
        for key, default in defaults.items():
            if key in override:
                merged[key] = _merge(default, override[key],
                                     f"{path}.{key}" if path else key)
            else:
                merged[key] = copy.deepcopy(default)
        return merged
    if override is None or defaults is None:
        return copy.deepcopy(override)
    if isinstance(defaults, bool) != isinstance(override, bool):
        raise ConfigError(f"{path}: expected {type(defaults).__name__}")
    if isinstance(defaults, (int, float)) and isinstance(override, (int, float)) \
            and not isinstance(override, bool):
        return override
    if type(defaults) in (list, tuple) and isinstance(override, list):
        return copy.deepcopy(override)
    if not isinstance(override, type(defaults)):
        raise ConfigError(
            f"{path}: expected {type(defaults).__name__}, got "
            f"{type(override).__name__}")
    return copy.deepcopy(override)


def resolve_config(overrides=None, seed=None):
    """Merge user overrides onto the defaults, optionally forcing seeds."""
    cfg = _merge(DEFAULTS, overrides or {}, "")
    if seed is not None:
        cfg["data"]["synth"]["seed"] = int(seed)
        cfg["model"]["seed"] = int(seed)
        cfg["train"]["seed"] = int(seed)
        cfg["eval"]["seed"] = int(seed)
    return cfg


def load_config_file(path, seed=None):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return resolve_config(raw, seed=seed)


def write_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=2)
        fh.write("\n")


def build_synth_config(cfg):
    s = cfg["data"]["synth"]
    return SynthConfig(
        n_images=s["n_images"],
        image_size=tuple(s["image_size"]),
        persons_min=s["persons_min"],
        persons_max=s["persons_max"],
        scale_mix=tuple(s["scale_mix"]),
        limb_thickness=s["limb_thickness"],
        edge_keypoint_bias=s["edge_keypoint_bias"],
        occlusion_probability=s["occlusion_probability"],
        seed=s["seed"],
    )


def build_strategy(spec):
    kind = spec["kind"]
    if kind == "fixed_p2":
        return FixedP2()
    if kind == "size_based":
        return SizeBased(k0=spec["k0"], canonical=spec["canonical"])
    raise ConfigError(f"model.level_strategy.kind: unknown kind {kind!r}")


def build_model(cfg):
    m = cfg["model"]
    backbone_cfg = BackboneConfig(
        stem_channels=m["backbone"]["stem_channels"],
        stage_channels=tuple(m["backbone"]["stage_channels"]),
        convs_per_stage=m["backbone"]["convs_per_stage"],
    )
    head_cfg = HeadConfig(
        variant=m["head"]["variant"],
        head_channels=m["head"]["head_channels"],
        heads=m["head"]["heads"],
        heatmap_size=tuple(m["head"]["heatmap_size"]),
    )
    return PoseModel(backbone_cfg, m["fpn_channels"], head_cfg,
                     strategy=build_strategy(m["level_strategy"]),
                     magnification=m["magnification"], seed=m["seed"])


def build_train_config(cfg, freeze_backbone=None):
    t = dict(cfg["train"])
    if freeze_backbone is not None:
        t["freeze_backbone"] = bool(freeze_backbone)
    return TrainConfig(
        base_lr=t["base_lr"],
        momentum=t["momentum"],
        weight_decay=t["weight_decay"],
        total_iterations=t["total_iterations"],
        decay_milestones=tuple(t["decay_milestones"]),
        decay_factor=t["decay_factor"],
        warmup_iterations=t["warmup_iterations"],
        batch_size=t["batch_size"],
        jitter_scale=t["jitter_scale"],
        jitter_shift=t["jitter_shift"],
        flip_probability=t["flip_probability"],
        freeze_backbone=t["freeze_backbone"],
        eval_every=t["eval_every"],
        seed=t["seed"],
    )


def eval_kappas(cfg):
    kappas = cfg["eval"]["kappas"]
    return None if kappas is None else np.asarray(kappas, dtype=np.float64)
