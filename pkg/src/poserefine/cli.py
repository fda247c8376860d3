"""Command-line entry point.

Subcommands: gen-data, train, eval, ablate-mag, ablate-level, rf.
Every command resolves its configuration, writes it next to the outputs
together with a machine-readable status record, and is deterministic
given the resolved config in single-threaded mode. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import concurrent.futures
import csv
import json
import os
import sys

from . import data, runconfig, trainer
from .backbone import FixedLevel, SizeBased
from .errors import ConfigError, DataError, NumericError, ShapeError
from .evaluation import GroundTruth, Prediction, ap_eval
from .head import HeadConfig, receptive_field_report
from .kernels import backend_name
from .model import predict_dataset

MAGNIFICATION_SWEEP = [round(1.0 + 0.05 * i, 2) for i in range(11)]
LEVEL_SWEEP = ("size_based", "p2", "p3", "p4", "p5")


def _prepare_out(out_dir, force):
    if out_dir is None:
        raise ConfigError("an output directory is required (--out DIR)")
    os.makedirs(out_dir, exist_ok=True)
    if os.listdir(out_dir) and not force:
        raise ConfigError(
            f"output directory {out_dir} is not empty (use --force to overwrite)")
    return out_dir


def _finish(out_dir, command, cfg, outputs, extra=None):
    runconfig.write_config(cfg, os.path.join(out_dir, "resolved_config.json"))
    status = {"command": command, "ok": True, "backend": backend_name(),
              "outputs": sorted(outputs + ["resolved_config.json",
                                           "status.json"])}
    if extra:
        status.update(extra)
    with open(os.path.join(out_dir, "status.json"), "w", encoding="utf-8") as fh:
        json.dump(status, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_records(cfg):
    src = cfg["data"]["source"]
    if src == "synth":
        return data.synth_generate(runconfig.build_synth_config(cfg))
    if src == "dataset-dir":
        if not cfg["data"]["path"]:
            raise ConfigError("data.path is required for source=dataset-dir")
        return data.load_dataset(cfg["data"]["path"])
    if src == "coco":
        if not cfg["data"]["path"]:
            raise ConfigError("data.path is required for source=coco")
        return data.load_coco_json(cfg["data"]["path"],
                                   images_dir=cfg["data"]["images_dir"])
    raise ConfigError(f"data.source: unknown source {src!r}")


def _restore_model(cfg, checkpoint_path):
    ckpt = data.load_checkpoint(checkpoint_path)
    model = runconfig.build_model(cfg)
    model.load_weights(ckpt.weights)
    return model, ckpt


def _eval_once(model, records, cfg, strategy=None, magnification=None,
               seed=None):
    ev = cfg["eval"]
    jitter = (0.0, 0.0) if ev["use_gt_boxes"] \
        else (ev["jitter_scale"], ev["jitter_shift"])
    preds, gts = predict_dataset(
        model, records, jitter=jitter,
        seed=ev["seed"] if seed is None else seed,
        strategy=strategy, magnification=magnification)
    return ap_eval(preds, gts, kappas=runconfig.eval_kappas(cfg),
                   radius_factor=ev["radius_factor"],
                   pck_alpha=ev["pck_alpha"])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _resolve(args)
    out = _prepare_out(args.out or cfg["output_dir"], args.force)
    records = data.synth_generate(runconfig.build_synth_config(cfg))
    data.save_dataset(out, records, config_meta=cfg["data"]["synth"])
    digest = data.manifest_hash(out)
    _finish(out, "gen-data", cfg, ["manifest.json", "images.bin"],
            extra={"manifest_sha256": digest, "n_images": len(records)})
    print(f"gen-data: wrote {len(records)} images to {out}")
    print(f"manifest sha256 {digest}")
    return 0


def cmd_train(args):
    cfg = _resolve(args)
    out = _prepare_out(args.out or cfg["output_dir"], args.force)
    records = _load_records(cfg)
    train_cfg = runconfig.build_train_config(
        cfg, freeze_backbone=True if args.freeze_backbone else None)
    model = runconfig.build_model(cfg)
    start_iteration = 0
    optimizer_state = None
    if args.resume:
        ckpt = data.load_checkpoint(args.resume)
        model.load_weights(ckpt.weights)
        optimizer_state = ckpt.optimizer
        start_iteration = ckpt.iteration
    log, opt = trainer.train(records, model, train_cfg,
                             start_iteration=start_iteration,
                             optimizer_state=optimizer_state)
    ckpt = data.Checkpoint(iteration=train_cfg.total_iterations, config=cfg,
                           weights=model.weights_arrays(),
                           optimizer=opt.state_arrays())
    data.save_checkpoint(os.path.join(out, "checkpoint.ckpt"), ckpt)
    log.write(os.path.join(out, "train_log.jsonl"),
              os.path.join(out, "train_timing.jsonl"))
    _finish(out, "train", cfg,
            ["checkpoint.ckpt", "train_log.jsonl", "train_timing.jsonl"],
            extra={"iterations": len(log.records),
                   "final_loss": log.records[-1]["loss"] if log.records else None})
    if log.records:
        print(f"train: {len(log.records)} iterations, final loss "
              f"{log.records[-1]['loss']:.4f}")
    return 0


def cmd_eval(args):
    cfg = _resolve(args)
    out = _prepare_out(args.out or cfg["output_dir"], args.force)
    records = _load_records(cfg)
    if args.gt_as_pred:
        preds = []
        gts = []
        instance_id = 0
        for rec in records:
            for ann in rec.annotations:
                preds.append(Prediction(rec.image_id, instance_id,
                                        ann.keypoints, 1.0))
                gts.append(GroundTruth(rec.image_id, instance_id,
                                       ann.keypoints, ann.area))
                instance_id += 1
        report = ap_eval(preds, gts, kappas=runconfig.eval_kappas(cfg),
                         radius_factor=cfg["eval"]["radius_factor"],
                         pck_alpha=cfg["eval"]["pck_alpha"])
    else:
        if not args.checkpoint:
            raise ConfigError("eval requires --checkpoint (or --gt-as-pred)")
        model, _ = _restore_model(cfg, args.checkpoint)
        report = _eval_once(model, records, cfg)
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    _finish(out, "eval", cfg, ["report.txt"],
            extra={"ap_mean": report.ap_mean, "pck": report.pck})
    print(report.to_text(), end="")
    return 0


def _sweep_rows_to_csv(path, first_column, rows):
    header = [first_column, "mode"] + [name for name, _ in rows[0][2]]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for key, mode, cols in rows:
            writer.writerow([key, mode] + [repr(v) for _, v in cols])


def _mag_point(payload):
    cfg, checkpoint_path, mag, train_per_point = payload
    if train_per_point:
        point_cfg = json.loads(json.dumps(cfg))
        point_cfg["model"]["magnification"] = mag
        model = runconfig.build_model(point_cfg)
        records = _load_records(point_cfg)
        trainer.train(records, model,
                      runconfig.build_train_config(point_cfg))
        report = _eval_once(model, records, point_cfg)
    else:
        model, _ = _restore_model(cfg, checkpoint_path)
        records = _load_records(cfg)
        report = _eval_once(model, records, cfg, magnification=mag)
    return mag, report


def cmd_ablate_mag(args):
    cfg = _resolve(args)
    out = _prepare_out(args.out or cfg["output_dir"], args.force)
    if not args.train_per_point and not args.checkpoint:
        raise ConfigError("ablate-mag requires --checkpoint or --train-per-point")
    mode = "train-per-point" if args.train_per_point else "train-once"
    payloads = [(cfg, args.checkpoint, mag, args.train_per_point)
                for mag in MAGNIFICATION_SWEEP]
    if args.threads > 1:
        with concurrent.futures.ProcessPoolExecutor(args.threads) as pool:
            results = list(pool.map(_mag_point, payloads))
    else:
        results = [_mag_point(p) for p in payloads]
    results.sort(key=lambda r: r[0])
    rows = [(f"{mag:.2f}", mode, report.csv_columns())
            for mag, report in results]
    _sweep_rows_to_csv(os.path.join(out, "magnification_sweep.csv"),
                       "magnification", rows)
    _finish(out, "ablate-mag", cfg, ["magnification_sweep.csv"],
            extra={"mode": mode, "points": len(rows)})
    print(f"ablate-mag: {len(rows)} points ({mode})")
    return 0


def _strategy_for(name):
    if name == "size_based":
        return SizeBased()
    return FixedLevel(int(name[1]))


def _level_point(payload):
    cfg, checkpoint_path, name, train_per_point = payload
    if train_per_point:
        point_cfg = json.loads(json.dumps(cfg))
        if name == "size_based":
            point_cfg["model"]["level_strategy"] = {
                "kind": "size_based", "k0": 4, "canonical": 224.0}
            model = runconfig.build_model(point_cfg)
            strategy = None
        else:
            model = runconfig.build_model(point_cfg)
            strategy = FixedLevel(int(name[1]))
            model.strategy = strategy
        records = _load_records(point_cfg)
        trainer.train(records, model, runconfig.build_train_config(point_cfg))
        report = _eval_once(model, records, point_cfg, strategy=strategy)
    else:
        model, _ = _restore_model(cfg, checkpoint_path)
        records = _load_records(cfg)
        report = _eval_once(model, records, cfg, strategy=_strategy_for(name))
    return name, report


def cmd_ablate_level(args):
    cfg = _resolve(args)
    out = _prepare_out(args.out or cfg["output_dir"], args.force)
    if not args.train_per_point and not args.checkpoint:
        raise ConfigError("ablate-level requires --checkpoint or --train-per-point")
    mode = "train-per-point" if args.train_per_point else "train-once"
    payloads = [(cfg, args.checkpoint, name, args.train_per_point)
                for name in LEVEL_SWEEP]
    if args.threads > 1:
        with concurrent.futures.ProcessPoolExecutor(args.threads) as pool:
            results = list(pool.map(_level_point, payloads))
    else:
        results = [_level_point(p) for p in payloads]
    order = {name: i for i, name in enumerate(LEVEL_SWEEP)}
    results.sort(key=lambda r: order[r[0]])
    rows = [(name, mode, report.csv_columns()) for name, report in results]
    _sweep_rows_to_csv(os.path.join(out, "level_sweep.csv"), "level", rows)
    _finish(out, "ablate-level", cfg, ["level_sweep.csv"],
            extra={"mode": mode, "points": len(rows)})
    print(f"ablate-level: {len(rows)} points ({mode})")
    return 0


def cmd_rf(args):
    cfg = _resolve(args)
    out = _prepare_out(args.out or cfg["output_dir"], args.force)
    lines = []
    for variant in ("baseline8", "gcm_series", "gcm_parallel"):
        head_cfg = HeadConfig(
            variant=variant,
            head_channels=cfg["model"]["head"]["head_channels"],
            heads=cfg["model"]["head"]["heads"],
            heatmap_size=tuple(cfg["model"]["head"]["heatmap_size"]))
        rep = receptive_field_report(head_cfg)
        marker = " *" if variant == cfg["model"]["head"]["variant"] else ""
        lines.append(
            f"{variant}: receptive_field={rep['reported']} "
            f"(conv_rf={rep['conv_rf']}, input_extent={rep['input_extent']})"
            f"{marker}")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "rf.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    _finish(out, "rf", cfg, ["rf.txt"])
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _resolve(args):
    if args.config:
        return runconfig.load_config_file(args.config, seed=args.seed)
    return runconfig.resolve_config({}, seed=args.seed)


def _add_common(sub):
    sub.add_argument("--config", help="JSON run configuration")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--seed", type=int, default=None,
                     help="override every section seed")
    sub.add_argument("--force", action="store_true",
                     help="overwrite a non-empty output directory")
    sub.add_argument("--threads", type=int, default=1,
                     help="parallel processes for sweep points")
    sub.add_argument("--freeze-backbone", action="store_true",
                     help="train only the keypoint head")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="poserefine",
        description="desk-scale top-down keypoint pipeline")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train", help="train the keypoint pipeline")
    _add_common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--gt-as-pred", action="store_true",
                   help="score ground truth against itself (sanity mode)")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("ablate-mag",
                        help="sweep box magnification 1.00..1.50")
    _add_common(p)
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--train-per-point", action="store_true",
                   help="retrain at every sweep point")
    p.set_defaults(func=cmd_ablate_mag)

    p = subs.add_parser("ablate-level",
                        help="sweep pyramid level selection strategies")
    _add_common(p)
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--train-per-point", action="store_true")
    p.set_defaults(func=cmd_ablate_level)

    p = subs.add_parser("rf", help="report head receptive fields")
    _add_common(p)
    p.set_defaults(func=cmd_rf)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if exc.snapshot:
            print(json.dumps(exc.snapshot, sort_keys=True), file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
