"""``omnifuse`` command line: synth, split, train, eval, predict, diagnose, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import config as cfgmod
from .datacube import (
    SceneRecord,
    SegmentationMask,
    patient_split,
    read_envi,
    read_manifest,
    read_pgm,
    synth_dataset,
    write_manifest,
    write_pgm,
)
from .decoder import AblationFlags
from .errors import OmniFuseError, ParameterError
from .experiments import embedding_groups, synth_scenes
from .metrics import MetricReport, dsc, export_embeddings, hausdorff, iou, spectral_redundancy, write_scene_metrics
from .training import Checkpoint, Scene, evaluate, fit, load_scenes, predict, prepare_scene, write_log

log = logging.getLogger("omnifuse")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
CONFIG_NAME = "config.ini"
REPORT_COLUMNS = ("dsc", "iou", "hd", "n_scenes", "loss")
ABLATION_COLUMNS = ("flags",) + tuple(AblationFlags().__dict__) + ("dsc", "iou", "hd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers


def _resolve(args, extra: Optional[Dict[str, Dict[str, str]]] = None) -> cfgmod.RunConfig:
    try:
        overrides = cfgmod.parse_dotted(args.set)
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    for section, values in (extra or {}).items():
        overrides.setdefault(section, {}).update({k: str(v) for k, v in values.items() if v is not None})
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("run", {})["seed"] = str(args.seed)
    if getattr(args, "input", None) is not None:
        overrides.setdefault("run", {})["input_mode"] = args.input
    if getattr(args, "flags", None) is not None:
        try:
            flags = AblationFlags.parse(args.flags)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        overrides.setdefault("flags", {}).update({k: str(v) for k, v in flags.__dict__.items()})
    try:
        return cfgmod.resolve(args.config, overrides)
    except ParameterError as exc:
        raise UsageError(str(exc)) from None


def _out_dir(args, cfg: cfgmod.RunConfig) -> Path:
    out = Path(args.out or cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _relative(records: Sequence[SceneRecord], base: Path) -> List[SceneRecord]:
    rel = lambda p: os.path.relpath(os.path.abspath(p), os.path.abspath(base))
    return [SceneRecord(r.scene_id, r.patient_id, rel(r.cube_path), rel(r.mask_path)) for r in records]


def _records(args) -> List[SceneRecord]:
    if args.manifest:
        return read_manifest(args.manifest)
    if args.split_dir:
        return read_manifest(Path(args.split_dir) / f"{args.partition}.csv")
    raise UsageError("one of --manifest or --split-dir is required")


def _write_rows(rows, columns, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in columns})


def _report_row(report: MetricReport) -> dict:
    return {"dsc": report.dsc, "iou": report.iou, "hd": report.hd, "n_scenes": report.n_scenes, "loss": report.loss}


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _resolve(args, {"synth": {"H": args.h, "W": args.w, "S": args.s}})
    cfg.synth.validate()
    out = _out_dir(args, cfg)
    records = synth_dataset(out, args.n, cfg.synth, seed=cfg.run.seed, scenes_per_patient=args.scenes_per_patient)
    cfgmod.write_config(cfg, out / CONFIG_NAME)
    print(f"wrote {len(records)} scenes to {out}")
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = _resolve(args)
    ratios = [float(r) for r in args.ratios.split(",")]
    if len(ratios) != 3:
        raise UsageError("--ratios needs three comma-separated values")
    out = _out_dir(args, cfg)
    split = patient_split(read_manifest(args.manifest), ratios, seed=cfg.run.seed)
    for name, part in split.partitions().items():
        write_manifest(_relative(part, out), out / f"{name}.csv")
        print(f"{name}: {len(part)} scenes, {len({r.patient_id for r in part})} patients")
    cfgmod.write_config(cfg, out / CONFIG_NAME)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args, {"train": {"max_steps": args.steps, "epochs": args.epochs}})
    out = _out_dir(args, cfg)
    split_dir = Path(args.split_dir)
    mode = cfg.run.input_mode
    train_scenes = load_scenes(read_manifest(split_dir / "train.csv"), mode)
    val_scenes = load_scenes(read_manifest(split_dir / "val.csv"), mode)
    cfgmod.write_config(cfg, out / CONFIG_NAME)
    res = fit(
        train_scenes,
        val_scenes,
        cfg.train_config(),
        cfg.model_config(),
        cfg.flags,
        cfg.loss,
        cfg.augment,
        extra_manifest={"input_mode": mode, "run_config_hash": cfg.hash},
    )
    res.checkpoint.save(out / "model.pt")
    write_log(res.log, out / "log.csv")
    print(f"trained {res.steps} steps; best epoch {res.checkpoint.manifest['epoch']}; checkpoint {out / 'model.pt'}")
    return EXIT_OK


def _pred_dir_rows(pred_dir: Path, records: Sequence[SceneRecord]) -> List[dict]:
    rows = []
    for r in records:
        gt = read_pgm(r.mask_path).data
        pred = read_pgm(pred_dir / f"{r.scene_id}.pgm").data
        rows.append({"scene_id": r.scene_id, "dsc": dsc(pred, gt), "iou": iou(pred, gt), "hd": hausdorff(pred, gt)})
    return rows


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.pred_dir):
        raise UsageError("eval needs exactly one of --checkpoint or --pred-dir")
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    records = _records(args)
    if args.checkpoint:
        ckpt = Checkpoint.load(args.checkpoint)
        model = ckpt.build_model()
        scenes = load_scenes(records, ckpt.manifest.get("input_mode", "hsi"))
        report, rows = evaluate(model, scenes, cfg.loss, cfg.train.batch_size)
    else:
        rows = _pred_dir_rows(Path(args.pred_dir), records)
        report = MetricReport.from_rows(rows)
    _write_rows([_report_row(report)], REPORT_COLUMNS, out / "report.csv")
    write_scene_metrics(rows, out / "scenes.csv")
    cfgmod.write_config(cfg, out / CONFIG_NAME)
    print(f"dsc {report.dsc:.4f} iou {report.iou:.4f} hd {report.hd:.3f} over {report.n_scenes} scenes")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.build_model()
    cube = read_envi(args.cube)
    # the mask is only a placeholder for Scene; prediction never reads it
    blank = SegmentationMask(np.zeros(cube.shape[:2], dtype=np.uint8))
    scene = prepare_scene(cube, blank, ckpt.manifest.get("input_mode", "hsi"))
    res = predict(model, [scene])[0]
    stem = cube.scene_id or Path(args.cube).stem
    np.save(out / f"{stem}_coarse.npy", res.coarse.prob[0].numpy())
    np.save(out / f"{stem}_refined.npy", res.refined.prob[0].numpy())
    write_pgm(SegmentationMask(res.labels()[0].numpy()), out / f"{stem}.pgm")
    cfgmod.write_config(cfg, out / CONFIG_NAME)
    print(f"wrote {stem}_coarse.npy, {stem}_refined.npy and {stem}.pgm to {out}")
    return EXIT_OK


def _redundancy_rows(model, scenes: Sequence[Scene], out: Path, n_embed: int) -> List[dict]:
    rows = []
    outputs = predict(model, scenes, batch_size=1)
    for k, (scene, res) in enumerate(zip(scenes, outputs)):
        pre = spectral_redundancy(res.spec_tokens_pre[0].numpy())
        post = spectral_redundancy(res.spec_tokens_post[0].numpy())
        rows.append({"scene_id": scene.scene_id, "pre": pre, "post": post})
        if k < n_embed:
            export_embeddings(embedding_groups(res, 0, scene.mask.data), out / f"{scene.scene_id}_embeddings.csv")
    return rows


def cmd_diagnose(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.build_model()
    scenes = load_scenes(_records(args), ckpt.manifest.get("input_mode", "hsi"))
    rows = _redundancy_rows(model, scenes, out, args.n_embed)
    _write_rows(rows, ("scene_id", "pre", "post"), out / "redundancy.csv")
    cfgmod.write_config(cfg, out / CONFIG_NAME)
    pre, post = np.mean([r["pre"] for r in rows]), np.mean([r["post"] for r in rows])
    print(f"spectral redundancy pre {pre:.4f} post {post:.4f} over {len(rows)} scenes")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve(args, {"train": {"max_steps": args.steps, "epochs": args.epochs}})
    out = _out_dir(args, cfg)
    try:
        combos = [AblationFlags.parse(c) for c in args.combos.split(";")]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    mode = cfg.run.input_mode
    if args.split_dir:
        split_dir = Path(args.split_dir)
        train_scenes = load_scenes(read_manifest(split_dir / "train.csv"), mode)
        val_scenes = load_scenes(read_manifest(split_dir / "val.csv"), mode)
        test_scenes = load_scenes(read_manifest(split_dir / "test.csv"), mode)
    else:
        # overfit protocol: train, select and score on one set
        if args.manifest:
            train_scenes = load_scenes(read_manifest(args.manifest), mode)
        else:
            train_scenes = synth_scenes(args.n, cfg.synth, cfg.run.seed, mode)
        val_scenes = test_scenes = train_scenes
    cfgmod.write_config(cfg, out / CONFIG_NAME)
    rows = []
    for flags in combos:
        res = fit(train_scenes, val_scenes, cfg.train_config(), cfg.model_config(), flags, cfg.loss, cfg.augment)
        report, _ = evaluate(res.model, test_scenes, cfg.loss, cfg.train.batch_size)
        rows.append({"flags": flags.label(), **flags.__dict__, "dsc": report.dsc, "iou": report.iou, "hd": report.hd})
        print(f"{flags.label():<28} dsc {report.dsc:.4f} iou {report.iou:.4f} hd {report.hd:.3f}", flush=True)
        _write_rows(rows, ABLATION_COLUMNS, out / "ablation.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="omnifuse", description="Hyperspectral segmentation with spatial/spectral fusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_help="output directory"):
        p.add_argument("--config", help="INI file with [run] [encoder] [model] [train] [loss] [augment] [flags] [synth]")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=out_help)

    def data(p, default_partition="test"):
        p.add_argument("--manifest", help="scene manifest CSV")
        p.add_argument("--split-dir", help="directory with train/val/test CSVs")
        p.add_argument("--partition", default=default_partition, choices=("train", "val", "test"))

    def model_opts(p):
        p.add_argument("--flags", help="enabled modules: all, none, or e.g. cnn+mamba+cfe")
        p.add_argument("--input", choices=cfgmod.INPUT_MODES)
        p.add_argument("--steps", type=int, help="cap on optimisation steps")
        p.add_argument("--epochs", type=int)

    p = sub.add_parser("synth", help="generate synthetic scenes and a manifest")
    common(p)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--h", type=int)
    p.add_argument("--w", type=int)
    p.add_argument("--s", type=int)
    p.add_argument("--scenes-per-patient", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="patient-level train/val/test split of a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratios", default="3,1,1")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on a split")
    common(p)
    model_opts(p)
    p.add_argument("--split-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a directory of predicted masks")
    common(p)
    data(p)
    p.add_argument("--checkpoint")
    p.add_argument("--pred-dir", help="directory of <scene_id>.pgm predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="coarse/refined probability maps and a label mask for one cube")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True, help="ENVI header path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("diagnose", help="embedding CSVs and spectral redundancy before/after fusion")
    common(p)
    data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-embed", type=int, default=4, help="scenes to export embeddings for")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("ablate", help="train + evaluate each flag combination")
    common(p)
    model_opts(p)
    p.add_argument("--combos", default="none;all", help="';'-separated flag combinations")
    p.add_argument("--manifest", help="overfit on these scenes instead of synthesising")
    p.add_argument("--split-dir", help="train on train.csv, select on val.csv, score test.csv")
    p.add_argument("--n", type=int, default=16, help="synthetic scenes for the overfit protocol")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"omnifuse {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OmniFuseError, OSError, ValueError, RuntimeError) as exc:
        print(f"omnifuse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
