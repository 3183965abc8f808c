"""Command-line entry point: dataset generation, training, evaluation and reports.

Every subcommand resolves its configuration (flags > ``--config`` file >
built-in defaults) before doing any work and writes the resolved values next
to its outputs. Exit codes: 0 success, 2 usage or input error, 3 runtime or
numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .dataset import (
    CapacityError,
    ClassSplit,
    DatasetManifest,
    GenerationConfig,
    ManifestError,
    generate_shapeworld,
    load_manifest,
    split_base_novel,
)
from .evaluation import (
    DUMP_CONF,
    CURVE_CONF,
    IOU_MATCH,
    ShotsConfig,
    evaluate,
    fixed_supports,
    reweighting_cluster_metric,
    run_detector,
    sample_support_vectors,
    shots_experiment,
    write_cluster_reports,
    write_shots_csv,
)
from .loss import fit_anchors
from .model import ModelConfig
from .tensor import NumericalError, UsageError
from .train import (
    FINETUNE_FREEZE,
    CheckpointError,
    ModelCheckpoint,
    TrainConfig,
    TrainingDiverged,
    default_finetune_steps,
    finetune_novel,
    load_checkpoint,
    train_base,
)

log = logging.getLogger("fsodm")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

DEFAULT_NOVEL = (8, 9, 10)


class InputError(Exception):
    """Missing or inconsistent user input (exit code 2)."""


# ---------------------------------------------------------------------------
# argument types


def nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def pos_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def pos_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def int_list(text) -> List[int]:
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text}") from None


def str_list(text) -> List[str]:
    if isinstance(text, (list, tuple)):
        return [str(x) for x in text]
    return [x.strip() for x in str(text).split(",") if x.strip()]


# ---------------------------------------------------------------------------
# defaults and config resolution


def default_seed() -> int:
    env = os.environ.get("FSDM_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise InputError(f"FSDM_SEED must be an integer, got {env!r}") from None


_TRAIN_DEFAULTS = {
    "lr": TrainConfig.lr,
    "batch_size": TrainConfig.batch_size,
    "sizes": list(TrainConfig.multi_scale_sizes),
    "momentum": TrainConfig.momentum,
    "weight_decay": TrainConfig.weight_decay,
    "w_obj": TrainConfig.w_obj,
    "w_noobj": TrainConfig.w_noobj,
    "grad_clip": None,
    "flip": False,
    "log_every": TrainConfig.log_every,
    "checkpoint_every": 0,
}

DEFAULTS: Dict[str, dict] = {
    "gen-data": {"images": 500, "image_size": 128, "threads": 1},
    "train-base": {
        **_TRAIN_DEFAULTS,
        "steps": TrainConfig.steps,
        "epochs": None,
        "novel": list(DEFAULT_NOVEL),
        "width_scale": ModelConfig.width_scale,
        "image_size": ModelConfig.image_size,
        "anchors": "paper",
        "threads": 1,
    },
    "finetune": {
        **_TRAIN_DEFAULTS,
        "shots": 10,
        "steps": None,
        "novel": list(DEFAULT_NOVEL),
        "freeze": list(FINETUNE_FREEZE),
        "data_seed": None,
        "threads": 1,
    },
    "evaluate": {"split": "all", "conf": CURVE_CONF, "iou": IOU_MATCH, "image_size": None, "novel": list(DEFAULT_NOVEL), "data_seed": None, "threads": 1},
    "shots": {
        **_TRAIN_DEFAULTS,
        "list": [3, 5, 10],
        "seeds": [0, 1, 2],
        "steps": None,
        "novel": list(DEFAULT_NOVEL),
        "freeze": list(FINETUNE_FREEZE),
        "data_seed": None,
        "image_size": None,
        "threads": 1,
    },
    "detect": {"conf": DUMP_CONF, "pool": "eval", "limit": None, "png": False, "image_size": None, "novel": list(DEFAULT_NOVEL), "data_seed": None, "threads": 1},
    "export-vectors": {"per_category": 20, "novel": list(DEFAULT_NOVEL), "data_seed": None, "threads": 1},
}

# config-file values are parsed with the same converters as flags
_CONVERTERS = {
    "sizes": int_list,
    "novel": int_list,
    "list": int_list,
    "seeds": int_list,
    "freeze": str_list,
}


def load_config_file(path: Optional[str], command: str) -> dict:
    """Top-level keys apply to every command; a section named after the command overrides them."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise InputError(f"config file {p} must hold a JSON object")
    flat = {k.replace("-", "_"): v for k, v in data.items() if not isinstance(v, dict)}
    section = data.get(command, {})
    if not isinstance(section, dict):
        raise InputError(f"config section {command!r} must be an object")
    flat.update({k.replace("-", "_"): v for k, v in section.items()})
    return flat


def resolve(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the config file and explicit flags (in that order)."""
    command = args.command
    cfg = {"seed": None, **DEFAULTS[command]}
    from_file = load_config_file(getattr(args, "config", None), command)
    for k, v in from_file.items():
        cfg[k] = _CONVERTERS[k](v) if k in _CONVERTERS and v is not None else v
    for k, v in vars(args).items():
        if k in ("command", "config", "func"):
            continue
        cfg[k] = v
    if cfg.get("seed") is None:
        cfg["seed"] = default_seed()
    cfg["command"] = command
    validate_resolved(cfg)
    return cfg


def validate_resolved(cfg: dict) -> None:
    for key in ("images", "steps", "per_category"):
        v = cfg.get(key)
        if v is not None and (not isinstance(v, int) or v < 0):
            raise InputError(f"{key} must be a non-negative integer, got {v!r}")
    for key in ("lr", "batch_size", "shots", "threads"):
        v = cfg.get(key)
        if v is not None and not v > 0:
            raise InputError(f"{key} must be positive, got {v!r}")
    if cfg.get("anchors") not in (None, "paper", "fit"):
        raise InputError(f"anchors must be 'paper' or 'fit', got {cfg['anchors']!r}")


def write_resolved(cfg: dict, out: Path) -> Path:
    path = out / "reports" / f"{cfg['command']}.config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# shared helpers


def _manifest(path) -> DatasetManifest:
    if path is None:
        raise InputError("--data is required")
    p = Path(path)
    if not (p / "manifest.jsonl").exists() and not p.is_file():
        raise InputError(f"no dataset manifest at {p}")
    return load_manifest(p)


def _checkpoint(path) -> ModelCheckpoint:
    if path is None:
        raise InputError("a checkpoint path is required")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"checkpoint not found: {p}")
    return load_checkpoint(p)


def _split(manifest: DatasetManifest, novel: Sequence[int], k_shot: int = 1) -> ClassSplit:
    novel = tuple(sorted(int(c) for c in novel))
    base = tuple(c for c in range(manifest.num_categories) if c not in novel)
    split = ClassSplit(base, novel, k_shot)
    split.validate(manifest.num_categories)
    return split


def _data_seed(cfg: dict, ckpt: ModelCheckpoint) -> int:
    if cfg.get("data_seed") is not None:
        return int(cfg["data_seed"])
    return int(ckpt.meta.get("data_seed", ckpt.meta.get("seed", 0)))


def _train_config(cfg: dict, stage: str, steps: int, freeze=()) -> TrainConfig:
    return TrainConfig(
        stage=stage,
        steps=steps,
        epochs=cfg.get("epochs"),
        lr=cfg["lr"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"],
        multi_scale_sizes=tuple(cfg["sizes"]),
        seed=cfg["seed"],
        w_obj=cfg["w_obj"],
        w_noobj=cfg["w_noobj"],
        grad_clip=cfg["grad_clip"],
        freeze=tuple(freeze),
        flip=cfg["flip"],
        log_every=cfg["log_every"],
        checkpoint_every=cfg["checkpoint_every"],
    )


def _finetune_steps(cfg: dict, base: ModelCheckpoint) -> int:
    if cfg.get("steps") is not None:
        return int(cfg["steps"])
    return default_finetune_steps(base.step)


def _print_row(row: dict) -> None:
    print(
        f"[{row['stage']}] step {row['step']:>6}  size {row['img_size']}  lr {row['lr']:.2e}  "
        f"loc {row['loc']:.4f}  obj {row['obj']:.4f}  noobj {row['noobj']:.4f}  cls {row['cls']:.4f}  total {row['total']:.4f}",
        flush=True,
    )


def _eval_records(manifest, ckpt: ModelCheckpoint, cfg: dict):
    split = _split(manifest, cfg["novel"])
    return split, split_base_novel(manifest, split, seed=_data_seed(cfg, ckpt))


def _support_pool(manifest, ckpt: ModelCheckpoint, pools):
    if ckpt.stage == "finetune":
        by_id = {r.id: r for r in manifest.records}
        try:
            return [by_id[i] for i in ckpt.meta["support_ids"]]
        except KeyError as exc:
            raise InputError(f"checkpoint support image {exc} is not in this dataset") from None
    return pools.base_pool


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: dict) -> int:
    out = Path(cfg["out"])
    gen = GenerationConfig(num_images=cfg["images"], image_size=cfg["image_size"], seed=cfg["seed"])
    m = generate_shapeworld(gen, out, threads=cfg["threads"])
    n_obj = sum(len(r.boxes) for r in m.records)
    print(f"wrote {len(m.records)} images ({n_obj} objects) to {out}")
    return EXIT_OK


def cmd_train_base(cfg: dict) -> int:
    manifest = _manifest(cfg["data"])
    out = Path(cfg["out"])
    split = _split(manifest, cfg["novel"])
    pool = split_base_novel(manifest, split, seed=cfg["seed"]).base_pool
    if not pool:
        raise InputError("base pool is empty")
    anchor_sizes = None
    if cfg["anchors"] == "fit":
        wh = np.array([[b.w * cfg["image_size"] / r.width, b.h * cfg["image_size"] / r.height] for r in pool for b in r.boxes])
        anchor_sizes = fit_anchors(wh, seed=cfg["seed"])
    mcfg = ModelConfig(
        image_size=cfg["image_size"],
        width_scale=cfg["width_scale"],
        num_categories=len(split.base_ids),
        anchor_sizes=anchor_sizes,
    )
    cfg["resolved_anchors"] = [list(map(list, s)) for s in mcfg.anchors_for(cfg["image_size"])]
    write_resolved(cfg, out)
    tcfg = _train_config(cfg, "base", cfg["steps"])
    result = train_base(manifest, split, tcfg, mcfg, out_dir=out, on_log=_print_row, pool=pool)
    print(f"checkpoint: {out / 'ckpt' / 'base.fsdm'} (step {result.checkpoint.step})")
    return EXIT_OK


def cmd_finetune(cfg: dict) -> int:
    manifest = _manifest(cfg["data"])
    base = _checkpoint(cfg["base"])
    if base.stage != "base":
        raise InputError("finetune needs a base-stage checkpoint")
    out = Path(cfg["out"])
    split = _split(manifest, cfg["novel"], cfg["shots"])
    data_seed = _data_seed(cfg, base)
    cfg["data_seed"] = data_seed
    steps = _finetune_steps(cfg, base)
    cfg["steps"] = steps
    write_resolved(cfg, out)
    tcfg = _train_config(cfg, "finetune", steps, cfg["freeze"])
    result = finetune_novel(base, manifest, split, tcfg, out_dir=out, on_log=_print_row, data_seed=data_seed)
    print(f"checkpoint: {out / 'ckpt' / 'finetune.fsdm'} (k_shot {result.checkpoint.meta['k_shot']}, {steps} steps)")
    return EXIT_OK


def _report_categories(cfg: dict, ckpt: ModelCheckpoint, split: ClassSplit) -> List[int]:
    cats = list(ckpt.meta.get("categories", range(ckpt.config.num_categories)))
    wanted = {"all": cats, "novel": [c for c in cats if c in split.novel_ids], "base": [c for c in cats if c in split.base_ids]}[cfg["split"]]
    if not wanted:
        raise InputError(f"checkpoint covers no {cfg['split']} categories")
    return wanted


def cmd_evaluate(cfg: dict) -> int:
    manifest = _manifest(cfg["data"])
    ckpt = _checkpoint(cfg["ckpt"])
    out = Path(cfg["out"])
    split, pools = _eval_records(manifest, ckpt, cfg)
    cats = list(ckpt.meta.get("categories", range(ckpt.config.num_categories)))
    report_ids = _report_categories(cfg, ckpt, split)
    cfg["data_seed"] = _data_seed(cfg, ckpt)
    write_resolved(cfg, out)
    groups = {"novel": [c for c in cats if c in split.novel_ids], "base": [c for c in cats if c in split.base_ids]}
    report = evaluate(
        ckpt.build_model(), manifest, pools.novel_eval_pool, cats, _support_pool(manifest, ckpt, pools),
        seed=cfg["seed"], image_size=cfg["image_size"], conf=cfg["conf"], iou_match=cfg["iou"],
        groups={k: v for k, v in groups.items() if v},
        extra_config={"checkpoint": str(cfg["ckpt"]), "stage": ckpt.stage, "shots": ckpt.meta.get("k_shot"), "split": cfg["split"]},
        report_ids=report_ids,
    )
    path = report.write(out / "reports" / f"eval_{cfg['split']}.json")
    for c in report_ids:
        ap = report.ap[c]
        print(f"{manifest.categories[c]:>10}  AP {'n/a' if ap is None else f'{ap:.4f}'}")
    m = report.mean_ap()
    print(f"mAP {'n/a' if m is None else f'{m:.4f}'}  -> {path}")
    return EXIT_OK


def cmd_shots(cfg: dict) -> int:
    manifest = _manifest(cfg["data"])
    base = _checkpoint(cfg["base"])
    out = Path(cfg["out"])
    split = _split(manifest, cfg["novel"])
    if not cfg["list"]:
        raise InputError("--list needs at least one shot count")
    cfg["data_seed"] = _data_seed(cfg, base)
    steps = _finetune_steps(cfg, base)
    cfg["steps"] = steps
    write_resolved(cfg, out)
    sc = ShotsConfig(
        finetune=_train_config(cfg, "finetune", steps, cfg["freeze"]),
        seeds=tuple(cfg["seeds"]),
        data_seed=cfg["data_seed"],
        eval_seed=cfg["seed"],
        image_size=cfg["image_size"],
    )
    runs_path = out / "reports" / "shots_runs.jsonl"
    runs_path.unlink(missing_ok=True)

    def on_run(run):
        with open(runs_path, "a") as fh:
            fh.write(json.dumps({**run, "ap": {str(k): v for k, v in run["ap"].items()}}, sort_keys=True) + "\n")
        print(f"shots {run['shots']:>3}  seed {run['seed']}  novel mAP {run['novel']:.4f}  base mAP {run['base']:.4f}", flush=True)

    result = shots_experiment(base, manifest, split, cfg["list"], sc, on_run=on_run)
    csv_path = write_shots_csv(result.rows, out / "reports" / "shots.csv")
    summary = {**result.summary(), "config": cfg}
    (out / "reports" / "shots_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"-> {csv_path}")
    return EXIT_OK


def _draw(image: np.ndarray, dets, names, path: Path) -> None:
    from PIL import Image, ImageDraw

    arr = (np.clip(image.transpose(1, 2, 0), 0, 1) * 255).round().astype(np.uint8)
    im = Image.fromarray(arr).convert("RGB")
    scale = 4
    im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(im)
    rng = np.random.default_rng(0)
    palette = [tuple(int(v) for v in rng.integers(64, 256, size=3)) for _ in range(len(names))]
    for d in dets:
        x0, y0, x1, y1 = (d.cx - d.w / 2) * scale, (d.cy - d.h / 2) * scale, (d.cx + d.w / 2) * scale, (d.cy + d.h / 2) * scale
        color = palette[d.category % len(palette)]
        draw.rectangle([x0, y0, x1, y1], outline=color, width=2)
        draw.text((x0 + 2, y0 + 1), f"{names[d.category]} {d.score:.2f}", fill=color)
    im.save(path)


def cmd_detect(cfg: dict) -> int:
    manifest = _manifest(cfg["data"])
    ckpt = _checkpoint(cfg["ckpt"])
    out = Path(cfg["out"])
    split, pools = _eval_records(manifest, ckpt, cfg)
    cats = list(ckpt.meta.get("categories", range(ckpt.config.num_categories)))
    records = pools.novel_eval_pool if cfg["pool"] == "eval" else list(manifest.records)
    if cfg["limit"] is not None:
        records = records[: cfg["limit"]]
    cfg["data_seed"] = _data_seed(cfg, ckpt)
    write_resolved(cfg, out)
    model = ckpt.build_model()
    supports = fixed_supports(manifest, _support_pool(manifest, ckpt, pools), cats, model.config.reweight_size, cfg["seed"])
    dets = run_detector(model, manifest, records, cats, supports, cfg["image_size"], conf=min(cfg["conf"], CURVE_CONF))
    dump = out / "reports" / "detections.jsonl"
    png_dir = out / "reports" / "detections"
    if cfg["png"]:
        png_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(dump, "w") as fh:
        for rec, ds in zip(records, dets):
            kept = [d for d in ds if d.score >= cfg["conf"]]
            for d in kept:
                row = {"image": rec.id, "box": [round(v, 3) for v in (d.cx, d.cy, d.w, d.h)], "category": d.category, "name": manifest.categories[d.category], "score": round(d.score, 6)}
                fh.write(json.dumps(row, sort_keys=True) + "\n")
                n += 1
            if cfg["png"]:
                _draw(manifest.load_image(rec), kept, manifest.categories, png_dir / f"{rec.id}.png")
    print(f"{n} detections over {len(records)} images -> {dump}")
    return EXIT_OK


def cmd_export_vectors(cfg: dict) -> int:
    manifest = _manifest(cfg["data"])
    ckpt = _checkpoint(cfg["ckpt"])
    out = Path(cfg["out"])
    split, pools = _eval_records(manifest, ckpt, cfg)
    cats = list(ckpt.meta.get("categories", range(ckpt.config.num_categories)))
    cfg["data_seed"] = _data_seed(cfg, ckpt)
    write_resolved(cfg, out)
    model = ckpt.build_model()
    pool = _support_pool(manifest, ckpt, pools)
    vectors, labels = sample_support_vectors(model, manifest, pool, cats, cfg["per_category"], cfg["seed"])
    results = {}
    for i, v in enumerate(vectors):
        scale = i + 1
        path = out / "reports" / f"vectors_scale{scale}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["category", "index"] + [f"v{j}" for j in range(v.shape[1])])
            for n, (row, c) in enumerate(zip(v, labels)):
                w.writerow([int(c), n] + [repr(float(x)) for x in row])
        results[scale] = reweighting_cluster_metric(v, labels)
    csv_path, json_path = write_cluster_reports(results, out / "reports", [v.shape[1] for v in vectors])
    for scale, r in sorted(results.items()):
        print(f"scale {scale} ({vectors[scale - 1].shape[1]} ch): intra {r.intra:.4f}  inter {r.inter:.4f}  ratio {r.ratio:.4f}")
    print(f"-> {json_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file (flags override it)")
    common.add_argument("--seed", type=int, default=S, help="run seed (default: $FSDM_SEED or 0)")
    common.add_argument("--threads", type=pos_int, default=S, help="BLAS / worker threads; 1 is the deterministic reference")

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--lr", type=pos_float, default=S)
    train.add_argument("--batch-size", type=pos_int, default=S)
    train.add_argument("--sizes", type=int_list, default=S, help="multi-scale input sizes, e.g. 96,128,160")
    train.add_argument("--momentum", type=float, default=S)
    train.add_argument("--weight-decay", type=float, default=S)
    train.add_argument("--w-obj", type=float, default=S)
    train.add_argument("--w-noobj", type=float, default=S)
    train.add_argument("--grad-clip", type=pos_float, default=S)
    train.add_argument("--flip", action=argparse.BooleanOptionalAction, default=S, help="random horizontal flips (off by default)")
    train.add_argument("--log-every", type=pos_int, default=S)
    train.add_argument("--checkpoint-every", type=nonneg_int, default=S)

    split = argparse.ArgumentParser(add_help=False)
    split.add_argument("--novel", type=int_list, default=S, help="novel category ids (default 8,9,10)")
    split.add_argument("--data-seed", type=int, default=S, help="seed of the evaluation hold-out (default: from checkpoint)")

    p = argparse.ArgumentParser(prog="fsodm", description="Few-shot object detection with feature reweighting on ShapeWorld.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render a ShapeWorld dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--images", type=nonneg_int, default=S)
    g.add_argument("--image-size", type=pos_int, default=S)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-base", parents=[common, train], help="base-stage training")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=nonneg_int, default=S)
    t.add_argument("--epochs", type=float, default=S, help="overrides --steps")
    t.add_argument("--novel", type=int_list, default=S, help="novel category ids held out (default 8,9,10)")
    t.add_argument("--width-scale", type=pos_float, default=S)
    t.add_argument("--image-size", type=pos_int, default=S)
    t.add_argument("--anchors", choices=("paper", "fit"), default=S, help="reference anchor table or k-means fit on training boxes")
    t.set_defaults(func=cmd_train_base)

    f = sub.add_parser("finetune", parents=[common, train, split], help="K-shot finetuning of a base checkpoint")
    f.add_argument("--data", required=True)
    f.add_argument("--base", required=True, help="base checkpoint file")
    f.add_argument("--out", required=True)
    f.add_argument("--shots", type=pos_int, default=S)
    f.add_argument("--steps", type=nonneg_int, default=S, help="default: 10%% of the base checkpoint's steps")
    f.add_argument("--freeze", type=str_list, default=S, help="comma-separated parameter prefixes to freeze")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("evaluate", parents=[common, split], help="VOC 11-point AP on held-out images")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("all", "base", "novel"), default=S)
    e.add_argument("--conf", type=float, default=S)
    e.add_argument("--iou", type=float, default=S)
    e.add_argument("--image-size", type=pos_int, default=S)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("shots", parents=[common, train, split], help="novel mAP against the number of shots")
    s.add_argument("--data", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--list", type=int_list, default=S, help="shot counts, e.g. 3,5,10")
    s.add_argument("--seeds", type=int_list, default=S, help="finetune seeds averaged per shot count")
    s.add_argument("--steps", type=nonneg_int, default=S)
    s.add_argument("--freeze", type=str_list, default=S)
    s.add_argument("--image-size", type=pos_int, default=S)
    s.set_defaults(func=cmd_shots)

    d = sub.add_parser("detect", parents=[common, split], help="dump detections (and optional PNGs)")
    d.add_argument("--data", required=True)
    d.add_argument("--ckpt", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--conf", type=float, default=S)
    d.add_argument("--pool", choices=("eval", "all"), default=S)
    d.add_argument("--limit", type=nonneg_int, default=S)
    d.add_argument("--png", action="store_true", default=S)
    d.add_argument("--image-size", type=pos_int, default=S)
    d.set_defaults(func=cmd_detect)

    v = sub.add_parser("export-vectors", parents=[common, split], help="reweighting vectors and cluster metric")
    v.add_argument("--data", required=True)
    v.add_argument("--ckpt", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--per-category", type=pos_int, default=S)
    v.set_defaults(func=cmd_export_vectors)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    func = args.func
    try:
        cfg = resolve(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=cfg["threads"]):
            return func(cfg)
    except TrainingDiverged as exc:
        where = f"; last good checkpoint at {exc.salvage}" if exc.salvage else ""
        print(f"error: training diverged: {exc}{where}", file=sys.stderr)
        return EXIT_RUNTIME
    except (InputError, FileNotFoundError, ManifestError, CheckpointError, CapacityError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, RuntimeError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
