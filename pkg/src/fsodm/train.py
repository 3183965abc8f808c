"""Episodic two-stage training: base categories first, then K-shot finetuning."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import optim
from .dataset import (
    BoxAnnotation,
    ClassSplit,
    DatasetManifest,
    ImageRecord,
    CapacityError,
    make_support,
    resize_sample,
    select_k_shot,
    split_base_novel,
    support_groups,
)
from .loss import build_anchors, build_targets, total_loss
from .model import FSODM, ModelConfig
from .tensor import NumericalError, Tensor, backward

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FSDM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint file."""


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, salvage: Optional[Path] = None):
        super().__init__(message)
        self.salvage = salvage


@dataclass
class TrainConfig:
    stage: str = "base"
    steps: int = 3000
    epochs: Optional[float] = None  # overrides steps when set
    lr: float = 1e-3
    lr_decay_at: tuple = (0.6, 0.9)
    lr_factor: float = 0.1
    warmup_steps: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    multi_scale_sizes: tuple = (96, 128, 160)
    scale_period: int = 10
    seed: int = 0
    w_obj: float = 1.0
    w_noobj: float = 0.5
    grad_clip: Optional[float] = None
    freeze: tuple = ()
    flip: bool = False  # augmentation is opt-in
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.stage not in ("base", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        self.multi_scale_sizes = tuple(int(s) for s in self.multi_scale_sizes)
        self.lr_decay_at = tuple(float(x) for x in self.lr_decay_at)
        self.freeze = tuple(self.freeze)
        if not self.multi_scale_sizes or any(s % 32 or s <= 0 for s in self.multi_scale_sizes):
            raise ValueError(f"multi_scale_sizes must be positive multiples of 32, got {self.multi_scale_sizes}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def total_steps(self, pool_size: int) -> int:
        if self.epochs is None:
            return self.steps
        return int(math.ceil(self.epochs * pool_size / self.batch_size))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# finetuning keeps the stem and the first half of the residual stages fixed
FINETUNE_FREEZE = ("extractor.stem.", "extractor.stage1.", "extractor.stage2.")
FINETUNE_STEP_FRACTION = 0.1


def default_finetune_steps(base_steps: int) -> int:
    """Finetune length when none is given: a tenth of the base run, at least one step."""
    return max(1, int(base_steps * FINETUNE_STEP_FRACTION))


def learning_rate(step: int, total: int, cfg: TrainConfig) -> float:
    lr = cfg.lr
    for frac in cfg.lr_decay_at:
        if step >= int(frac * total):
            lr *= cfg.lr_factor
    if cfg.warmup_steps and step < cfg.warmup_steps:
        lr *= (step + 1) / cfg.warmup_steps
    return lr


def multi_scale_schedule(step: int, sizes: Sequence[int], period: int = 10, seed: int = 0) -> int:
    """Input size for ``step``: a new size every ``period`` steps.

    Sizes are visited in a seeded random order, one shuffled pass through the
    list per cycle, so each size is used equally often over whole cycles.
    """
    sizes = list(sizes)
    if not sizes:
        raise ValueError("sizes must be non-empty")
    if any(s % 32 for s in sizes):
        raise ValueError(f"sizes must be divisible by 32, got {sizes}")
    if len(sizes) == 1:
        return int(sizes[0])
    slot = step // max(1, period)
    cycle, pos = divmod(slot, len(sizes))
    order = np.random.default_rng([seed, 7, cycle]).permutation(len(sizes))
    return int(sizes[order[pos]])


# ---------------------------------------------------------------------------
# episode assembly


class EpisodeSampler:
    """Draws batches of queries plus one shared support per category.

    Supports for a batch are drawn from ``support_pool`` (default: the query
    pool) avoiding the batch's own query images whenever another candidate
    exists.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        pool: Sequence[ImageRecord],
        category_ids: Sequence[int],
        support_size: int,
        rng: np.random.Generator,
        support_pool: Optional[Sequence[ImageRecord]] = None,
        flip: bool = False,
    ):
        if not pool:
            raise CapacityError("training pool is empty")
        self.manifest = manifest
        self.pool = list(pool)
        self.category_ids = sorted(category_ids)
        self.support_size = support_size
        self.rng = rng
        self.flip = flip
        self.groups = support_groups(support_pool if support_pool is not None else pool, self.category_ids)
        for c, g in self.groups.items():
            if not g:
                raise CapacityError(f"no support candidates for category {c}")
        self._support_cache: Dict[tuple, np.ndarray] = {}

    def support_stack(self, record: ImageRecord, category_id: int) -> np.ndarray:
        key = (record.id, category_id)
        out = self._support_cache.get(key)
        if out is None:
            out = make_support(self.manifest.sample(record), category_id, self.support_size).stacked()
            self._support_cache[key] = out
        return out

    def draw_supports(self, exclude: set) -> np.ndarray:
        stacks = []
        for c in self.category_ids:
            cands = [r for r in self.groups[c] if r.id not in exclude] or self.groups[c]
            rec = cands[int(self.rng.integers(len(cands)))]
            stacks.append(self.support_stack(rec, c))
        return np.stack(stacks)

    def next_batch(self, batch_size: int, image_size: int):
        idx = self.rng.choice(len(self.pool), size=min(batch_size, len(self.pool)), replace=False)
        records = [self.pool[int(i)] for i in sorted(idx)]
        images, anns, ignores = [], [], []
        for rec in records:
            s = resize_sample(self.manifest.sample(rec), image_size)
            img, boxes, ign = s.image, s.annotations, s.ignore
            if self.flip and self.rng.random() < 0.5:
                img = img[:, :, ::-1]
                boxes = [_hflip(b, image_size) for b in boxes]
                ign = [_hflip(b, image_size) for b in ign]
            images.append(img)
            anns.append(boxes)
            ignores.append(ign)
        supports = self.draw_supports({r.id for r in records})
        return np.stack(images).astype(np.float32), anns, ignores, supports


def _hflip(b: BoxAnnotation, size: int) -> BoxAnnotation:
    return BoxAnnotation(size - b.cx, b.cy, b.w, b.h, b.category_id)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: Dict[str, np.ndarray]
    stage: str = "init"
    step: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: FSODM, stage: str, step: int, **meta) -> "ModelCheckpoint":
        return cls(model.config, {n: p.data.copy() for n, p in model.params.items()}, stage, step, meta)

    def build_model(self) -> FSODM:
        model = FSODM(self.config, seed=0)
        expected = {n: p.shape for n, p in model.params.items()}
        if set(expected) != set(self.params):
            missing = sorted(set(expected) ^ set(self.params))
            raise CheckpointError(f"parameter names do not match model layout: {missing[:3]}")
        for name, p in model.params.items():
            if self.params[name].shape != expected[name]:
                raise CheckpointError(f"shape mismatch for {name}: file {self.params[name].shape} vs config {expected[name]}")
            p.data = self.params[name].astype(p.data.dtype, copy=True)
        return model


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def save_checkpoint(ckpt: ModelCheckpoint, path) -> Path:
    """Write ``ckpt``; the payload ends with a CRC32 of everything before it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(ckpt.meta, stage=ckpt.stage, step=ckpt.step)
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _blob(_canonical(ckpt.config.to_dict())), _blob(_canonical(meta))]
    parts.append(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(_blob(name.encode()))
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(_blob(arr.tobytes()))
    body = b"".join(parts)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())


def load_checkpoint(path, expect_config: Optional[ModelConfig] = None) -> ModelCheckpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: checkpoint truncated")
    r = _Reader(raw[:-4])
    r.take(4)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    if zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt or truncated")
    try:
        config = ModelConfig.from_dict(json.loads(r.blob()))
        meta = json.loads(r.blob())
        params = {}
        for _ in range(r.u32()):
            name = r.blob().decode()
            ndim = r.u32()
            shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
            data = r.blob()
            params[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    stage, step = meta.pop("stage", "init"), meta.pop("step", 0)
    ckpt = ModelCheckpoint(config, params, stage, step, meta)
    if expect_config is not None:
        ref = FSODM(expect_config, seed=0)
        for name, p in ref.params.items():
            if name not in params or params[name].shape != p.shape:
                got = params[name].shape if name in params else None
                raise CheckpointError(f"shape mismatch for {name}: file {got} vs config {p.shape}")
    return ckpt


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    history: List[dict]


def train_steps(
    model: FSODM,
    sampler: EpisodeSampler,
    cfg: TrainConfig,
    total: int,
    metrics_path: Optional[Path] = None,
    checkpoint_path: Optional[Path] = None,
    on_log: Optional[Callable[[dict], None]] = None,
    stage_meta: Optional[dict] = None,
) -> TrainResult:
    """Run ``total`` SGD steps of episodic training on ``model`` in place."""
    frozen = tuple(cfg.freeze)
    params = [p for n, p in model.params.items() if not n.startswith(frozen)]
    for n, p in model.params.items():
        p.requires_grad = not n.startswith(frozen)
    history: List[dict] = []
    meta = dict(stage_meta or {})
    last_good = ModelCheckpoint.from_model(model, cfg.stage, 0, **meta)
    metrics = open(metrics_path, "a") if metrics_path is not None else None
    try:
        for step in range(total):
            size = multi_scale_schedule(step, cfg.multi_scale_sizes, cfg.scale_period, cfg.seed)
            images, anns, ignores, supports = sampler.next_batch(cfg.batch_size, size)
            anchors = build_anchors(model.config, size)
            targets = build_targets(anns, sampler.category_ids, anchors, ignores=ignores)
            try:
                raw = model.forward(Tensor(images), Tensor(supports))
                parts = total_loss(raw, targets, cfg.w_obj, cfg.w_noobj)
                backward(parts.total)
                if cfg.grad_clip is not None:
                    norm = optim.grad_norm(params)
                    if not np.isfinite(norm):
                        raise NumericalError("non-finite gradient norm")
                    if norm > cfg.grad_clip:
                        scale = cfg.grad_clip / norm
                        for p in params:
                            if p.grad is not None:
                                p.grad = p.grad * p.grad.dtype.type(scale)
            except NumericalError as exc:
                salvage = None
                if checkpoint_path is not None:
                    salvage = save_checkpoint(last_good, Path(checkpoint_path).with_suffix(".salvage"))
                raise TrainingDiverged(f"step {step}: {exc}", salvage) from exc
            lr = learning_rate(step, total, cfg)
            optim.sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
            row = {"step": step, "stage": cfg.stage, **{k: parts.values()[k] for k in ("loc", "obj", "noobj", "cls", "total")}, "lr": lr, "img_size": size}
            history.append(row)
            if metrics is not None:
                metrics.write(json.dumps(row, sort_keys=True) + "\n")
            if on_log is not None and (step % cfg.log_every == 0 or step == total - 1):
                on_log(row)
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                last_good = ModelCheckpoint.from_model(model, cfg.stage, step + 1, **meta, rng_state=sampler.rng.bit_generator.state)
                if checkpoint_path is not None:
                    save_checkpoint(last_good, checkpoint_path)
    finally:
        if metrics is not None:
            metrics.close()
        for p in model.params.values():
            p.requires_grad = True
            p.velocity = None
    ckpt = ModelCheckpoint.from_model(model, cfg.stage, total, **meta, rng_state=sampler.rng.bit_generator.state)
    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
    return TrainResult(ckpt, history)


def train_base(
    manifest: DatasetManifest,
    split: ClassSplit,
    cfg: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    out_dir=None,
    on_log=None,
    pool: Optional[Sequence[ImageRecord]] = None,
) -> TrainResult:
    """Base-stage training over episodes of the base categories."""
    if cfg.stage != "base":
        raise ValueError("train_base needs a base-stage TrainConfig")
    split.validate(manifest.num_categories)
    if pool is None:
        pool = split_base_novel(manifest, split, seed=cfg.seed).base_pool
    model_config = model_config or ModelConfig(num_categories=len(split.base_ids))
    model_config = dataclasses.replace(model_config, num_categories=len(split.base_ids))
    model = FSODM(model_config, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 11])
    sampler = EpisodeSampler(manifest, pool, split.base_ids, model_config.reweight_size, rng, flip=cfg.flip)
    total = cfg.total_steps(len(pool))
    paths = _stage_paths(out_dir, "base")
    return train_steps(
        model, sampler, cfg, total, paths.get("metrics"), paths.get("ckpt"), on_log,
        stage_meta={"seed": cfg.seed, "categories": list(split.base_ids), "train_config": cfg.to_dict()},
    )


def finetune_pool(manifest: DatasetManifest, split: ClassSplit, data_seed: int, shot_seed: int) -> List[ImageRecord]:
    """Balanced tuning set: K instances per novel category plus K per base category.

    ``data_seed`` fixes the held-out evaluation images, ``shot_seed`` the
    K-shot draw. Evaluation images never enter the tuning set.
    """
    pools = split_base_novel(manifest, split, seed=data_seed)
    rng = np.random.default_rng([shot_seed, 3, split.k_shot])
    held_out = {r.id for r in pools.novel_eval_pool}
    novel_ids = set(split.novel_ids)
    candidates = [r for r in manifest.records if r.id not in held_out and r.categories() & novel_ids]
    novel = select_k_shot(candidates, split.novel_ids, split.k_shot, rng)
    # base objects already present in the novel images count toward the base quota
    base_ids = set(split.base_ids)
    seen = {c: 0 for c in split.base_ids}
    capped = []
    for r in novel:
        keep, ignore = [], list(r.ignore)
        for b in r.boxes:
            if b.category_id in base_ids:
                if seen[b.category_id] < split.k_shot:
                    seen[b.category_id] += 1
                    keep.append(b)
                else:
                    ignore.append(b)
            else:
                keep.append(b)
        capped.append(r.with_boxes(keep, ignore))
    novel = capped
    quota = {c: split.k_shot - n for c, n in seen.items()}
    base = select_k_shot(pools.base_pool, split.base_ids, split.k_shot, rng, quota=quota)
    merged = {r.id: r for r in base}
    merged.update({r.id: r for r in novel})
    return [merged[k] for k in sorted(merged)]


def finetune_novel(
    base: ModelCheckpoint,
    manifest: DatasetManifest,
    split: ClassSplit,
    cfg: TrainConfig,
    out_dir=None,
    on_log=None,
    data_seed: int = 0,
) -> TrainResult:
    """Adapt a base checkpoint to base ∪ novel categories from the K-shot tuning set.

    ``data_seed`` fixes the dataset partition (held-out evaluation images);
    ``cfg.seed`` drives K-shot selection and episode sampling.
    """
    if cfg.stage != "finetune":
        raise ValueError("finetune_novel needs a finetune-stage TrainConfig")
    split.validate(manifest.num_categories)
    categories = tuple(sorted(split.base_ids + split.novel_ids))
    pool = finetune_pool(manifest, split, data_seed, cfg.seed)
    model_config = dataclasses.replace(base.config, num_categories=len(categories))
    model = FSODM(model_config, seed=0)
    for name, p in model.params.items():
        p.data = base.params[name].astype(p.data.dtype, copy=True)
    rng = np.random.default_rng([cfg.seed, 13])
    sampler = EpisodeSampler(manifest, pool, categories, model_config.reweight_size, rng, flip=cfg.flip)
    total = cfg.total_steps(len(pool))
    paths = _stage_paths(out_dir, "finetune")
    return train_steps(
        model, sampler, cfg, total, paths.get("metrics"), paths.get("ckpt"), on_log,
        stage_meta={
            "seed": cfg.seed,
            "data_seed": data_seed,
            "k_shot": split.k_shot,
            "categories": list(categories),
            "support_ids": [r.id for r in pool],
            "train_config": cfg.to_dict(),
        },
    )


def _stage_paths(out_dir, stage: str) -> dict:
    if out_dir is None:
        return {}
    out = Path(out_dir)
    (out / "ckpt").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    metrics = out / "logs" / f"{stage}_metrics.jsonl"
    if metrics.exists():
        metrics.unlink()
    return {"ckpt": out / "ckpt" / f"{stage}.fsdm", "metrics": metrics}
