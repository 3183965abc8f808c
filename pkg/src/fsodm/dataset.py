"""ShapeWorld synthetic data, manifests, base/novel splits and episodes."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from .shapes import CATEGORY_NAMES, sample_angle, shape_mask

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"


class CapacityError(ValueError):
    """Not enough annotated instances or support candidates."""


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class BoxAnnotation:
    """Axis-aligned box in pixels; pixel i spans [i, i+1)."""

    cx: float
    cy: float
    w: float
    h: float
    category_id: int

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def scaled(self, fx: float, fy: float) -> "BoxAnnotation":
        return BoxAnnotation(self.cx * fx, self.cy * fy, self.w * fx, self.h * fy, self.category_id)

    def to_json(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h, "cat": self.category_id}

    @classmethod
    def from_json(cls, d: dict) -> "BoxAnnotation":
        return cls(float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"]), int(d["cat"]))


@dataclass(frozen=True)
class ImageRecord:
    """Manifest entry. ``ignore`` boxes are real objects withheld from supervision."""

    id: str
    path: str
    width: int
    height: int
    boxes: tuple
    ignore: tuple = ()

    def categories(self) -> set:
        return {b.category_id for b in self.boxes}

    def with_boxes(self, boxes, ignore=()) -> "ImageRecord":
        return dataclasses.replace(self, boxes=tuple(boxes), ignore=tuple(ignore))


@dataclass
class ImageSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    annotations: List[BoxAnnotation]
    id: str
    ignore: List[BoxAnnotation] = field(default_factory=list)


@dataclass
class SupportSample:
    image: np.ndarray  # [3, H, W]
    mask: np.ndarray  # [1, H, W] in {0, 1}
    category_id: int
    source_id: str = ""

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.image, self.mask], axis=0)


@dataclass
class Episode:
    query: ImageSample
    supports: List[SupportSample]

    @property
    def category_ids(self) -> List[int]:
        return [s.category_id for s in self.supports]


@dataclass(frozen=True)
class ClassSplit:
    base_ids: tuple
    novel_ids: tuple
    k_shot: int = 10

    def __post_init__(self):
        if set(self.base_ids) & set(self.novel_ids):
            raise ValueError("base and novel categories overlap")

    def validate(self, num_categories: int) -> None:
        if set(self.base_ids) | set(self.novel_ids) != set(range(num_categories)):
            raise ValueError("base and novel categories must cover every category")
        if self.k_shot < 1:
            raise CapacityError(f"k_shot must be positive, got {self.k_shot}")


DEFAULT_SPLIT = ClassSplit(base_ids=tuple(range(8)), novel_ids=(8, 9, 10), k_shot=10)


@dataclass
class GenerationConfig:
    num_images: int = 500
    image_size: int = 128
    categories: tuple = CATEGORY_NAMES
    objects_per_image_range: tuple = (1, 4)
    size_range: tuple = (12, 56)
    size_jitter: float = 0.15
    noise_level: float = 0.04
    seed: int = 0
    placement_retries: int = 40

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["categories"] = list(self.categories)
        d["objects_per_image_range"] = list(self.objects_per_image_range)
        d["size_range"] = list(self.size_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        d = dict(d)
        for key in ("categories", "objects_per_image_range", "size_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class DatasetManifest:
    seed: int
    config: dict
    categories: List[str]
    records: List[ImageRecord]
    root: Optional[Path] = None
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        self._cache: Dict[str, np.ndarray] = {}
        self.by_id = {r.id: r for r in self.records}

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    def load_image(self, record: ImageRecord) -> np.ndarray:
        """[3, H, W] float32 in [0, 1]."""
        raw = self._cache.get(record.path)
        if raw is None:
            if self.root is None:
                raise ManifestError("manifest has no root directory to resolve image paths")
            with Image.open(self.root / record.path) as im:
                raw = np.asarray(im.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1).copy()
            self._cache[record.path] = raw
        return raw.astype(np.float32) / 255.0

    def sample(self, record: ImageRecord) -> ImageSample:
        return ImageSample(self.load_image(record), list(record.boxes), record.id, list(record.ignore))


# ---------------------------------------------------------------------------
# generation


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.15, 0.85)
    tint = rng.uniform(-0.06, 0.06, size=3)
    grad = rng.uniform(-0.1, 0.1, size=2)
    yy, xx = np.mgrid[0:size, 0:size] / size - 0.5
    bg = base + tint[:, None, None] + grad[0] * xx[None] + grad[1] * yy[None]
    return bg


def _object_color(rng: np.random.Generator, bg_level: float) -> np.ndarray:
    for _ in range(100):
        col = rng.uniform(0.0, 1.0, size=3)
        if abs(col.mean() - bg_level) >= 0.25:
            return col
    return np.full(3, 0.0 if bg_level > 0.5 else 1.0)


def render_image(config: GenerationConfig, index: int):
    """Render image ``index``; returns (uint8 HxWx3 array, list of BoxAnnotation).

    The random stream depends only on (seed, index).
    """
    rng = np.random.default_rng([config.seed, index])
    size = config.image_size
    bg = _background(rng, size)
    canvas = bg.copy()
    lo, hi = config.objects_per_image_range
    n_obj = int(rng.integers(lo, hi + 1))
    boxes: List[BoxAnnotation] = []
    occupied = np.zeros((size, size), dtype=bool)
    for _ in range(n_obj):
        cat = int(rng.integers(len(config.categories)))
        name = config.categories[cat]
        side = float(rng.uniform(*config.size_range))
        aspect = float(np.exp(rng.uniform(-config.size_jitter, config.size_jitter)))
        angle = sample_angle(rng, name)
        color = _object_color(rng, float(bg.mean()))
        placed = False
        for _attempt in range(config.placement_retries):
            half = side * 0.75
            cx = float(rng.uniform(half, size - half))
            cy = float(rng.uniform(half, size - half))
            mask = shape_mask((size, size), name, cx, cy, side, aspect, angle)
            if not mask.any():
                continue
            ys, xs = np.nonzero(mask)
            x0, x1, y0, y1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
            if x0 == 0 or y0 == 0 or x1 == size or y1 == size:
                continue
            if occupied[max(y0 - 2, 0) : y1 + 2, max(x0 - 2, 0) : x1 + 2].any():
                continue
            occupied[y0:y1, x0:x1] = True
            canvas[:, mask] = color[:, None]
            boxes.append(BoxAnnotation((x0 + x1) / 2, (y0 + y1) / 2, float(x1 - x0), float(y1 - y0), cat))
            placed = True
            break
        if not placed:
            log.info("image %d: skipped a %s after %d placement attempts", index, name, config.placement_retries)
    canvas = canvas + rng.normal(0.0, config.noise_level, size=canvas.shape)
    img = np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return img, boxes


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def generate_shapeworld(config: GenerationConfig, out_dir, threads: int = 1) -> DatasetManifest:
    """Render ``config.num_images`` images as PNGs plus a JSON-lines manifest."""
    if config.image_size % 32:
        raise ValueError(f"image_size {config.image_size} not divisible by 32")
    if config.num_images < 0:
        raise ValueError("num_images must be non-negative")
    if len(config.categories) < 1:
        raise ValueError("at least one category is required")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    def work(i: int) -> ImageRecord:
        img, boxes = render_image(config, i)
        rel = f"images/{i:06d}.png"
        Image.fromarray(img, mode="RGB").save(out / rel, format="PNG", optimize=False)
        return ImageRecord(f"{i:06d}", rel, config.image_size, config.image_size, tuple(boxes))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(work, range(config.num_images)))
    else:
        records = [work(i) for i in range(config.num_images)]
    manifest = DatasetManifest(config.seed, config.to_dict(), list(config.categories), records, root=out)
    write_manifest(manifest, out / MANIFEST_NAME)
    return manifest


def write_manifest(manifest: DatasetManifest, path) -> None:
    header = {
        "version": manifest.version,
        "seed": manifest.seed,
        "config": manifest.config,
        "categories": [{"id": i, "name": n} for i, n in enumerate(manifest.categories)],
    }
    lines = [_dumps(header)]
    for r in manifest.records:
        lines.append(
            _dumps(
                {
                    "id": r.id,
                    "path": r.path,
                    "width": r.width,
                    "height": r.height,
                    "boxes": [b.to_json() for b in r.boxes],
                }
            )
        )
    tmp = Path(str(path) + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"empty manifest: {path}")
    try:
        header = json.loads(lines[0])
        recs = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed manifest {path}: {exc}") from exc
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {header.get('version')!r}")
    cats = sorted(header["categories"], key=lambda c: c["id"])
    if [c["id"] for c in cats] != list(range(len(cats))):
        raise ManifestError("category ids must be dense from 0")
    records = []
    for d in recs:
        boxes = tuple(BoxAnnotation.from_json(b) for b in d["boxes"])
        for b in boxes:
            if not 0 <= b.category_id < len(cats):
                raise ManifestError(f"record {d['id']}: unknown category {b.category_id}")
        records.append(ImageRecord(d["id"], d["path"], int(d["width"]), int(d["height"]), boxes))
    return DatasetManifest(header["seed"], header["config"], [c["name"] for c in cats], records, root=path.parent)


# ---------------------------------------------------------------------------
# masks, resizing and patches


def make_support_mask(image_size, annotations: Sequence[BoxAnnotation], category_id: int) -> np.ndarray:
    """[1, H, W] mask: 1 where a pixel centre lies inside a box of ``category_id``."""
    h, w = (image_size, image_size) if np.isscalar(image_size) else image_size
    mask = np.zeros((1, h, w), dtype=np.float32)
    centres_x = np.arange(w) + 0.5
    centres_y = np.arange(h) + 0.5
    found = False
    for b in annotations:
        if b.category_id != category_id:
            continue
        found = True
        cols = (centres_x >= b.x0) & (centres_x < b.x1)
        rows = (centres_y >= b.y0) & (centres_y < b.y1)
        mask[0][np.ix_(rows, cols)] = 1.0
    if not found:
        log.warning("support mask: category %d absent from image; mask is empty", category_id)
    return mask


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    c, h, w = image.shape
    if h == size and w == size:
        return image
    out = np.empty((c, size, size), dtype=np.float32)
    for k in range(c):
        out[k] = np.asarray(Image.fromarray(image[k].astype(np.float32), mode="F").resize((size, size), Image.BILINEAR))
    return out


def resize_sample(sample: ImageSample, size: int) -> ImageSample:
    _, h, w = sample.image.shape
    if h == size and w == size:
        return sample
    fx, fy = size / w, size / h
    return ImageSample(
        resize_image(sample.image, size),
        [b.scaled(fx, fy) for b in sample.annotations],
        sample.id,
        [b.scaled(fx, fy) for b in sample.ignore],
    )


def make_support(sample: ImageSample, category_id: int, size: int) -> SupportSample:
    _, h, w = sample.image.shape
    fx, fy = size / w, size / h
    boxes = [b.scaled(fx, fy) for b in sample.annotations]
    return SupportSample(resize_image(sample.image, size), make_support_mask((size, size), boxes, category_id), category_id, sample.id)


def _window_starts(extent: int, patch: int, stride: int) -> List[int]:
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def crop_patches(sample: ImageSample, patch: int, stride: int, min_overlap: float = 0.7) -> List[ImageSample]:
    """Sliding-window crops; an object is kept in a patch only if at least
    ``min_overlap`` of its area survives clipping."""
    _, h, w = sample.image.shape
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} exceeds image extent {h}x{w}")
    if not 0 < min_overlap <= 1:
        raise ValueError("min_overlap must lie in (0, 1]")
    out = []
    for y in _window_starts(h, patch, stride):
        for x in _window_starts(w, patch, stride):
            kept = []
            for b in sample.annotations:
                cx0, cy0 = max(b.x0, x), max(b.y0, y)
                cx1, cy1 = min(b.x1, x + patch), min(b.y1, y + patch)
                if cx1 <= cx0 or cy1 <= cy0:
                    continue
                if (cx1 - cx0) * (cy1 - cy0) / b.area >= min_overlap:
                    kept.append(BoxAnnotation((cx0 + cx1) / 2 - x, (cy0 + cy1) / 2 - y, cx1 - cx0, cy1 - cy0, b.category_id))
            img = sample.image[:, y : y + patch, x : x + patch].copy()
            out.append(ImageSample(img, kept, f"{sample.id}@{x},{y}"))
    return out


# ---------------------------------------------------------------------------
# splits and episodes


@dataclass
class SplitPools:
    base_pool: List[ImageRecord]
    novel_support_pool: List[ImageRecord]
    novel_eval_pool: List[ImageRecord]
    split: ClassSplit

    def summary(self) -> dict:
        return {
            "base_pool": len(self.base_pool),
            "novel_support_pool": len(self.novel_support_pool),
            "novel_eval_pool": len(self.novel_eval_pool),
        }


def select_k_shot(
    records: Sequence[ImageRecord],
    category_ids: Sequence[int],
    k: int,
    rng: np.random.Generator,
    quota: Optional[Dict[int, int]] = None,
) -> List[ImageRecord]:
    """Pick images until each category has exactly ``k`` annotated instances.

    ``quota`` overrides ``k`` per category (a zero quota keeps the category
    out entirely). Instances of a target category beyond its quota stay in
    the image but are moved to ``ignore``. Other categories' boxes are
    untouched.
    """
    if k < 1:
        raise CapacityError(f"k_shot must be positive, got {k}")
    targets = set(category_ids)
    need = {c: k for c in targets}
    if quota is not None:
        need.update({c: int(q) for c, q in quota.items() if c in targets})
    for c in sorted(targets):
        available = sum(1 for r in records for b in r.boxes if b.category_id == c)
        if available < need[c]:
            raise CapacityError(f"category {c}: {available} instances available, {need[c]} requested")
    chosen = []
    for i in rng.permutation(len(records)):
        if not any(need.values()):
            break
        rec = records[int(i)]
        if not any(need.get(b.category_id, 0) for b in rec.boxes):
            continue
        keep, ignore = [], list(rec.ignore)
        for b in rec.boxes:
            if b.category_id in targets:
                if need[b.category_id] > 0:
                    need[b.category_id] -= 1
                    keep.append(b)
                else:
                    ignore.append(b)
            else:
                keep.append(b)
        chosen.append(rec.with_boxes(keep, ignore))
    return sorted(chosen, key=lambda r: r.id)


def split_base_novel(manifest: DatasetManifest, split: ClassSplit, seed: int = 0, eval_fraction: float = 0.2) -> SplitPools:
    """Partition images into base training, K-shot novel support and held-out evaluation pools.

    A seeded ``eval_fraction`` of images is held out for evaluation. Of the
    rest, images free of novel objects form the base pool and the K-shot
    novel support pool is drawn from those containing novel objects.
    """
    split.validate(manifest.num_categories)
    rng = np.random.default_rng([seed, 1])
    order = rng.permutation(len(manifest.records))
    n_eval = int(round(eval_fraction * len(order)))
    eval_idx = set(int(i) for i in order[:n_eval])
    novel = set(split.novel_ids)
    train = [r for i, r in enumerate(manifest.records) if i not in eval_idx]
    evaluation = [r for i, r in enumerate(manifest.records) if i in eval_idx]
    base_pool = [r for r in train if not (r.categories() & novel)]
    candidates = [r for r in train if r.categories() & novel]
    support = select_k_shot(candidates, split.novel_ids, split.k_shot, np.random.default_rng([seed, 2, split.k_shot]))
    return SplitPools(base_pool, support, evaluation, split)


def support_groups(pool: Sequence[ImageRecord], category_ids: Sequence[int]) -> Dict[int, List[ImageRecord]]:
    groups = {c: [] for c in category_ids}
    for r in pool:
        for c in sorted(r.categories()):
            if c in groups:
                groups[c].append(r)
    return groups


def draw_supports(groups: Dict[int, List[ImageRecord]], category_ids: Sequence[int], rng: np.random.Generator) -> List[ImageRecord]:
    picks = []
    for c in sorted(category_ids):
        cands = groups.get(c, [])
        if not cands:
            raise CapacityError(f"no support candidates for category {c}")
        picks.append(cands[int(rng.integers(len(cands)))])
    return picks


def build_episode(
    query: ImageSample,
    groups: Dict[int, List[ImageRecord]],
    manifest: DatasetManifest,
    rng: np.random.Generator,
    support_size: int = 128,
    exclude_ids: Optional[set] = None,
) -> Episode:
    """One query plus one random (image, mask) support per category, ordered by id."""
    if exclude_ids:
        groups = {c: [r for r in rs if r.id not in exclude_ids] for c, rs in groups.items()}
    records = draw_supports(groups, sorted(groups), rng)
    supports = [make_support(manifest.sample(r), c, support_size) for c, r in zip(sorted(groups), records)]
    return Episode(query, supports)
