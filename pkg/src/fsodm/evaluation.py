"""Detection post-processing, VOC-style AP, and the experiment drivers built on them."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .boxes import iou_matrix, nms_indices
from .dataset import ClassSplit, DatasetManifest, Episode, ImageRecord, make_support, resize_sample, split_base_novel
from .model import FSODM, Detection, candidate_detections
from .tensor import Tensor
from .train import ModelCheckpoint, TrainConfig, finetune_novel

log = logging.getLogger(__name__)

IOU_MATCH = 0.5
NMS_IOU = 0.45
CURVE_CONF = 0.005
DUMP_CONF = 0.25


# ---------------------------------------------------------------------------
# post-processing


def nms(detections: Sequence[Detection], iou_threshold: float = NMS_IOU) -> List[Detection]:
    """Greedy per-category suppression. Output is sorted by descending score."""
    kept: List[Detection] = []
    by_cat: Dict[int, List[Detection]] = {}
    for d in detections:
        by_cat.setdefault(d.category, []).append(d)
    for cat in sorted(by_cat):
        group = by_cat[cat]
        idx = nms_indices([d.box for d in group], [d.score for d in group], iou_threshold)
        kept.extend(group[i] for i in idx)
    order = sorted(range(len(kept)), key=lambda i: (-kept[i].score, i))
    return [kept[i] for i in order]


def match_detections(det_boxes, det_scores, gt_boxes, iou_match: float = IOU_MATCH, gt_difficult=None) -> np.ndarray:
    """TP flags for one image and one category.

    Detections are visited by descending score (stable); each takes the
    highest-IoU ground truth that is still unmatched, if that IoU reaches
    ``iou_match``. Returns 1 (tp), 0 (fp) or -1 (matched an ignore-flagged
    ground truth; excluded from the curve).
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    difficult = np.zeros(len(gt_boxes), bool) if gt_difficult is None else np.asarray(gt_difficult, bool)
    flags = np.zeros(len(det_boxes), dtype=np.int64)
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return flags
    order = np.argsort(-np.asarray(det_scores, dtype=np.float64), kind="stable")
    ious = iou_matrix(det_boxes, gt_boxes)
    used = np.zeros(len(gt_boxes), dtype=bool)
    for d in order:
        cand = np.where(used, -1.0, ious[d])
        g = int(np.argmax(cand))
        if cand[g] >= iou_match:
            if difficult[g]:
                flags[d] = -1
            else:
                flags[d] = 1
            used[g] = True
    return flags


@dataclass
class PRCurve:
    category: int
    scores: np.ndarray
    tp: np.ndarray
    n_gt: int

    def __post_init__(self):
        order = np.argsort(-self.scores, kind="stable")
        self.scores = np.asarray(self.scores, dtype=np.float64)[order]
        self.tp = np.asarray(self.tp, dtype=np.int64)[order]

    @property
    def recall(self) -> np.ndarray:
        return np.cumsum(self.tp) / max(self.n_gt, 1)

    @property
    def precision(self) -> np.ndarray:
        ctp = np.cumsum(self.tp)
        return ctp / np.arange(1, len(self.tp) + 1)


def voc_ap_11point(recall, precision) -> float:
    """Mean over r in {0, 0.1, ..., 1} of the best precision at recall >= r."""
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    total = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        mask = recall >= r - 1e-12
        total += float(precision[mask].max()) if mask.any() else 0.0
    return total / 11.0


def curve_ap(curve: PRCurve) -> Optional[float]:
    if curve.n_gt == 0:
        return None
    if len(curve.tp) == 0:
        return 0.0
    return voc_ap_11point(curve.recall, curve.precision)


# ---------------------------------------------------------------------------
# running the detector


def detections_from_raw(raw, config, image_size: int, category_ids: Sequence[int], conf: float = CURVE_CONF, nms_iou: float = NMS_IOU) -> List[List[Detection]]:
    """Decode a batch of raw outputs into per-image detections (dataset category ids)."""
    cands = candidate_detections([np.asarray(r.data if isinstance(r, Tensor) else r) for r in raw], config, image_size, len(category_ids))
    out = []
    for c in cands:
        keep = np.nonzero(c["score"] > conf)[0]
        dets = [
            Detection(
                *(float(v) for v in c["box"][i]),
                category=int(category_ids[int(c["category"][i])]),
                objectness=float(c["objectness"][i]),
                class_probs=c["class_probs"][i],
                score=float(c["score"][i]),
            )
            for i in keep
        ]
        out.append(nms(dets, nms_iou))
    return out


def support_vectors(model: FSODM, stacks: np.ndarray) -> List[Tensor]:
    return [Tensor(v.data) for v in model.reweighting(Tensor(stacks))]


def fixed_supports(manifest: DatasetManifest, pool: Sequence[ImageRecord], category_ids: Sequence[int], size: int, seed: int) -> np.ndarray:
    """One (image, mask) support per category drawn once, seed-controlled."""
    rng = np.random.default_rng([seed, 21])
    stacks = []
    for c in category_ids:
        cands = [r for r in pool if c in r.categories()]
        if not cands:
            raise ValueError(f"no support image for category {c}")
        rec = cands[int(rng.integers(len(cands)))]
        stacks.append(make_support(manifest.sample(rec), c, size).stacked())
    return np.stack(stacks)


def run_detector(
    model: FSODM,
    manifest: DatasetManifest,
    records: Sequence[ImageRecord],
    category_ids: Sequence[int],
    supports: np.ndarray,
    image_size: Optional[int] = None,
    conf: float = CURVE_CONF,
    batch: int = 8,
) -> List[List[Detection]]:
    """Detections for each record, in the record's own pixel frame."""
    image_size = image_size or model.config.image_size
    vectors = support_vectors(model, supports)
    out: List[List[Detection]] = []
    for start in range(0, len(records), batch):
        chunk = records[start : start + batch]
        samples = [manifest.sample(r) for r in chunk]
        images = np.stack([resize_sample(s, image_size).image for s in samples])
        raw = model.forward_with_vectors(Tensor(images), vectors)
        for s, dets in zip(samples, detections_from_raw(raw, model.config, image_size, category_ids, conf)):
            _, h, w = s.image.shape
            fx, fy = w / image_size, h / image_size
            out.append([_rescale(d, fx, fy) for d in dets])
    return out


def forward_detect(model: FSODM, episode: Episode, conf: float = DUMP_CONF, nms_iou: float = NMS_IOU) -> List[Detection]:
    """Full pipeline on one episode: detections scoring at least ``conf``, after per-category NMS."""
    image = episode.query.image
    size = image.shape[1]
    stacks = np.stack([s.stacked() for s in episode.supports])
    raw = model.forward(Tensor(image[None]), Tensor(stacks))
    dets = detections_from_raw(raw, model.config, size, episode.category_ids, conf=-np.inf, nms_iou=nms_iou)[0]
    return [d for d in dets if d.score >= conf]


def _rescale(d: Detection, fx: float, fy: float) -> Detection:
    if fx == 1 and fy == 1:
        return d
    return Detection(d.cx * fx, d.cy * fy, d.w * fx, d.h * fy, d.category, d.objectness, d.class_probs, d.score)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    ap: Dict[int, Optional[float]]
    counts: Dict[int, dict]
    config: dict
    category_names: Dict[int, str] = field(default_factory=dict)
    groups: Dict[str, List[int]] = field(default_factory=dict)

    def mean_ap(self, categories: Optional[Iterable[int]] = None) -> Optional[float]:
        cats = self.ap if categories is None else [c for c in categories if c in self.ap]
        vals = [self.ap[c] for c in cats if self.ap[c] is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def map(self) -> Optional[float]:
        return self.mean_ap()

    def to_dict(self) -> dict:
        rows = []
        for c in sorted(self.ap):
            rows.append({"category": c, "name": self.category_names.get(c, str(c)), "ap": self.ap[c], **self.counts[c]})
        summary = {"all": self.mean_ap()}
        for name, cats in self.groups.items():
            summary[name] = self.mean_ap(cats)
        return {
            "categories": rows,
            "mAP": summary,
            "mAP_defined": self.mean_ap() is not None,
            "config": self.config,
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def score_detections(
    detections: Sequence[Sequence[Detection]],
    records: Sequence[ImageRecord],
    category_ids: Sequence[int],
    iou_match: float = IOU_MATCH,
    config: Optional[dict] = None,
    category_names: Optional[Dict[int, str]] = None,
    groups: Optional[Dict[str, List[int]]] = None,
) -> EvalReport:
    """Per-category VOC AP of ``detections`` against the records' boxes.

    Boxes listed in a record's ``ignore`` are neither required nor penalised.
    """
    ap, counts = {}, {}
    for c in category_ids:
        scores, flags, n_gt = [], [], 0
        for dets, rec in zip(detections, records):
            gts = [b for b in rec.boxes if b.category_id == c]
            ign = [b for b in rec.ignore if b.category_id == c]
            n_gt += len(gts)
            mine = [d for d in dets if d.category == c]
            boxes = [[b.cx, b.cy, b.w, b.h] for b in gts + ign]
            f = match_detections([d.box for d in mine], [d.score for d in mine], boxes, iou_match, [False] * len(gts) + [True] * len(ign))
            for d, fl in zip(mine, f):
                if fl >= 0:
                    scores.append(d.score)
                    flags.append(int(fl))
        curve = PRCurve(c, np.asarray(scores, dtype=np.float64), np.asarray(flags, dtype=np.int64), n_gt)
        ap[c] = curve_ap(curve)
        tp = int(np.sum(flags))
        counts[c] = {"gt": n_gt, "detections": len(flags), "tp": tp, "fp": len(flags) - tp}
    return EvalReport(ap, counts, dict(config or {}), dict(category_names or {}), dict(groups or {}))


def evaluate(
    model: FSODM,
    manifest: DatasetManifest,
    records: Sequence[ImageRecord],
    category_ids: Sequence[int],
    support_pool: Sequence[ImageRecord],
    seed: int = 0,
    image_size: Optional[int] = None,
    conf: float = CURVE_CONF,
    iou_match: float = IOU_MATCH,
    groups: Optional[Dict[str, List[int]]] = None,
    extra_config: Optional[dict] = None,
    report_ids: Optional[Sequence[int]] = None,
) -> EvalReport:
    """Detect on ``records`` conditioned on supports drawn once from ``support_pool``.

    All of ``category_ids`` condition the detector; only ``report_ids``
    (default: all of them) are scored.
    """
    category_ids = sorted(category_ids)
    report_ids = category_ids if report_ids is None else sorted(report_ids)
    image_size = image_size or model.config.image_size
    cfg = {"iou_match": iou_match, "conf_threshold": conf, "nms_iou": NMS_IOU, "image_size": image_size, "seed": seed, "images": len(records)}
    cfg.update(extra_config or {})
    names = {c: manifest.categories[c] for c in report_ids}
    if not records:
        return EvalReport({c: None for c in report_ids}, {c: {"gt": 0, "detections": 0, "tp": 0, "fp": 0} for c in report_ids}, cfg, names, dict(groups or {}))
    supports = fixed_supports(manifest, support_pool, category_ids, model.config.reweight_size, seed)
    dets = run_detector(model, manifest, records, category_ids, supports, image_size, conf)
    return score_detections(dets, records, report_ids, iou_match, cfg, names, groups)


# ---------------------------------------------------------------------------
# reweighting-vector clusters


@dataclass
class ClusterResult:
    intra: float
    inter: float
    ratio: float
    pairs: Dict[tuple, float]


def reweighting_cluster_metric(vectors: np.ndarray, labels: Sequence[int]) -> ClusterResult:
    """Mean within-category minus mean across-category cosine similarity.

    ``pairs`` maps each (category_a, category_b), a <= b, to the mean cosine
    over its vector pairs (self-pairs excluded on the diagonal).
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        warnings.warn(f"dropping {int(np.sum(norms == 0))} zero reweighting vectors", RuntimeWarning, stacklevel=2)
        keep = norms > 0
        vectors, labels, norms = vectors[keep], labels[keep], norms[keep]
    cats = sorted(set(labels.tolist()))
    if len(cats) < 2:
        raise ValueError("cluster metric needs at least 2 categories")
    for c in cats:
        if np.sum(labels == c) < 2:
            raise ValueError(f"cluster metric needs at least 2 supports for category {c}")
    unit = vectors / norms[:, None]
    sim = unit @ unit.T
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    intra = float(sim[same & off_diag].mean())
    inter = float(sim[~same].mean())
    pairs = {}
    for a, b in itertools.combinations_with_replacement(cats, 2):
        block = sim[np.ix_(labels == a, labels == b)]
        if a == b:
            block = block[~np.eye(len(block), dtype=bool)]
        pairs[(a, b)] = float(block.mean())
    return ClusterResult(intra, inter, intra - inter, pairs)


def sample_support_vectors(
    model: FSODM,
    manifest: DatasetManifest,
    pool: Sequence[ImageRecord],
    category_ids: Sequence[int],
    per_category: int,
    seed: int = 0,
) -> tuple:
    """Reweighting vectors for ``per_category`` random supports of each category.

    Returns (list of per-scale arrays [n, C_i], labels).
    """
    rng = np.random.default_rng([seed, 31])
    stacks, labels = [], []
    for c in sorted(category_ids):
        cands = [r for r in pool if c in r.categories()]
        if not cands:
            raise ValueError(f"no support candidates for category {c}")
        pick = rng.choice(len(cands), size=per_category, replace=len(cands) < per_category)
        for i in pick:
            stacks.append(make_support(manifest.sample(cands[int(i)]), c, model.config.reweight_size).stacked())
            labels.append(c)
    stacks = np.stack(stacks)
    per_scale = [[], [], []]
    for start in range(0, len(stacks), 16):
        vs = model.reweighting(Tensor(stacks[start : start + 16]))
        for i, v in enumerate(vs):
            per_scale[i].append(v.data.astype(np.float64))
    return [np.concatenate(p) for p in per_scale], np.asarray(labels)


def write_cluster_reports(results: Dict[int, ClusterResult], out_dir, channels: Sequence[int]) -> tuple:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "cluster_metric.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scale", "category_a", "category_b", "mean_cosine"])
        for scale in sorted(results):
            for (a, b), v in sorted(results[scale].pairs.items()):
                w.writerow([scale, a, b, repr(v)])
    summary = {
        str(scale): {"channels": int(channels[scale - 1]), "intra": r.intra, "inter": r.inter, "ratio": r.ratio}
        for scale, r in sorted(results.items())
    }
    json_path = out_dir / "cluster_metric.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


# ---------------------------------------------------------------------------
# shots table


def write_shots_csv(rows: Sequence[dict], path) -> Path:
    """Rows carry shots, seed, category, ap; summary rows use category "mean"."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["shots", "category", "ap"])
        for r in rows:
            w.writerow([r["shots"], r["category"], "" if r["ap"] is None else repr(float(r["ap"]))])
    return path


def shots_summary(rows: Sequence[dict]) -> Dict[int, float]:
    out = {}
    for k in sorted({r["shots"] for r in rows}):
        vals = [r["ap"] for r in rows if r["shots"] == k and r["category"] == "mean_novel" and r["ap"] is not None]
        out[k] = float(np.mean(vals)) if vals else float("nan")
    return out



@dataclass
class ShotsConfig:
    finetune: TrainConfig
    seeds: tuple = (0, 1, 2)
    data_seed: int = 0
    eval_seed: int = 0
    image_size: Optional[int] = None


@dataclass
class ShotsResult:
    rows: List[dict]
    runs: List[dict]
    base_reference: Optional[float]

    def summary(self) -> dict:
        novel = shots_summary(self.rows)
        base = {}
        for k in novel:
            vals = [r["ap"] for r in self.rows if r["shots"] == k and r["category"] == "mean_base" and r["ap"] is not None]
            base[k] = float(np.mean(vals)) if vals else float("nan")
        return {"novel_map": {str(k): v for k, v in novel.items()}, "base_map": {str(k): v for k, v in base.items()}, "base_checkpoint_base_map": self.base_reference}


def shots_experiment(
    base: ModelCheckpoint,
    manifest: DatasetManifest,
    split: ClassSplit,
    shot_list: Sequence[int],
    config: ShotsConfig,
    on_run=None,
) -> ShotsResult:
    """Finetune ``base`` once per (K, seed) and evaluate on the held-out images.

    Every run starts from the same base parameters. Per-category APs are
    averaged over seeds; ``mean_novel`` and ``mean_base`` rows summarise each K.
    """
    pools = split_base_novel(manifest, split, seed=config.data_seed)
    eval_records = pools.novel_eval_pool
    base_model = base.build_model()
    base_report = evaluate(
        base_model, manifest, eval_records, split.base_ids, pools.base_pool, config.eval_seed, config.image_size,
    )
    base_reference = base_report.mean_ap()
    categories = sorted(split.base_ids + split.novel_ids)
    groups = {"novel": list(split.novel_ids), "base": list(split.base_ids)}
    runs = []
    rows: List[dict] = []
    by_id = {r.id: r for r in manifest.records}
    for k in shot_list:
        k_split = ClassSplit(split.base_ids, split.novel_ids, int(k))
        per_seed = []
        for seed in config.seeds:
            cfg = TrainConfig.from_dict({**config.finetune.to_dict(), "seed": int(seed), "stage": "finetune"})
            result = finetune_novel(base, manifest, k_split, cfg, data_seed=config.data_seed)
            model = result.checkpoint.build_model()
            support_pool = [by_id[i] for i in result.checkpoint.meta["support_ids"]]
            report = evaluate(
                model, manifest, eval_records, categories, support_pool, config.eval_seed, config.image_size,
                groups=groups, extra_config={"shots": int(k), "finetune_seed": int(seed)},
            )
            run = {"shots": int(k), "seed": int(seed), "novel": report.mean_ap(split.novel_ids), "base": report.mean_ap(split.base_ids), "ap": dict(report.ap)}
            runs.append(run)
            per_seed.append(report)
            if on_run is not None:
                on_run(run)
        for c in categories:
            vals = [r.ap[c] for r in per_seed if r.ap[c] is not None]
            rows.append({"shots": int(k), "category": c, "ap": float(np.mean(vals)) if vals else None})
        for name, cats in (("mean_novel", split.novel_ids), ("mean_base", split.base_ids)):
            vals = [r.mean_ap(cats) for r in per_seed if r.mean_ap(cats) is not None]
            rows.append({"shots": int(k), "category": name, "ap": float(np.mean(vals)) if vals else None})
    return ShotsResult(rows, runs, base_reference)
