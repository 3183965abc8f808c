"""Anchor assignment, target encoding and the detection loss.

Anchors are enumerated scale-major, then anchor index, then grid row and
column, matching the channel layout ``a*6 + k`` of the raw head outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Sequence

import numpy as np

from . import ops
from .boxes import iou_matrix
from .model import STRIDES, VALUES_PER_ANCHOR, ModelConfig
from .tensor import Tensor

PROB_EPS = 1e-7
LOGIT_EPS = 1e-6
# training targets keep centres reachable: a centre on a cell edge would
# otherwise ask for a logit of +-13.8 and dominate the box loss
LOC_TARGET_EPS = 1e-2

POSITIVE_MIN = 0  # labels >= 0 are ground-truth indices
NEGATIVE = -1
TIE_TOL = 1e-9
IGNORED = -2


@dataclass(frozen=True)
class AnchorSet:
    """Flat anchor table for one input size."""

    image_size: int
    sizes: np.ndarray  # [3, A, 2]
    cx: np.ndarray
    cy: np.ndarray
    w: np.ndarray
    h: np.ndarray
    scale: np.ndarray
    anchor: np.ndarray
    gy: np.ndarray
    gx: np.ndarray
    stride: np.ndarray
    grids: tuple  # (H_i, W_i) per scale

    def __len__(self) -> int:
        return len(self.cx)

    @property
    def boxes(self) -> np.ndarray:
        return np.stack([self.cx, self.cy, self.w, self.h], axis=1)

    def offsets(self) -> List[int]:
        """Start index of each scale's block."""
        out, acc = [], 0
        for gh, gw in self.grids:
            out.append(acc)
            acc += self.sizes.shape[1] * gh * gw
        return out


@lru_cache(maxsize=32)
def _anchor_set(image_size: int, sizes_key: tuple) -> AnchorSet:
    sizes = np.asarray(sizes_key, dtype=np.float64)
    cols = {k: [] for k in ("cx", "cy", "w", "h", "scale", "anchor", "gy", "gx", "stride")}
    grids = []
    for i, stride in enumerate(STRIDES):
        g = image_size // stride
        grids.append((g, g))
        a_idx, gy, gx = np.meshgrid(np.arange(sizes.shape[1]), np.arange(g), np.arange(g), indexing="ij")
        a_idx, gy, gx = a_idx.ravel(), gy.ravel(), gx.ravel()
        cols["cx"].append((gx + 0.5) * stride)
        cols["cy"].append((gy + 0.5) * stride)
        cols["w"].append(sizes[i, a_idx, 0])
        cols["h"].append(sizes[i, a_idx, 1])
        cols["scale"].append(np.full(a_idx.shape, i))
        cols["anchor"].append(a_idx)
        cols["gy"].append(gy)
        cols["gx"].append(gx)
        cols["stride"].append(np.full(a_idx.shape, float(stride)))
    arrays = {k: np.concatenate(v) for k, v in cols.items()}
    for k in ("cx", "cy", "w", "h", "stride"):
        arrays[k] = arrays[k].astype(np.float64)
    return AnchorSet(image_size, sizes, grids=tuple(grids), **arrays)


def build_anchors(config: ModelConfig, image_size: int) -> AnchorSet:
    sizes = config.anchors_for(image_size)
    key = tuple(tuple(tuple(float(v) for v in a) for a in s) for s in sizes)
    return _anchor_set(image_size, key)


def fit_anchors(wh, k: int = 9, seed: int = 0, iters: int = 100, restarts: int = 5) -> tuple:
    """k-means over box sizes with 1 - IoU (boxes co-centred) as the distance.

    Returns a 3 x (k/3) anchor table, largest areas first to match the
    coarse-to-fine scale order.
    """
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    if k % 3 or len(wh) < k:
        raise ValueError(f"need k divisible by 3 and at least k boxes, got k={k}, {len(wh)} boxes")

    def iou_wh(a, b):
        inter = np.minimum(a[:, None, 0], b[None, :, 0]) * np.minimum(a[:, None, 1], b[None, :, 1])
        return inter / (a[:, None].prod(-1) + b[None, :].prod(-1) - inter)

    rng = np.random.default_rng([seed, 41])
    best, best_fit = None, -1.0
    for _ in range(restarts):
        # k-means++ seeding under the IoU distance
        centres = wh[[int(rng.integers(len(wh)))]]
        while len(centres) < k:
            d = 1 - iou_wh(wh, centres).max(axis=1)
            p = d**2 / np.sum(d**2) if np.sum(d**2) > 0 else None
            centres = np.vstack([centres, wh[rng.choice(len(wh), p=p)]])
        for _ in range(iters):
            assign = iou_wh(wh, centres).argmax(axis=1)
            new = np.array([np.median(wh[assign == j], axis=0) if np.any(assign == j) else centres[j] for j in range(k)])
            if np.allclose(new, centres):
                break
            centres = new
        fit = float(iou_wh(wh, centres).max(axis=1).mean())
        if fit > best_fit:
            best, best_fit = centres, fit
    centres = best
    centres = centres[np.argsort(-centres.prod(axis=1), kind="stable")]
    rows = np.round(centres, 1).reshape(3, k // 3, 2)
    return tuple(tuple((float(w), float(h)) for w, h in row[np.argsort(row.prod(axis=1), kind="stable")]) for row in rows)


@dataclass
class MatchResult:
    labels: np.ndarray  # per anchor: gt index (>= 0), NEGATIVE or IGNORED
    forced: np.ndarray  # per gt: index of its best-IoU anchor
    max_iou: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return np.nonzero(self.labels >= POSITIVE_MIN)[0]

    @property
    def negative(self) -> np.ndarray:
        return np.nonzero(self.labels == NEGATIVE)[0]


def match_anchors(gt_boxes, anchors: AnchorSet, pos_thr: float = 0.7, neg_thr: float = 0.3, ignore_boxes=None) -> MatchResult:
    """Label anchors against ground truth.

    Positive: IoU > pos_thr with some box, or the best anchor of some box.
    Negative: max IoU < neg_thr and not positive. Everything else is ignored.
    A positive anchor is labelled with the box, among those that made it
    positive, that it overlaps most (lowest index on ties). Each box's best
    anchor is chosen among the anchors within ``TIE_TOL`` of maximal IoU,
    preferring one whose cell contains the box centre, then the lowest index.
    ``ignore_boxes`` (unlabelled real objects) can only turn negatives into
    ignored anchors.
    """
    if not 0 <= neg_thr <= pos_thr <= 1:
        raise ValueError("thresholds must satisfy 0 <= neg_thr <= pos_thr <= 1")
    n = len(anchors)
    if n == 0:
        raise RuntimeError("empty anchor set")
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    if len(gt) == 0:
        max_iou = np.zeros(n)
        forced = np.zeros(0, dtype=np.int64)
    else:
        ious = iou_matrix(anchors.boxes, gt)  # [n, G]
        max_iou = ious.max(axis=1)
        # centres on a cell boundary tie two cells; only one can regress the box
        tied = ious >= ious.max(axis=0) - TIE_TOL
        own = tied & _contains_centre(gt, anchors)
        forced = np.where(own.any(axis=0), own.argmax(axis=0), tied.argmax(axis=0))
        cand = ious > pos_thr
        cand[forced, np.arange(len(gt))] = True
        owner = np.where(cand, ious, -1.0).argmax(axis=1)
        labels[max_iou >= neg_thr] = IGNORED
        pos = cand.any(axis=1)
        labels[pos] = owner[pos]
    if ignore_boxes is not None and len(ignore_boxes):
        ig = iou_matrix(anchors.boxes, np.asarray(ignore_boxes, dtype=np.float64).reshape(-1, 4)).max(axis=1)
        labels[(labels == NEGATIVE) & (ig >= neg_thr)] = IGNORED
    return MatchResult(labels, forced, max_iou)


def _contains_centre(gt: np.ndarray, anchors: AnchorSet) -> np.ndarray:
    """[n, G] mask: box g's centre lies in anchor n's cell."""
    fx = gt[None, :, 0] / anchors.stride[:, None] - anchors.gx[:, None]
    fy = gt[None, :, 1] / anchors.stride[:, None] - anchors.gy[:, None]
    return (fx >= 0) & (fx < 1) & (fy >= 0) & (fy < 1)


def responsible(gt, anchors: AnchorSet, anchor_idx) -> np.ndarray:
    """True where the gt centre falls inside the anchor's grid cell."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    stride = anchors.stride[anchor_idx]
    fx = gt[:, 0] / stride - anchors.gx[anchor_idx]
    fy = gt[:, 1] / stride - anchors.gy[anchor_idx]
    return (fx >= 0) & (fx < 1) & (fy >= 0) & (fy < 1)


def _logit(p, eps=LOGIT_EPS):
    p = np.clip(p, eps, 1 - eps)
    return np.log(p) - np.log1p(-p)


def encode_targets(gt, anchor_wh, cell, stride, eps: float = LOGIT_EPS) -> np.ndarray:
    """Raw-offset targets (x_t, y_t, w_t, h_t) that decode back to ``gt``.

    gt: [..., 4] (cx, cy, w, h); anchor_wh: [..., 2]; cell: [..., 2] (gx, gy).
    The in-cell centre fraction is clamped to [eps, 1 - eps].
    """
    gt = np.asarray(gt, dtype=np.float64)
    anchor_wh = np.asarray(anchor_wh, dtype=np.float64)
    cell = np.asarray(cell, dtype=np.float64)
    stride = np.asarray(stride, dtype=np.float64)
    if np.any(gt[..., 2:] <= 0):
        raise ValueError("ground-truth extents must be positive")
    xt = _logit(gt[..., 0] / stride - cell[..., 0], eps)
    yt = _logit(gt[..., 1] / stride - cell[..., 1], eps)
    wt = np.log(gt[..., 2] / anchor_wh[..., 0])
    ht = np.log(gt[..., 3] / anchor_wh[..., 1])
    return np.stack([xt, yt, wt, ht], axis=-1)


# ---------------------------------------------------------------------------
# loss terms


def loc_loss(pred: Tensor, target, weights=None) -> Tensor:
    """Sum over positives of squared offset error, scaled by ``weights`` (default 1/N_pos)."""
    n = pred.shape[0]
    if n == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights)
    diff = ops.sub(pred, Tensor(np.asarray(target, dtype=pred.dtype)))
    per = ops.square(diff)
    return ops.sum(ops.mul(per, Tensor(np.repeat(w[:, None], pred.shape[1], axis=1))))


def _neg_log(p: Tensor, weights) -> Tensor:
    return ops.neg(ops.sum(ops.mul(ops.log(ops.clip(p, PROB_EPS, 1 - PROB_EPS)), Tensor(weights))))


def obj_loss(pos_logits: Tensor, neg_logits: Tensor, w_obj: float = 1.0, w_noobj: float = 0.5, pos_weights=None, neg_weights=None):
    """(L_obj, L_noobj, w_obj*L_obj + w_noobj*L_noobj) from raw objectness logits."""
    npos, nneg = pos_logits.shape[0], neg_logits.shape[0]
    zero = Tensor(np.zeros((), dtype=pos_logits.dtype))
    if npos:
        pw = np.full(npos, 1.0 / npos) if pos_weights is None else np.asarray(pos_weights)
        lobj = _neg_log(ops.sigmoid(pos_logits), pw)
    else:
        lobj = zero
    if nneg:
        nw = np.full(nneg, 1.0 / nneg) if neg_weights is None else np.asarray(neg_weights)
        # 1 - S(x) == S(-x)
        lnoobj = _neg_log(ops.sigmoid(ops.neg(neg_logits)), nw)
    else:
        lnoobj = zero
    return lobj, lnoobj, ops.add(ops.mul(lobj, w_obj), ops.mul(lnoobj, w_noobj))


def cls_loss(groups: Tensor, true_index, weights=None) -> Tensor:
    """Mean cross-entropy of softmax over each row of ``groups`` [P, N]."""
    p = groups.shape[0]
    if p == 0:
        return Tensor(np.zeros((), dtype=groups.dtype))
    w = np.full(p, 1.0 / p) if weights is None else np.asarray(weights)
    logp = ops.log_softmax(groups, axis=1)
    picked = ops.gather(logp, np.arange(p) * groups.shape[1] + np.asarray(true_index))
    return ops.neg(ops.sum(ops.mul(picked, Tensor(w))))


@dataclass
class LossBreakdown:
    loc: Tensor
    obj: Tensor
    noobj: Tensor
    cls: Tensor
    total: Tensor
    n_pos: int
    n_neg: int

    def values(self) -> dict:
        return {
            "loc": float(self.loc.data),
            "obj": float(self.obj.data),
            "noobj": float(self.noobj.data),
            "cls": float(self.cls.data),
            "total": float(self.total.data),
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
        }


@dataclass
class BatchTargets:
    """Flat indices into the concatenated raw outputs plus weights and targets."""

    loc_index: np.ndarray  # [L, 4], L <= P responsible positives
    loc_target: np.ndarray  # [L, 4]
    loc_weight: np.ndarray  # [L] = 1 / (B * L of its episode)
    obj_index: np.ndarray  # [P]
    cls_index: np.ndarray  # [P, M]
    cls_true: np.ndarray  # [P]
    pos_weight: np.ndarray  # [P] = 1 / (B * N_pos of its episode)
    neg_index: np.ndarray  # [Q]
    neg_weight: np.ndarray  # [Q]
    n_pos: int
    n_neg: int


def _raw_layout(anchors: AnchorSet, batch: int, num_maps: int):
    """Offsets and strides of the flattened per-scale raw tensors [B*M, A*6, H, W]."""
    a = anchors.sizes.shape[1]
    starts, acc = [], 0
    for gh, gw in anchors.grids:
        starts.append(acc)
        acc += batch * num_maps * a * VALUES_PER_ANCHOR * gh * gw
    return starts


def raw_index(anchors: AnchorSet, anchor_idx, bm, k, batch: int, num_maps: int) -> np.ndarray:
    """Flat position of value ``k`` for anchors on map row ``bm``."""
    starts = np.asarray(_raw_layout(anchors, batch, num_maps))
    anchor_idx = np.asarray(anchor_idx)
    scale = anchors.scale[anchor_idx]
    gh = np.asarray([g[0] for g in anchors.grids])[scale]
    gw = np.asarray([g[1] for g in anchors.grids])[scale]
    ch = anchors.anchor[anchor_idx] * VALUES_PER_ANCHOR + k
    chans = anchors.sizes.shape[1] * VALUES_PER_ANCHOR
    return starts[scale] + ((np.asarray(bm) * chans + ch) * gh + anchors.gy[anchor_idx]) * gw + anchors.gx[anchor_idx]


def build_targets(
    annotations: Sequence[Sequence],
    category_ids: Sequence[int],
    anchors: AnchorSet,
    pos_thr: float = 0.7,
    neg_thr: float = 0.3,
    ignores: Sequence[Sequence] | None = None,
) -> BatchTargets:
    """Targets for a batch whose queries share one ordered category list.

    annotations[b] is a list of BoxAnnotation for query b (already in the
    query's pixel frame). Boxes of categories outside ``category_ids`` are
    treated like ignore regions.
    """
    batch = len(annotations)
    m = len(category_ids)
    col = {c: j for j, c in enumerate(category_ids)}
    parts = {k: [] for k in ("loc_index", "loc_target", "loc_weight", "obj_index", "cls_index", "cls_true", "pos_weight", "neg_index", "neg_weight")}
    n_pos_total = n_neg_total = 0
    for b, anns in enumerate(annotations):
        active = [a for a in anns if a.category_id in col]
        other = [a for a in anns if a.category_id not in col]
        if ignores is not None:
            other = other + list(ignores[b])
        gt = np.array([[a.cx, a.cy, a.w, a.h] for a in active], dtype=np.float64).reshape(-1, 4)
        ig = np.array([[a.cx, a.cy, a.w, a.h] for a in other], dtype=np.float64).reshape(-1, 4)
        match = match_anchors(gt, anchors, pos_thr, neg_thr, ignore_boxes=ig)
        pos = match.positive
        # each map is background wherever no box of its own category comes close;
        # anchors positive for any box stay out of every other map's objectness
        is_pos = np.zeros(len(anchors), dtype=bool)
        is_pos[pos] = True
        cats = np.array([a.category_id for a in active], dtype=np.int64)
        neg_per_map = []
        for c in category_ids:
            own = match_anchors(gt[cats == c], anchors, pos_thr, neg_thr, ignore_boxes=ig)
            neg_per_map.append(np.nonzero((own.labels == NEGATIVE) & ~is_pos)[0])
        n_neg = sum(len(x) for x in neg_per_map)
        n_pos_total += len(pos)
        n_neg_total += n_neg
        if len(pos):
            g = match.labels[pos]
            cat_col = np.array([col[active[i].category_id] for i in g])
            bm = b * m + cat_col
            # box regression only where the decoded centre can reach the target
            own = responsible(gt[g], anchors, pos)
            lp, lg = pos[own], g[own]
            parts["loc_index"].append(np.stack([raw_index(anchors, lp, bm[own], k, batch, m) for k in range(4)], axis=1))
            parts["loc_target"].append(
                encode_targets(
                    gt[lg],
                    np.stack([anchors.w[lp], anchors.h[lp]], axis=1),
                    np.stack([anchors.gx[lp], anchors.gy[lp]], axis=1),
                    anchors.stride[lp],
                    eps=LOC_TARGET_EPS,
                )
            )
            parts["loc_weight"].append(np.full(len(lp), 1.0 / (batch * max(1, len(lp)))))
            parts["obj_index"].append(raw_index(anchors, pos, bm, 4, batch, m))
            parts["cls_index"].append(np.stack([raw_index(anchors, pos, b * m + j, 5, batch, m) for j in range(m)], axis=1))
            parts["cls_true"].append(cat_col)
            parts["pos_weight"].append(np.full(len(pos), 1.0 / (batch * len(pos))))
        if n_neg:
            idx = np.concatenate([raw_index(anchors, neg, b * m + j, 4, batch, m) for j, neg in enumerate(neg_per_map)])
            parts["neg_index"].append(idx)
            parts["neg_weight"].append(np.full(len(idx), 1.0 / (batch * len(idx))))

    def cat(key, shape):
        return np.concatenate(parts[key]) if parts[key] else np.zeros(shape)

    return BatchTargets(
        loc_index=cat("loc_index", (0, 4)).astype(np.int64),
        loc_target=cat("loc_target", (0, 4)),
        loc_weight=cat("loc_weight", (0,)),
        obj_index=cat("obj_index", (0,)).astype(np.int64),
        cls_index=cat("cls_index", (0, m)).astype(np.int64),
        cls_true=cat("cls_true", (0,)).astype(np.int64),
        pos_weight=cat("pos_weight", (0,)),
        neg_index=cat("neg_index", (0,)).astype(np.int64),
        neg_weight=cat("neg_weight", (0,)),
        n_pos=n_pos_total,
        n_neg=n_neg_total,
    )


def flatten_raw(raw: Sequence[Tensor]) -> Tensor:
    return ops.concat([ops.reshape(r, (-1,)) for r in raw], axis=0)


def total_loss(raw: Sequence[Tensor], targets: BatchTargets, w_obj: float = 1.0, w_noobj: float = 0.5) -> LossBreakdown:
    """Batch-mean of per-episode losses: loc + w_obj*obj + w_noobj*noobj + cls."""
    flat = flatten_raw(raw)
    dt = flat.dtype
    pw = targets.pos_weight.astype(dt)
    lw = targets.loc_weight.astype(dt)
    loc = loc_loss(ops.gather(flat, targets.loc_index), targets.loc_target, lw) if len(lw) else Tensor(np.zeros((), dt))
    lobj, lnoobj, _ = obj_loss(
        ops.gather(flat, targets.obj_index),
        ops.gather(flat, targets.neg_index),
        w_obj,
        w_noobj,
        pos_weights=pw,
        neg_weights=targets.neg_weight.astype(dt),
    )
    lcls = cls_loss(ops.gather(flat, targets.cls_index), targets.cls_true, pw) if len(pw) else Tensor(np.zeros((), dt))
    total = ops.add(ops.add(ops.add(loc, ops.mul(lobj, w_obj)), ops.mul(lnoobj, w_noobj)), lcls)
    return LossBreakdown(loc, lobj, lnoobj, lcls, total, targets.n_pos, targets.n_neg)


def decode_roundtrip_check(n: int = 1000, seed: int = 0) -> float:
    """Worst relative error of decode(encode(g)) over random boxes (diagnostic helper)."""
    rng = np.random.default_rng(seed)
    stride = rng.choice(STRIDES, size=n).astype(np.float64)
    cell = rng.integers(0, 4, size=(n, 2)).astype(np.float64)
    frac = rng.uniform(0.01, 0.99, size=(n, 2))
    anchor = rng.uniform(2, 64, size=(n, 2))
    wh = anchor * np.exp(rng.uniform(-2, 2, size=(n, 2)))
    gt = np.concatenate([(cell + frac) * stride[:, None], wh], axis=1)
    t = encode_targets(gt, anchor, cell, stride)
    dec = np.stack(
        [
            stride * (1 / (1 + np.exp(-t[:, 0])) + cell[:, 0]),
            stride * (1 / (1 + np.exp(-t[:, 1])) + cell[:, 1]),
            anchor[:, 0] * np.exp(t[:, 2]),
            anchor[:, 1] * np.exp(t[:, 3]),
        ],
        axis=1,
    )
    return float(np.max(np.abs(dec - gt) / np.abs(gt)))

