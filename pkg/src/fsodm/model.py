"""Meta feature extractor, reweighting network, detection heads and box decoding.

Three scales are indexed 1..3 with strides 32, 16 and 8. Per-scale tensors
are kept in lists in that order.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .tensor import DimensionError, Parameter, Tensor, UsageError, default_dtype

STRIDES = (32, 16, 8)
# (w, h) pixels for 800x800 inputs, coarsest scale first
REFERENCE_ANCHORS = (
    ((116, 90), (156, 198), (373, 326)),
    ((30, 61), (62, 45), (59, 119)),
    ((10, 13), (16, 30), (33, 23)),
)
REFERENCE_SIZE = 800
VALUES_PER_ANCHOR = 6  # x, y, w, h, objectness, class score
HEAD_GAIN = 0.1  # keeps initial offsets near the anchor priors
OBJECTNESS_PRIOR = 0.01  # initial P_o, so early noobj terms do not swamp the positives

# Reweighting network layer table: (index, kind, arg). Conv filter counts are
# given at full width and scaled by ModelConfig.width_scale.
REWEIGHT_LAYERS = (
    (1, "conv", 32),
    (2, "maxpool", None),
    (3, "conv", 64),
    (4, "maxpool", None),
    (5, "conv", 128),
    (6, "maxpool", None),
    (7, "conv", 256),
    (8, "maxpool", None),
    (9, "conv", 256),
    (10, "globalmax", None),
    (11, "route", 8),
    (12, "conv", 512),
    (13, "maxpool", None),
    (14, "conv", 512),
    (15, "globalmax", None),
    (16, "route", 13),
    (17, "conv", 1024),
    (18, "maxpool", None),
    (19, "conv", 1024),
    (20, "globalmax", None),
)
# GlobalMax tap -> scale it reweights (matched by channel count)
REWEIGHT_TAPS = {20: 0, 15: 1, 10: 2}


def scaled_reference_anchors(image_size: int) -> tuple:
    f = image_size / REFERENCE_SIZE
    return tuple(tuple((int(math.floor(w * f + 0.5)), int(math.floor(h * f + 0.5))) for w, h in s) for s in REFERENCE_ANCHORS)


@dataclass
class ModelConfig:
    image_size: int = 128
    width_scale: float = 0.25
    num_categories: int = 8
    anchors_per_scale: int = 3
    anchor_sizes: Optional[tuple] = None
    reweight_size: int = 128
    res_blocks: int = 2

    def __post_init__(self):
        if self.anchor_sizes is None:
            self.anchor_sizes = scaled_reference_anchors(self.image_size)
        self.anchor_sizes = tuple(tuple(tuple(float(v) for v in a) for a in s) for s in self.anchor_sizes)
        if len(self.anchor_sizes) != 3 or any(len(s) != self.anchors_per_scale for s in self.anchor_sizes):
            raise ValueError("anchor_sizes must hold anchors_per_scale (w, h) pairs for each of 3 scales")
        if self.image_size % 32:
            raise ValueError(f"image_size {self.image_size} not divisible by 32")
        if self.reweight_size % 64:
            raise ValueError(f"reweight_size {self.reweight_size} not divisible by 64")

    @property
    def strides(self) -> tuple:
        return STRIDES

    def width(self, full: int) -> int:
        return max(1, int(round(self.width_scale * full)))

    @property
    def feature_channels(self) -> tuple:
        return tuple(self.width(c) for c in (1024, 512, 256))

    @property
    def backbone_channels(self) -> tuple:
        return tuple(self.width(c) for c in (32, 64, 128, 256, 512, 1024))

    @property
    def head_channels(self) -> int:
        return self.anchors_per_scale * VALUES_PER_ANCHOR

    def anchors_for(self, image_size: int) -> np.ndarray:
        """Anchor (w, h) table [3, A, 2] rescaled to ``image_size``."""
        return np.asarray(self.anchor_sizes, dtype=np.float64) * (image_size / self.image_size)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["anchor_sizes"] = [[list(a) for a in s] for s in self.anchor_sizes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _kaiming_uniform(rng: np.random.Generator, shape, slope: float = ops.LEAKY_SLOPE) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    gain = math.sqrt(2.0 / (1 + slope**2))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class FSODM:
    """Parameter container plus the three sub-networks.

    Parameters live in ``self.params`` (insertion-ordered, unique names).
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: Dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        self._build(rng)

    # -- construction -----------------------------------------------------

    def _conv(self, rng, name: str, cin: int, cout: int, k: int, gain: float = 1.0) -> None:
        dt = default_dtype()
        weight = _kaiming_uniform(rng, (cout, cin, k, k)) * gain
        self.params[f"{name}.weight"] = Parameter(weight.astype(dt), f"{name}.weight")
        self.params[f"{name}.bias"] = Parameter(np.zeros(cout, dtype=dt), f"{name}.bias")

    def _build(self, rng) -> None:
        cfg = self.config
        w = cfg.backbone_channels
        self._conv(rng, "extractor.stem", 3, w[0], 3)
        for s in range(1, 6):
            self._conv(rng, f"extractor.stage{s}.down", w[s - 1], w[s], 3)
            for r in range(cfg.res_blocks):
                self._conv(rng, f"extractor.stage{s}.res{r}.conv1", w[s], w[s] // 2 or 1, 1)
                # residual branches start as identity; without normalisation
                # the stacked blocks otherwise blow up activations at init
                self._conv(rng, f"extractor.stage{s}.res{r}.conv2", w[s] // 2 or 1, w[s], 3, gain=0.0)
        f1, f2, f3 = cfg.feature_channels
        self._conv(rng, "extractor.fpn.top", w[5], f1, 3)
        self._conv(rng, "extractor.fpn.lateral1", f1, f2 // 2, 1)
        self._conv(rng, "extractor.fpn.fuse2", f2 // 2 + w[4], f2, 3)
        self._conv(rng, "extractor.fpn.lateral2", f2, f3 // 2, 1)
        self._conv(rng, "extractor.fpn.fuse3", f3 // 2 + w[3], f3, 3)

        channels = {0: 4}
        prev = 0
        for idx, kind, arg in REWEIGHT_LAYERS:
            if kind == "conv":
                cout = cfg.width(arg)
                self._conv(rng, f"reweight.layer{idx}", channels[prev], cout, 3)
                channels[idx] = cout
            elif kind == "route":
                channels[idx] = channels[arg]
            else:
                channels[idx] = channels[prev]
            prev = idx
        for i, c in enumerate(cfg.feature_channels):
            tap = [t for t, s in REWEIGHT_TAPS.items() if s == i][0]
            if channels[tap] != c:
                raise DimensionError(
                    f"reweighting tap {tap} width {channels[tap]} != scale-{i + 1} feature channels {c}"
                )
            self._conv(rng, f"head.scale{i + 1}", c, cfg.head_channels, 1, gain=HEAD_GAIN)
            bias = self.params[f"head.scale{i + 1}.bias"].data
            bias[4::VALUES_PER_ANCHOR] = -math.log((1 - OBJECTNESS_PRIOR) / OBJECTNESS_PRIOR)

    # -- parameter access -------------------------------------------------

    def parameters(self, prefix: str = "") -> List[Parameter]:
        return [p for n, p in self.params.items() if n.startswith(prefix)]

    def astype(self, dtype) -> "FSODM":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.velocity = None
        return self

    def _cba(self, x: Tensor, name: str, stride: int = 1) -> Tensor:
        wgt = self.params[f"{name}.weight"]
        pad = wgt.shape[-1] // 2
        return ops.leaky_relu(ops.conv2d(x, wgt, self.params[f"{name}.bias"], stride=stride, padding=pad))

    # -- networks ---------------------------------------------------------

    def extract(self, images: Tensor) -> List[Tensor]:
        """Query images [B,3,H,W] -> meta features at strides 32, 16, 8."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"extract: expected [B,3,H,W], got {images.shape}")
        h, w = images.shape[2:]
        if h % 32 or w % 32:
            raise DimensionError(f"extract: image size {h}x{w} not divisible by 32")
        x = self._cba(images, "extractor.stem")
        taps = {}
        for s in range(1, 6):
            x = self._cba(x, f"extractor.stage{s}.down", stride=2)
            for r in range(self.config.res_blocks):
                y = self._cba(x, f"extractor.stage{s}.res{r}.conv1")
                x = x + self._cba(y, f"extractor.stage{s}.res{r}.conv2")
            taps[s] = x
        f1 = self._cba(taps[5], "extractor.fpn.top")
        up = ops.upsample_nearest2x(self._cba(f1, "extractor.fpn.lateral1"))
        f2 = self._cba(ops.concat_channels(up, taps[4]), "extractor.fpn.fuse2")
        up = ops.upsample_nearest2x(self._cba(f2, "extractor.fpn.lateral2"))
        f3 = self._cba(ops.concat_channels(up, taps[3]), "extractor.fpn.fuse3")
        return [f1, f2, f3]

    def reweighting(self, supports: Tensor, capture: Optional[dict] = None) -> List[Tensor]:
        """Support image + mask stacks [M,4,S,S] -> vectors [M, C_i] per scale.

        ``capture``, when given, receives ``{("in"|"out", layer_index): Tensor}``.
        """
        if supports.ndim != 4 or supports.shape[1] != 4:
            raise UsageError(
                f"reweighting expects RGB + mask as 4 channels [M,4,S,S], got {supports.shape}"
            )
        size = self.config.reweight_size
        if supports.shape[2:] != (size, size):
            raise DimensionError(f"reweighting: support size {supports.shape[2:]} != configured {size}x{size}")
        outputs = {0: supports}
        vectors: List[Optional[Tensor]] = [None, None, None]
        prev = 0
        for idx, kind, arg in REWEIGHT_LAYERS:
            x = outputs[arg] if kind == "route" else outputs[prev]
            if kind == "conv":
                y = self._cba(x, f"reweight.layer{idx}")
            elif kind == "maxpool":
                y = ops.maxpool2d(x, 2, 2)
            elif kind == "globalmax":
                y = ops.global_maxpool(x)
                vectors[REWEIGHT_TAPS[idx]] = y
            else:
                y = x
            if capture is not None:
                capture[("in", idx)] = x
                capture[("out", idx)] = y
            outputs[idx] = y
            prev = idx
        return vectors

    def predict_raw(self, maps: Sequence[Tensor]) -> List[Tensor]:
        """Reweighted maps [B*M, C_i, H_i, W_i] -> raw outputs [B*M, A*6, H_i, W_i]."""
        out = []
        for i, m in enumerate(maps):
            out.append(ops.conv2d(m, self.params[f"head.scale{i + 1}.weight"], self.params[f"head.scale{i + 1}.bias"]))
        return out

    def forward(self, images: Tensor, supports: Tensor) -> List[Tensor]:
        feats = self.extract(images)
        vectors = self.reweighting(supports)
        return self.predict_raw(reweight(feats, vectors))

    def forward_with_vectors(self, images: Tensor, vectors: Sequence[Tensor]) -> List[Tensor]:
        return self.predict_raw(reweight(self.extract(images), vectors))


def reweight(features: Sequence[Tensor], vectors: Sequence[Tensor]) -> List[Tensor]:
    """Channel-wise recalibration of each scale's features by each category vector.

    features[i]: [B, C_i, H, W]; vectors[i]: [M, C_i] -> [B*M, C_i, H, W]
    with row b*M + m holding category m's map for query b.
    """
    if len(features) != len(vectors):
        raise DimensionError("reweight: feature and vector scale counts differ")
    out = []
    for i, (f, v) in enumerate(zip(features, vectors)):
        if v.ndim != 2 or v.shape[1] != f.shape[1]:
            raise DimensionError(f"reweight: scale {i + 1} vectors {v.shape} vs features {f.shape}")
        out.append(ops.channelwise_scale(f, v))
    return out


# ---------------------------------------------------------------------------
# decoding (numpy, no autodiff)


def _sigmoid(x):
    return ops._sigmoid_np(np.asarray(x, dtype=np.float64))


def grid_offsets(h: int, w: int):
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return gx, gy


def decode_boxes(raw: Sequence[np.ndarray], config: ModelConfig, image_size: int, num_categories: int) -> List[dict]:
    """Decode raw head outputs per scale.

    raw[i] is [B*M, A*6, H, W]. Returns per scale a dict of float64 arrays
    shaped [B, M, A, H, W]: ``cx, cy, w, h, objectness, class_logit``.
    """
    anchors = config.anchors_for(image_size)
    out = []
    for i, r in enumerate(raw):
        r = np.asarray(r, dtype=np.float64)
        bm, ch, h, w = r.shape
        a = config.anchors_per_scale
        if ch != a * VALUES_PER_ANCHOR or bm % num_categories:
            raise DimensionError(f"decode_boxes: scale {i + 1} raw shape {r.shape} incompatible")
        stride = image_size / h
        r = r.reshape(bm // num_categories, num_categories, a, VALUES_PER_ANCHOR, h, w)
        gx, gy = grid_offsets(h, w)
        aw = anchors[i, :, 0][None, None, :, None, None]
        ah = anchors[i, :, 1][None, None, :, None, None]
        out.append(
            {
                "cx": stride * (_sigmoid(r[:, :, :, 0]) + gx),
                "cy": stride * (_sigmoid(r[:, :, :, 1]) + gy),
                "w": aw * np.exp(r[:, :, :, 2]),
                "h": ah * np.exp(r[:, :, :, 3]),
                "objectness": _sigmoid(r[:, :, :, 4]),
                "class_logit": r[:, :, :, 5],
            }
        )
    return out


def class_scores(logits: np.ndarray, num_categories: Optional[int] = None, axis: int = 1) -> np.ndarray:
    """Softmax of the class scores grouped across category maps along ``axis``."""
    logits = np.asarray(logits, dtype=np.float64)
    if num_categories is not None and logits.shape[axis] != num_categories:
        raise RuntimeError(f"class_scores: group size {logits.shape[axis]} != {num_categories}")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class Detection:
    cx: float
    cy: float
    w: float
    h: float
    category: int
    objectness: float
    class_probs: np.ndarray = field(repr=False)
    score: float

    @property
    def box(self) -> tuple:
        return (self.cx, self.cy, self.w, self.h)


def candidate_detections(raw: Sequence[np.ndarray], config: ModelConfig, image_size: int, num_categories: int) -> List[dict]:
    """Flatten decoded predictions to one candidate per (scale, cell, anchor) and query.

    The candidate takes the category with the highest class probability, and
    the box and objectness from that category's map. Returns one dict of
    arrays per query image.
    """
    decoded = decode_boxes(raw, config, image_size, num_categories)
    per_query = None
    for d in decoded:
        probs = class_scores(d["class_logit"], num_categories, axis=1)  # [B,M,A,H,W]
        best = probs.argmax(axis=1)  # [B,A,H,W]
        pick = lambda arr: np.take_along_axis(arr, best[:, None], axis=1)[:, 0]  # noqa: E731
        b = probs.shape[0]
        rows = {
            "box": np.stack([pick(d["cx"]), pick(d["cy"]), pick(d["w"]), pick(d["h"])], axis=-1).reshape(b, -1, 4),
            "objectness": pick(d["objectness"]).reshape(b, -1),
            "category": best.reshape(b, -1),
            "class_probs": np.moveaxis(probs, 1, -1).reshape(b, -1, num_categories),
        }
        if per_query is None:
            per_query = rows
        else:
            per_query = {k: np.concatenate([per_query[k], rows[k]], axis=1) for k in rows}
    out = []
    for q in range(per_query["box"].shape[0]):
        cand = {k: v[q] for k, v in per_query.items()}
        cand["score"] = cand["objectness"] * cand["class_probs"].max(axis=1)
        out.append(cand)
    return out
