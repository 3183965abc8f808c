"""Binary rasterisation of the ShapeWorld object categories.

Each renderer draws one filled shape of nominal side ``size`` centred at
``(cx, cy)`` onto a PIL "L" canvas. Outlines are given in unit coordinates
(roughly [-0.5, 0.5]) and then scaled, stretched and rotated.
"""

from __future__ import annotations

import math

import numpy as np
from PIL import Image, ImageDraw

CATEGORY_NAMES = (
    "circle",
    "square",
    "triangle",
    "cross",
    "diamond",
    "bar",
    "l_shape",
    "hexagon",
    "ring",
    "star",
    "h_shape",
)


def _regular(n: int, r: float = 0.5, phase: float = 0.0):
    return [(r * math.cos(phase + 2 * math.pi * k / n), r * math.sin(phase + 2 * math.pi * k / n)) for k in range(n)]


def _star(points: int = 5, outer: float = 0.5, inner: float = 0.2):
    out = []
    for k in range(2 * points):
        r = outer if k % 2 == 0 else inner
        a = -math.pi / 2 + math.pi * k / points
        out.append((r * math.cos(a), r * math.sin(a)))
    return out


_t = 1 / 6  # half arm thickness for cross/H outlines
OUTLINES = {
    "square": [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)],
    "triangle": [(0.0, -0.5), (0.5, 0.43), (-0.5, 0.43)],
    "cross": [
        (-_t, -0.5), (_t, -0.5), (_t, -_t), (0.5, -_t), (0.5, _t), (_t, _t),
        (_t, 0.5), (-_t, 0.5), (-_t, _t), (-0.5, _t), (-0.5, -_t), (-_t, -_t),
    ],
    "diamond": [(0.0, -0.5), (0.32, 0.0), (0.0, 0.5), (-0.32, 0.0)],
    "bar": [(-0.5, -0.14), (0.5, -0.14), (0.5, 0.14), (-0.5, 0.14)],
    "l_shape": [(-0.5, -0.5), (-0.1, -0.5), (-0.1, 0.1), (0.5, 0.1), (0.5, 0.5), (-0.5, 0.5)],
    "hexagon": _regular(6),
    "star": _star(),
    "h_shape": [
        (-0.5, -0.5), (-0.2, -0.5), (-0.2, -0.1), (0.2, -0.1), (0.2, -0.5), (0.5, -0.5),
        (0.5, 0.5), (0.2, 0.5), (0.2, 0.1), (-0.2, 0.1), (-0.2, 0.5), (-0.5, 0.5),
    ],
}

# maximum random rotation (degrees) around the canonical pose; None = free
ROTATION_RANGE = {
    "circle": 0.0,
    "ring": 0.0,
    "square": 15.0,
    "diamond": 15.0,
    "hexagon": 30.0,
    "triangle": None,
    "cross": 15.0,
    "star": None,
    "bar": 20.0,
    "l_shape": None,
    "h_shape": 15.0,
}


def render_shape(canvas: Image.Image, name: str, cx: float, cy: float, size: float, aspect: float, angle: float) -> None:
    """Draw shape ``name`` filled with 255 on ``canvas`` (mode "L")."""
    draw = ImageDraw.Draw(canvas)
    sx, sy = size * aspect, size / aspect
    if name in ("circle", "ring"):
        draw.ellipse([cx - sx / 2, cy - sy / 2, cx + sx / 2 - 1, cy + sy / 2 - 1], fill=255)
        if name == "ring":
            ix, iy = sx * 0.28, sy * 0.28
            draw.ellipse([cx - ix, cy - iy, cx + ix - 1, cy + iy - 1], fill=0)
        return
    ca, sa = math.cos(math.radians(angle)), math.sin(math.radians(angle))
    pts = []
    for ux, uy in OUTLINES[name]:
        x, y = ux * sx, uy * sy
        pts.append((cx + ca * x - sa * y, cy + sa * x + ca * y))
    draw.polygon(pts, fill=255)


def shape_mask(shape: tuple, name: str, cx: float, cy: float, size: float, aspect: float, angle: float) -> np.ndarray:
    h, w = shape
    canvas = Image.new("L", (w, h), 0)
    render_shape(canvas, name, cx, cy, size, aspect, angle)
    return np.asarray(canvas) > 0


def sample_angle(rng: np.random.Generator, name: str) -> float:
    spread = ROTATION_RANGE[name]
    if spread is None:
        return float(rng.uniform(0.0, 360.0))
    if name == "bar":
        return float(rng.choice([0.0, 90.0]) + rng.uniform(-spread, spread))
    return float(rng.uniform(-spread, spread)) if spread else 0.0
