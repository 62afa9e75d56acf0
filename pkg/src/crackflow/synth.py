"""Synthetic speckle sequences with analytically exact ground truth.

A speckle scene (white paint, random dark dots, one blur pass) is
rendered on a canvas larger than the output frame. Each frame applies
an analytic displacement field to the material: a constant integer
far-field drift plus a horizontal opening of width `opening` across a
crack path, active below the current tip. The opening is carried by a
flat-top cosine taper so nodes near the crack move by exactly half the
opening while faraway displacement differences stay far below the
labeling threshold. The deformed image is produced by inverting the
map per output pixel (fixed-point iteration); pixels that fall inside
the opened gap get a dark fill.

Ground truth is computed from the true displacement at the same node
grid and with the same marking rule the image-correlation labeler
uses, so for openings comfortably above the threshold the measured
labels must match exactly. The true dense flow field is kept per frame
for optional flow supervision.

Exactness notes (what makes labels reproducible from images): the
far-field is integer, the opening is an even integer split evenly
between the sides, the taper is exactly 1 within its plateau (wider
than the node gap around the path), and the taper decay is gentle
enough that off-crack node gaps never approach the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .dataio import FramePair
from .dic import (CrackEdgeMap, DisplacementField, SubsetConfig,
                  downsample_label_map, label_crack_edges)

VOID_GRAY = 25  # fill for pixels inside the opened gap


@dataclass
class SyntheticSpec:
    """Scene, crack, and motion parameters for one synthetic sequence."""

    size: int = 512
    seed: int = 0
    dot_coverage: float = 0.35
    dot_radius: tuple = (1.5, 3.0)
    blur_sigma: float = 1.0
    path: np.ndarray | None = None  # (K,2) of (x, y), else random per seed
    opening: float = 4.0  # even integer keeps near-crack shifts exact
    far_field: tuple = (1, 1)  # integer (tx, ty) applied everywhere
    tip_start: float | None = None  # tip y at frame 0; default near the bottom
    tip_rate: float = 2.0  # px per frame, crack grows upward (y decreases)
    tip_ys: tuple | None = None  # explicit per-frame override
    taper_plateau: float = 24.0
    taper_width: float = 420.0
    label_threshold: float = 0.5
    mm_per_px: float = 0.05
    fps: float = 10.0

    def __post_init__(self):
        if self.size < 128:
            raise ValueError("size must be at least 128")
        if self.opening < 0:
            raise ValueError("opening must be non-negative")
        if not (0 < self.taper_plateau < self.taper_width):
            raise ValueError("need 0 < taper_plateau < taper_width")
        if self.path is not None:
            self.path = np.asarray(self.path, dtype=np.float64)
            if self.path.ndim != 2 or self.path.shape[1] != 2:
                raise ValueError("path must be (K, 2) of (x, y)")
            if np.any(self.path[:, 0] < 0) or np.any(self.path[:, 0] >= self.size):
                raise ValueError("crack path leaves the image")
            if np.any(np.diff(self.path[:, 1]) <= 0):
                raise ValueError("path vertices must have increasing y")


@dataclass
class SyntheticFrame:
    pair: FramePair
    flow_u: np.ndarray  # true dense flow, reference coordinates
    flow_v: np.ndarray
    gt_full: CrackEdgeMap  # marks at source resolution
    tip_y: float


@dataclass
class SyntheticSequence:
    frames: list
    reference: np.ndarray
    path: np.ndarray
    spec: SyntheticSpec


def _render_speckle(rng: np.random.Generator, side: int, spec: SyntheticSpec):
    canvas = np.full((side, side), 255.0)
    r0, r1 = spec.dot_radius
    mean_area = np.pi * (r0 * r0 + r0 * r1 + r1 * r1) / 3.0
    n_dots = int(round(spec.dot_coverage * side * side / mean_area))
    cx = rng.uniform(0, side, n_dots)
    cy = rng.uniform(0, side, n_dots)
    rad = rng.uniform(r0, r1, n_dots)
    val = rng.uniform(0, 60, n_dots)
    for i in range(n_dots):
        r = rad[i]
        x0, x1 = int(max(0, np.floor(cx[i] - r))), int(min(side, np.ceil(cx[i] + r) + 1))
        y0, y1 = int(max(0, np.floor(cy[i] - r))), int(min(side, np.ceil(cy[i] + r) + 1))
        yy, xx = np.mgrid[y0:y1, x0:x1]
        mask = (yy - cy[i]) ** 2 + (xx - cx[i]) ** 2 <= r * r
        patch = canvas[y0:y1, x0:x1]
        patch[mask] = np.minimum(patch[mask], val[i])
    canvas = gaussian_filter(canvas, spec.blur_sigma)
    return np.clip(np.round(canvas), 0, 255).astype(np.uint8)


def _random_path(rng: np.random.Generator, spec: SyntheticSpec,
                 cfg: SubsetConfig) -> np.ndarray:
    """Polyline through node-gap midpoints: at every node row the crack
    crosses half a spacing away from the node columns, drifting at most
    one gap every other row."""
    m = cfg.margin
    xs = np.arange(m, spec.size - m, cfg.spacing)
    ys = np.arange(m, spec.size - m, cfg.spacing)
    j = len(xs) // 2 + int(rng.integers(-2, 3))
    lo, hi = 2, len(xs) - 4
    pts = []
    move = False
    for y in ys:
        pts.append((xs[j] + cfg.spacing / 2.0, float(y)))
        if move:
            j = int(np.clip(j + rng.integers(-1, 2), lo, hi))
        move = not move
    path = [(pts[0][0], 0.0)] + pts + [(pts[-1][0], float(spec.size - 1))]
    return np.array(path, dtype=np.float64)


def _taper(dist, spec: SyntheticSpec):
    p, w = spec.taper_plateau, spec.taper_width
    ramp = 0.5 * (1.0 + np.cos(np.pi * (dist - p) / (w - p)))
    return np.where(dist <= p, 1.0, np.where(dist >= w, 0.0, ramp))


def _field(spec: SyntheticSpec, path: np.ndarray, tip_y: float, px, py):
    """True displacement (u, v) at material coordinates (px, py)."""
    tx, ty = spec.far_field
    x_path = np.interp(py, path[:, 1], path[:, 0])
    dist = np.abs(px - x_path)
    side = np.where(px >= x_path, 1.0, -1.0)
    cracked = py >= tip_y
    u = tx + side * (spec.opening / 2.0) * _taper(dist, spec) * cracked
    v = np.broadcast_to(np.float64(ty), u.shape)
    return u, v


def _sample_bilinear(canvas: np.ndarray, py, px):
    h, w = canvas.shape
    x0 = np.clip(np.floor(px).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(py).astype(np.int64), 0, h - 2)
    fx = np.clip(px - x0, 0.0, 1.0)
    fy = np.clip(py - y0, 0.0, 1.0)
    c = canvas.astype(np.float64)
    top = c[y0, x0] * (1 - fx) + c[y0, x0 + 1] * fx
    bot = c[y0 + 1, x0] * (1 - fx) + c[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _render_frame(canvas, pad, spec, path, tip_y):
    s = spec.size
    qx, qy = np.meshgrid(np.arange(s, dtype=np.float64),
                         np.arange(s, dtype=np.float64))
    tx, ty = spec.far_field
    px, py = qx - tx, qy - ty
    for _ in range(4):
        u, v = _field(spec, path, tip_y, px, py)
        px, py = qx - u, qy - v
    u, v = _field(spec, path, tip_y, px, py)
    residual = np.maximum(np.abs(px + u - qx), np.abs(py + v - qy))
    valid = residual < 0.5  # anything worse sits inside the opened gap
    sampled = _sample_bilinear(canvas, py + pad, px + pad)
    out = np.where(valid, sampled, float(VOID_GRAY))
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def _true_field_at_nodes(spec, path, tip_y, cfg: SubsetConfig) -> DisplacementField:
    m = cfg.margin
    ys = np.arange(m, spec.size - m, cfg.spacing)
    xs = np.arange(m, spec.size - m, cfg.spacing)
    gx, gy = np.meshgrid(xs.astype(np.float64), ys.astype(np.float64))
    u, v = _field(spec, path, tip_y, gx, gy)
    shape = (len(ys), len(xs))
    return DisplacementField(xs=xs, ys=ys, u=u.astype(np.float32),
                             v=np.ascontiguousarray(v, dtype=np.float32),
                             quality=np.ones(shape, dtype=np.float32),
                             valid=np.ones(shape, dtype=bool), spacing=cfg.spacing)


def default_tip_start(spec: SyntheticSpec, cfg: SubsetConfig) -> float:
    ys = np.arange(cfg.margin, spec.size - cfg.margin, cfg.spacing)
    return float(ys[-3]) + cfg.spacing / 2.0


def generate(spec: SyntheticSpec, frames: int,
             subset_cfg: SubsetConfig | None = None,
             gt_size: int | None = None) -> SyntheticSequence:
    """Render a reference plus `frames` deformed images with exact labels.

    gt_size is the downsampled ground-truth resolution (default size/8,
    matching the network's output stride).
    """
    if frames < 1:
        raise ValueError("need at least one frame")
    cfg = subset_cfg if subset_cfg is not None else SubsetConfig()
    gt_size = gt_size if gt_size is not None else spec.size // 8
    root = np.random.SeedSequence(spec.seed)
    rng_speckle, rng_path = (np.random.default_rng(s) for s in root.spawn(2))

    tx, ty = spec.far_field
    pad = int(np.ceil(max(abs(tx), abs(ty)) + spec.opening / 2.0)) + 8
    canvas = _render_speckle(rng_speckle, spec.size + 2 * pad, spec)
    reference = canvas[pad : pad + spec.size, pad : pad + spec.size].copy()

    path = spec.path if spec.path is not None else _random_path(rng_path, spec, cfg)
    if spec.tip_ys is not None:
        if len(spec.tip_ys) != frames:
            raise ValueError(f"tip_ys has {len(spec.tip_ys)} entries "
                             f"for {frames} frames")
        tip_ys = [float(t) for t in spec.tip_ys]
    else:
        start = spec.tip_start if spec.tip_start is not None \
            else default_tip_start(spec, cfg)
        tip_ys = [start - spec.tip_rate * t for t in range(frames)]

    ref_x, ref_y = np.meshgrid(np.arange(spec.size, dtype=np.float64),
                               np.arange(spec.size, dtype=np.float64))
    out = []
    for t, tip_y in enumerate(tip_ys):
        deformed = _render_frame(canvas, pad, spec, path, tip_y)
        fu, fv = _field(spec, path, tip_y, ref_x, ref_y)
        true_nodes = _true_field_at_nodes(spec, path, tip_y, cfg)
        gt_full = label_crack_edges(true_nodes, (spec.size, spec.size),
                                    threshold=spec.label_threshold,
                                    mm_per_px=spec.mm_per_px)
        gt = downsample_label_map(gt_full, target=gt_size)
        pair = FramePair(reference=reference, deformed=deformed, gt=gt,
                         timestamp=t / spec.fps, mm_per_px=spec.mm_per_px)
        out.append(SyntheticFrame(pair=pair, flow_u=fu.astype(np.float32),
                                  flow_v=np.ascontiguousarray(fv, dtype=np.float32),
                                  gt_full=gt_full, tip_y=tip_y))
    return SyntheticSequence(frames=out, reference=reference, path=path, spec=spec)
