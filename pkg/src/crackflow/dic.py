"""Speckle image correlation and crack-edge ground-truth labeling.

A regular grid of correlation points is laid over the reference image.
For each node, the surrounding subset is matched against the deformed
image by zero-mean normalized cross-correlation over an integer search
window, optionally refined to subpixel precision with a per-axis
parabola fit through the correlation peak. Crack edges are then labeled
where the horizontal displacement jump between neighboring nodes
exceeds a threshold: both nodes of such a gap are mapped into deformed
image coordinates and marked.

Coordinates in public interfaces are (x, y); arrays are indexed [y, x].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError


@dataclass
class SubsetConfig:
    """Correlation grid geometry and matching options."""

    subset_size: int = 23
    spacing: int = 11
    search_radius: int = 8
    subpixel: bool = True

    def __post_init__(self):
        if self.subset_size < 3 or self.subset_size % 2 == 0:
            raise ValueError("subset_size must be odd and >= 3")
        if self.spacing < 1:
            raise ValueError("spacing must be >= 1")
        if self.search_radius < 1:
            raise ValueError("search_radius must be >= 1")

    @property
    def margin(self) -> int:
        # nodes must keep subset plus search window inside both images
        return self.subset_size // 2 + self.search_radius


@dataclass
class DisplacementField:
    """Per-node displacements on a regular grid.

    xs/ys are the node coordinates (strictly increasing), u/v/quality are
    (len(ys), len(xs)) grids, valid masks nodes whose subset carried
    enough texture to match. Invalid nodes hold zeros.
    """

    xs: np.ndarray
    ys: np.ndarray
    u: np.ndarray
    v: np.ndarray
    quality: np.ndarray
    valid: np.ndarray
    spacing: int

    def __post_init__(self):
        if np.any(np.diff(self.xs) <= 0) or np.any(np.diff(self.ys) <= 0):
            raise ValueError("grid coordinates must be strictly increasing")
        shape = (len(self.ys), len(self.xs))
        for name in ("u", "v", "quality", "valid"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} grid shape {getattr(self, name).shape} "
                                 f"does not match {shape}")


@dataclass
class CrackEdgeMap:
    """Binary H x W map, 1 marking crack edge pixels."""

    data: np.ndarray
    mm_per_px: float | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 2:
            raise ValueError(f"edge map must be 2-D, got shape {self.data.shape}")
        if not np.all((self.data == 0) | (self.data == 1)):
            raise ValueError("edge map values must be 0 or 1")

    def __array__(self, dtype=None, copy=None):
        return self.data.astype(dtype) if dtype is not None else self.data


def shape_function_map(point, center, u, v, ux=0.0, uy=0.0, vx=0.0, vy=0.0):
    """First-order subset mapping of a reference point into the deformed image."""
    xi, yj = point
    x0, y0 = center
    dx, dy = xi - x0, yj - y0
    return (xi + u + ux * dx + uy * dy,
            yj + v + vx * dx + vy * dy)


def _box_sums(img: np.ndarray, k: int) -> np.ndarray:
    """Sum of every k x k window, via an integral image: (H-k+1, W-k+1)."""
    ii = np.zeros((img.shape[0] + 1, img.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(img, axis=0), axis=1, out=ii[1:, 1:])
    return ii[k:, k:] - ii[:-k, k:] - ii[k:, :-k] + ii[:-k, :-k]


def _parabola_offset(s_m: float, s_0: float, s_p: float) -> float:
    """Vertex offset of the parabola through (-1,s_m), (0,s_0), (1,s_p)."""
    denom = s_m + s_p - 2.0 * s_0
    if denom >= 0:  # not concave, peak is flat or a plateau edge
        return 0.0
    return float(np.clip((s_m - s_p) / (2.0 * denom), -0.5, 0.5))


def _zncc_surface(template, windows_sum, windows_sq, deformed, y0, x0, cfg):
    """ZNCC of the template against every integer offset in the search window."""
    k, r = cfg.subset_size, cfg.search_radius
    hw = k // 2
    t0 = template - template.mean()
    t_var = float(np.einsum("ab,ab->", t0, t0))
    if t_var <= 0:
        return None  # flat subset carries no texture to match
    ty, tx = y0 - hw, x0 - hw  # template top-left
    cand = sliding_window_view(
        deformed[ty - r : ty + r + k, tx - r : tx + r + k], (k, k))
    num = np.einsum("yxab,ab->yx", cand, t0)
    s = windows_sum[ty - r : ty + r + 1, tx - r : tx + r + 1]
    ss = windows_sq[ty - r : ty + r + 1, tx - r : tx + r + 1]
    w_var = ss - s * s / (k * k)
    np.maximum(w_var, 0.0, out=w_var)  # clamp cancellation noise
    denom = np.sqrt(t_var * w_var)
    out = np.zeros_like(num)
    np.divide(num, denom, out=out, where=denom > 0)
    return out


def _refine(score: np.ndarray, cfg: SubsetConfig):
    """Integer argmax plus optional per-axis parabola refinement."""
    r = cfg.search_radius
    iy, ix = np.unravel_index(int(np.argmax(score)), score.shape)
    u, v = float(ix - r), float(iy - r)
    # a perfect correlation is already exact; refining it only adds noise
    if cfg.subpixel and score[iy, ix] < 1.0 - 1e-9:
        if 0 < ix < 2 * r:
            u += _parabola_offset(score[iy, ix - 1], score[iy, ix], score[iy, ix + 1])
        if 0 < iy < 2 * r:
            v += _parabola_offset(score[iy - 1, ix], score[iy, ix], score[iy + 1, ix])
    return u, v, float(score[iy, ix])


def match_subset(reference, deformed, center, cfg: SubsetConfig):
    """Match one subset; center is (x0, y0). Returns (u, v, quality) or
    None when the subset is flat (node invalid)."""
    reference = np.asarray(reference, dtype=np.float64)
    deformed = np.asarray(deformed, dtype=np.float64)
    x0, y0 = center
    m = cfg.margin
    h, w = reference.shape
    if not (m <= y0 < h - m and m <= x0 < w - m):
        raise DataError(f"node ({x0}, {y0}) too close to the border for "
                        f"subset {cfg.subset_size} + search {cfg.search_radius}")
    k = cfg.subset_size
    hw = k // 2
    template = reference[y0 - hw : y0 + hw + 1, x0 - hw : x0 + hw + 1]
    score = _zncc_surface(template, _box_sums(deformed, k),
                          _box_sums(deformed * deformed, k),
                          deformed, y0, x0, cfg)
    if score is None:
        return None
    return _refine(score, cfg)


def compute_displacement_field(reference, deformed,
                               cfg: SubsetConfig) -> DisplacementField:
    """Match every grid node; flat nodes come back masked invalid."""
    reference = np.asarray(reference, dtype=np.float64)
    deformed = np.asarray(deformed, dtype=np.float64)
    if reference.ndim != 2 or reference.shape != deformed.shape:
        raise DataError(f"image shapes differ or are not 2-D: "
                        f"{reference.shape} vs {deformed.shape}")
    h, w = reference.shape
    m = cfg.margin
    ys = np.arange(m, h - m, cfg.spacing)
    xs = np.arange(m, w - m, cfg.spacing)
    if len(ys) == 0 or len(xs) == 0:
        raise DataError(f"images {h}x{w} too small for one "
                        f"{cfg.subset_size}x{cfg.subset_size} subset with "
                        f"search radius {cfg.search_radius}")
    k, hw = cfg.subset_size, cfg.subset_size // 2
    win_sum = _box_sums(deformed, k)
    win_sq = _box_sums(deformed * deformed, k)
    u = np.zeros((len(ys), len(xs)), dtype=np.float32)
    v = np.zeros_like(u)
    quality = np.zeros_like(u)
    valid = np.zeros(u.shape, dtype=bool)
    for i, y0 in enumerate(ys):
        for j, x0 in enumerate(xs):
            template = reference[y0 - hw : y0 + hw + 1, x0 - hw : x0 + hw + 1]
            score = _zncc_surface(template, win_sum, win_sq, deformed, y0, x0, cfg)
            if score is None:
                continue
            uj, vj, q = _refine(score, cfg)
            u[i, j], v[i, j], quality[i, j] = uj, vj, q
            valid[i, j] = True
    return DisplacementField(xs=xs, ys=ys, u=u, v=v, quality=quality,
                             valid=valid, spacing=cfg.spacing)


def displacement_gradient(fld: DisplacementField):
    """Horizontal-opening finite difference per gap.

    Returns (ux, gap_valid), both (n_rows, n_cols - 1); ux[i, j] is
    u[i, j+1] - u[i, j], attributed to the gap between nodes j and j+1.
    Gaps touching an invalid node are masked.
    """
    if fld.u.shape[1] < 2:
        raise DataError("gradient needs at least two node columns")
    ux = fld.u[:, 1:] - fld.u[:, :-1]
    gap_valid = fld.valid[:, 1:] & fld.valid[:, :-1]
    return np.where(gap_valid, ux, 0.0).astype(np.float32), gap_valid


def label_crack_edges(fld: DisplacementField, image_shape, threshold: float = 0.5,
                      mm_per_px: float | None = None) -> CrackEdgeMap:
    """Mark both nodes of every gap whose opening jump exceeds threshold.

    Node positions are carried into deformed-image coordinates by their
    own measured displacement before rounding to pixels.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    h, w = image_shape
    ux, gap_valid = displacement_gradient(fld)
    out = np.zeros((h, w), dtype=np.uint8)
    rows, gaps = np.nonzero((ux > threshold) & gap_valid)
    for i, j in zip(rows, gaps):
        for jj in (j, j + 1):
            x = int(round(fld.xs[jj] + float(fld.u[i, jj])))
            y = int(round(fld.ys[i] + float(fld.v[i, jj])))
            if 0 <= y < h and 0 <= x < w:
                out[y, x] = 1
    return CrackEdgeMap(out, mm_per_px=mm_per_px)


def temporal_consistency_correct(maps, n: int = 3):
    """Remove one-frame flickers from a label sequence.

    A pixel set in a single frame and unset in all of the next n frames
    is cleared; clearing scans backward so a cleared frame can expose an
    earlier one-frame blip. A pixel unset in one frame but set in all n
    frames on both sides is then filled, in one simultaneous pass.
    Applying the correction twice changes nothing further.
    """
    if n < 1:
        raise ValueError("window must be >= 1")
    if len(maps) == 0:
        return []
    stack = np.stack([np.asarray(m.data if isinstance(m, CrackEdgeMap) else m)
                      for m in maps]).astype(bool)
    t_n = stack.shape[0]
    orig = stack.copy()
    work = stack.copy()
    never = np.zeros_like(work[0])
    # rule 1: single-frame labels with an all-unset full next-n window
    for t in range(t_n - 1 - n, -1, -1):
        single = work[t] & ~(orig[t - 1] if t > 0 else never)
        gone = ~np.any(work[t + 1 : t + 1 + n], axis=0)
        work[t] &= ~(single & gone)
    # rule 2: single-frame gaps flanked by n set frames on both sides
    filled = work.copy()
    for t in range(n, t_n - n):
        before = np.all(work[t - n : t], axis=0)
        after = np.all(work[t + 1 : t + 1 + n], axis=0)
        filled[t] |= before & after
    out = filled.astype(np.uint8)
    if isinstance(maps[0], CrackEdgeMap):
        return [CrackEdgeMap(out[t], mm_per_px=maps[t].mm_per_px)
                for t in range(t_n)]
    return [out[t] for t in range(t_n)]


def downsample_label_map(edge_map, target: int = 128) -> CrackEdgeMap:
    """Max-pool a label map down to target x target blocks.

    The source is center-cropped to the largest block multiple first; a
    block containing any edge pixel becomes 1.
    """
    mm = edge_map.mm_per_px if isinstance(edge_map, CrackEdgeMap) else None
    data = np.asarray(edge_map.data if isinstance(edge_map, CrackEdgeMap) else edge_map)
    h, w = data.shape
    by, bx = h // target, w // target
    if by < 1 or bx < 1:
        raise DataError(f"map {h}x{w} smaller than target {target}x{target}")
    y0 = (h - by * target) // 2
    x0 = (w - bx * target) // 2
    crop = data[y0 : y0 + by * target, x0 : x0 + bx * target]
    pooled = crop.reshape(target, by, target, bx).max(axis=(1, 3))
    scale = None if mm is None else mm * (by + bx) / 2
    return CrackEdgeMap(pooled.astype(np.uint8), mm_per_px=scale)


# ----------------------------------------------------------------------
# text export

_FIELD_HEADER = "# x0 y0 u v quality valid"


def field_to_text(fld: DisplacementField) -> str:
    """One row per node: x0 y0 u v quality valid."""
    lines = [f"# spacing={fld.spacing}", _FIELD_HEADER]
    for i, y0 in enumerate(fld.ys):
        for j, x0 in enumerate(fld.xs):
            lines.append(f"{x0} {y0} {float(fld.u[i, j])!r} {float(fld.v[i, j])!r} "
                         f"{float(fld.quality[i, j])!r} {int(fld.valid[i, j])}")
    return "\n".join(lines) + "\n"


def field_from_text(text: str) -> DisplacementField:
    spacing = None
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if "spacing=" in line:
                spacing = int(line.split("spacing=")[1])
            continue
        parts = line.split()
        if len(parts) != 6:
            raise DataError(f"bad displacement row: {line!r}")
        rows.append((int(parts[0]), int(parts[1]), float(parts[2]),
                     float(parts[3]), float(parts[4]), bool(int(parts[5]))))
    if not rows or spacing is None:
        raise DataError("displacement text missing rows or spacing header")
    xs = np.unique([r[0] for r in rows])
    ys = np.unique([r[1] for r in rows])
    shape = (len(ys), len(xs))
    if len(rows) != shape[0] * shape[1]:
        raise DataError("displacement text is not a full grid")
    xi = {x: j for j, x in enumerate(xs)}
    yi = {y: i for i, y in enumerate(ys)}
    u = np.zeros(shape, dtype=np.float32)
    v = np.zeros(shape, dtype=np.float32)
    quality = np.zeros(shape, dtype=np.float32)
    valid = np.zeros(shape, dtype=bool)
    for x0, y0, uu, vv, q, ok in rows:
        i, j = yi[y0], xi[x0]
        u[i, j], v[i, j], quality[i, j], valid[i, j] = uu, vv, q, ok
    return DisplacementField(xs=xs, ys=ys, u=u, v=v, quality=quality,
                             valid=valid, spacing=spacing)
