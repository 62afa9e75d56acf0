"""Crack-front tracking and propagation speed over a frame sequence.

Edge marks live on a sparse measurement grid, so the crack appears as
a chain of dots one or two map pixels apart. Front extraction bridges
those gaps with a small dilation before connected-component labeling,
keeps the component rooted at the notch side, and reads the extremal
pixel along the growth axis. Speed averages interval speeds weighted
by the Euclidean path length between successive fronts, so a tortuous
crack is measured along its path rather than along the axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

AXES = ("up", "down", "left", "right")


def extract_front(edge_map, axis: str, link_radius: int = 2):
    """(row, col) of the crack front, or None while there is no crack.

    The rooted component is the one reaching furthest toward the notch
    side (the side the growth axis points away from); ties fall to the
    larger component, then to scan order. The front is that component's
    extremal pixel along the axis; with several, the cross coordinate
    is their rounded mean.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    data = np.asarray(edge_map) != 0
    if data.ndim != 2:
        raise ValueError(f"edge map must be 2-D, got shape {data.shape}")
    if not np.any(data):
        return None
    ax = 0 if axis in ("up", "down") else 1
    growth_to_min = axis in ("up", "left")

    bridged = ndimage.binary_dilation(data, structure=np.ones((3, 3), bool),
                                      iterations=link_radius)
    labels, count = ndimage.label(bridged, structure=np.ones((3, 3), np.int32))
    coords = np.nonzero(data)
    comp = labels[coords]
    along = coords[ax]
    best = None
    for c in range(1, count + 1):
        sel = comp == c
        if not np.any(sel):
            continue
        notch_reach = along[sel].max() if growth_to_min else -along[sel].min()
        key = (notch_reach, int(np.count_nonzero(sel)), -c)
        if best is None or key > best[0]:
            best = (key, sel)
    sel = best[1]
    a = along[sel]
    tip = a.min() if growth_to_min else a.max()
    cross = coords[1 - ax][sel][a == tip]
    tip_cross = int(round(float(np.mean(cross))))
    return (int(tip), tip_cross) if ax == 0 else (tip_cross, int(tip))


@dataclass
class CrackFrontTrace:
    """Per-frame front positions for the frames where a front exists."""

    frames: list
    points: list  # (row, col) per kept frame
    timestamps: list  # seconds
    mm_per_px: float
    axis: str

    def __post_init__(self):
        if not (len(self.frames) == len(self.points) == len(self.timestamps)):
            raise ValueError("frames, points, timestamps must align")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError("timestamps must be strictly increasing")
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {self.axis!r}")
        if self.mm_per_px <= 0:
            raise ValueError("mm_per_px must be positive")
        if any(r < 0 or c < 0 for r, c in self.points):
            raise ValueError("front positions must lie inside the map")

    def axis_positions(self):
        ax = 0 if self.axis in ("up", "down") else 1
        return [p[ax] for p in self.points]


def build_trace(maps, timestamps, axis: str, link_radius: int = 2,
                mm_per_px: float | None = None) -> CrackFrontTrace:
    """Extract fronts over a sequence, skipping frames with no crack yet."""
    if len(maps) != len(timestamps):
        raise ValueError(f"{len(maps)} maps vs {len(timestamps)} timestamps")
    if mm_per_px is None:
        scales = {getattr(m, "mm_per_px", None) for m in maps}
        scales.discard(None)
        if len(scales) != 1:
            raise ValueError(f"maps carry inconsistent mm_per_px {sorted(scales)}; "
                             f"pass mm_per_px explicitly")
        mm_per_px = scales.pop()
    frames, points, times = [], [], []
    for i, (m, t) in enumerate(zip(maps, timestamps)):
        front = extract_front(m, axis, link_radius)
        if front is None:
            continue
        frames.append(i)
        points.append(front)
        times.append(float(t))
    return CrackFrontTrace(frames=frames, points=points, timestamps=times,
                           mm_per_px=mm_per_px, axis=axis)


@dataclass
class SpeedReport:
    mean_speed_mm_s: float
    interval_speeds_mm_s: list
    path_length_mm: float
    regressions: list = field(default_factory=list)  # frames moving backward
    trace: CrackFrontTrace | None = None


def compute_speed(trace: CrackFrontTrace, tolerance_px: float = 2.0) -> SpeedReport:
    """Path-length-weighted mean of interval speeds, in mm/s.

    An interval whose front moves against the growth direction by more
    than tolerance_px is flagged (cracks do not heal); it still enters
    the average since the measurement itself may be the culprit.
    """
    if len(trace.points) < 2:
        raise ValueError(f"need at least 2 frames with fronts, "
                         f"got {len(trace.points)}")
    sign = -1.0 if trace.axis in ("up", "left") else 1.0
    along = trace.axis_positions()
    speeds, lengths, regressions = [], [], []
    for i in range(len(trace.points) - 1):
        (r0, c0), (r1, c1) = trace.points[i], trace.points[i + 1]
        dist_mm = float(np.hypot(r1 - r0, c1 - c0)) * trace.mm_per_px
        dt = trace.timestamps[i + 1] - trace.timestamps[i]
        speeds.append(dist_mm / dt)
        lengths.append(dist_mm)
        if sign * (along[i + 1] - along[i]) < -tolerance_px:
            regressions.append(trace.frames[i + 1])
    total = sum(lengths)
    mean = (sum(v * l for v, l in zip(speeds, lengths)) / total
            if total > 0 else 0.0)
    return SpeedReport(mean_speed_mm_s=mean, interval_speeds_mm_s=speeds,
                       path_length_mm=total, regressions=regressions,
                       trace=trace)


def format_speed_report(report: SpeedReport) -> str:
    lines = ["frame, t_s, front_px, interval_mm_s"]
    trace = report.trace
    if trace is not None:
        along = trace.axis_positions()
        for i, (frame, t) in enumerate(zip(trace.frames, trace.timestamps)):
            v = "-" if i == 0 else repr(report.interval_speeds_mm_s[i - 1])
            lines.append(f"{frame}, {t!r}, {along[i]}, {v}")
    lines.append(f"mean_speed_mm_s = {report.mean_speed_mm_s!r}")
    lines.append(f"path_length_mm = {report.path_length_mm!r}")
    lines.append("regressions = " + (",".join(str(f) for f in report.regressions)
                                     if report.regressions else "none"))
    return "\n".join(lines) + "\n"
