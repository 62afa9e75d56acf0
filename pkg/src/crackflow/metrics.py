"""Edge-map evaluation: pixel-exact confusion counts, ODS/OIS, PR curves.

Matching is zero tolerance: a predicted pixel counts only if the very
same pixel is labeled. Thresholds run over the fixed grid 0.01..0.99.
ODS pools confusion counts over the whole dataset and picks the best
shared threshold; OIS lets every frame pick its own best threshold and
averages. A frame with empty ground truth and nothing predicted above
threshold counts as perfect, so no-crack frames reward a quiet model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

THRESHOLDS = tuple(i / 100.0 for i in range(1, 100))


@dataclass
class PRPoint:
    threshold: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int

    @property
    def f1(self) -> float:
        return _f_measure(self.precision, self.recall)


@dataclass
class EvalReport:
    ods_f1: float
    ods_threshold: float
    ois_f1: float
    per_frame: list  # best F-1 per frame
    curve: list  # PRPoint per grid threshold, pooled


def _as_prob(pred) -> np.ndarray:
    arr = np.asarray(pred, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"probability map must be 2-D, got shape {arr.shape}")
    return arr


def _as_mask(gt) -> np.ndarray:
    arr = np.asarray(gt)
    if arr.ndim != 2:
        raise ValueError(f"ground truth must be 2-D, got shape {arr.shape}")
    return arr != 0


def _f_measure(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def _prf(tp: int, fp: int, fn: int):
    tp, fp, fn = int(tp), int(fp), int(fn)
    p = 1.0 if tp + fp == 0 else tp / (tp + fp)
    r = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return p, r, _f_measure(p, r)


def confusion_at_threshold(pred, gt, t: float):
    """(TP, FP, FN) for prediction >= t against a binary map, pixel exact."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {t}")
    prob = _as_prob(pred)
    mask = _as_mask(gt)
    if prob.shape != mask.shape:
        raise ValueError(f"prediction {prob.shape} does not match "
                         f"ground truth {mask.shape}")
    hit = prob >= t
    tp = int(np.count_nonzero(hit & mask))
    fp = int(np.count_nonzero(hit & ~mask))
    fn = int(np.count_nonzero(~hit & mask))
    return tp, fp, fn


def _check_aligned(predictions, gts):
    if len(predictions) == 0:
        raise ValueError("need at least one frame")
    if len(predictions) != len(gts):
        raise ValueError(f"{len(predictions)} predictions vs "
                         f"{len(gts)} ground-truth maps")


def _counts_per_threshold(pred, gt):
    """(99, 3) int array of (TP, FP, FN) over the grid for one frame."""
    out = np.empty((len(THRESHOLDS), 3), dtype=np.int64)
    for k, t in enumerate(THRESHOLDS):
        out[k] = confusion_at_threshold(pred, gt, t)
    return out


def ods_f1(predictions, gts):
    """Best dataset-shared threshold: pooled counts, returns (F, t*)."""
    _check_aligned(predictions, gts)
    pooled = np.zeros((len(THRESHOLDS), 3), dtype=np.int64)
    for pred, gt in zip(predictions, gts):
        pooled += _counts_per_threshold(pred, gt)
    best_f, best_t = 0.0, THRESHOLDS[0]
    for k, t in enumerate(THRESHOLDS):
        f = _prf(*pooled[k])[2]
        if f > best_f:
            best_f, best_t = f, t
    return best_f, best_t


def per_frame_f1(predictions, gts):
    """Best-threshold F-1 of each frame, for scatter reporting."""
    _check_aligned(predictions, gts)
    out = []
    for pred, gt in zip(predictions, gts):
        counts = _counts_per_threshold(pred, gt)
        out.append(max(_prf(*row)[2] for row in counts))
    return out


def ois_f1(predictions, gts) -> float:
    """Mean of per-frame best-threshold F-1."""
    scores = per_frame_f1(predictions, gts)
    return float(sum(scores) / len(scores))


def pr_curve(predictions, gts):
    """Pooled PRPoint for every grid threshold."""
    _check_aligned(predictions, gts)
    pooled = np.zeros((len(THRESHOLDS), 3), dtype=np.int64)
    for pred, gt in zip(predictions, gts):
        pooled += _counts_per_threshold(pred, gt)
    points = []
    for k, t in enumerate(THRESHOLDS):
        tp, fp, fn = (int(c) for c in pooled[k])
        p, r, _ = _prf(tp, fp, fn)
        points.append(PRPoint(threshold=t, precision=p, recall=r,
                              tp=tp, fp=fp, fn=fn))
    return points


def evaluate(predictions, gts) -> EvalReport:
    f, t = ods_f1(predictions, gts)
    frames = per_frame_f1(predictions, gts)
    return EvalReport(ods_f1=f, ods_threshold=t,
                      ois_f1=float(sum(frames) / len(frames)),
                      per_frame=frames, curve=pr_curve(predictions, gts))


def format_report(report: EvalReport) -> str:
    lines = [
        f"ods_f1 = {report.ods_f1!r} at t = {report.ods_threshold:.2f}",
        f"ois_f1 = {report.ois_f1!r}",
        f"frames = {len(report.per_frame)}",
    ]
    for i, f in enumerate(report.per_frame):
        lines.append(f"frame {i}: best_f1 = {f!r}")
    return "\n".join(lines) + "\n"


def curve_csv(report: EvalReport) -> str:
    lines = ["t, precision, recall, f1"]
    for pt in report.curve:
        lines.append(f"{pt.threshold:.2f}, {pt.precision!r}, "
                     f"{pt.recall!r}, {pt.f1!r}")
    return "\n".join(lines) + "\n"
