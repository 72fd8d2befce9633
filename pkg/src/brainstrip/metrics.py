"""Overlap metrics, average Hausdorff distance and report aggregation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

METRICS = ("dice", "jaccard", "ahd", "sens", "spec")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred, gt) -> Confusion:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return Confusion(tp, fp, pred.size - tp - fp - fn, fn)


def _ratio(num: int, den: int, what: str) -> float:
    # 0/0 only happens when both masks lack the class the metric is about
    if den == 0:
        if num == 0:
            return 1.0
        raise ZeroDivisionError(what)
    return num / den


def dice(c: Confusion) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "dice")


def jaccard(c: Confusion) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn, "jaccard")


def sens(c: Confusion) -> float:
    return _ratio(c.tp, c.tp + c.fn, "sensitivity")


def spec(c: Confusion) -> float:
    return _ratio(c.tn, c.tn + c.fp, "specificity")


def directed_average_distance(x, y) -> float:
    """Mean over foreground points of ``x`` of the distance to the nearest point of ``y``."""
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if not x.any() or not y.any():
        raise ValueError("average distance undefined for an empty mask")
    dist = ndimage.distance_transform_edt(~y)
    return float(dist[x].mean())


def ahd(x, y) -> float:
    """Average Hausdorff distance in voxel units (exact Euclidean distance transform)."""
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return max(directed_average_distance(x, y), directed_average_distance(y, x))


def ahd_brute_force(x, y) -> float:
    px = np.argwhere(x)
    py = np.argwhere(y)
    if len(px) == 0 or len(py) == 0:
        raise ValueError("average distance undefined for an empty mask")
    d = cdist(px, py)
    return max(d.min(axis=1).mean(), d.min(axis=0).mean())


def evaluate(pred, gt) -> dict[str, float]:
    c = confusion(pred, gt)
    row = {"dice": dice(c), "jaccard": jaccard(c), "sens": sens(c), "spec": spec(c)}
    if np.any(pred) and np.any(gt):
        row["ahd"] = ahd(pred, gt)
    elif not np.any(pred) and not np.any(gt):
        row["ahd"] = 0.0
    else:
        row["ahd"] = math.nan
    return row


def evaluate_slices(pred, gt) -> list[dict[str, float]]:
    """Per-slice rows along the slice axis, skipping slices empty in both masks."""
    rows = []
    for z in range(gt.shape[0]):
        if not gt[z].any() and not pred[z].any():
            continue
        row = evaluate(pred[z], gt[z])
        row["z"] = z
        rows.append(row)
    return rows


@dataclass
class MetricReport:
    rows: list[dict]
    mean: dict[str, float]
    sd: dict[str, float]


def aggregate(rows: list[dict]) -> MetricReport:
    """Mean and population standard deviation per metric (NaN entries ignored)."""
    if not rows:
        raise ValueError("nothing to aggregate")
    mean, sd = {}, {}
    for m in METRICS:
        vals = np.array([r[m] for r in rows if m in r], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        mean[m] = float(vals.mean()) if vals.size else math.nan
        sd[m] = float(vals.std()) if vals.size else math.nan
    return MetricReport(rows, mean, sd)


def boxplot_stats(values) -> dict:
    """Quartiles, 1.5 IQR whiskers and outliers, as drawn in a standard box plot."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    v = v[~np.isnan(v)]
    if v.size == 0:
        raise ValueError("no values")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {
        "q1": float(q1), "median": float(med), "q3": float(q3),
        "whisker_low": float(inside.min()), "whisker_high": float(inside.max()),
        "outliers": [float(x) for x in v[(v < lo_fence) | (v > hi_fence)]],
    }
