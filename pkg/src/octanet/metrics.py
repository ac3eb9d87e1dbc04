"""Segmentation metrics, ROC/AUC, the centerline tolerance protocol and paired tests."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage, stats

from .core import DEFAULT_THRESHOLD, ConfusionCounts, DataError, binarize, confusion, is_thin

METRICS = ("auc", "acc", "sen", "spe", "kappa", "fdr", "gmean", "dice")
TOLERANCE_RADIUS = 3


def _ratio(num: float, den: float) -> Optional[float]:
    return num / den if den else None


def basic_metrics(c: ConfusionCounts) -> dict:
    """Threshold metrics from confusion counts; undefined ratios are ``None``."""
    n = c.total
    if n == 0:
        raise DataError("no evaluated pixels")
    tp, fp, tn, fn = c.tp, c.fp, c.tn, c.fn
    sen = _ratio(tp, tp + fn)
    spe = _ratio(tn, tn + fp)
    acc = (tp + tn) / n
    pe = ((tp + fn) * (tp + fp) + (tn + fp) * (tn + fn)) / (n * n)
    kappa = _ratio(acc - pe, 1 - pe) if not math.isclose(pe, 1.0) else None
    return {
        "sen": sen,
        "spe": spe,
        "acc": acc,
        "fdr": _ratio(fp, fp + tp),
        "dice": _ratio(2 * tp, fp + fn + 2 * tp),
        "gmean": math.sqrt(sen * spe) if sen is not None and spe is not None else None,
        "pe": pe,
        "kappa": kappa,
    }


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[k] produced point k+1; point 0 is (0, 0)
    auc: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            w.writerow(["inf", 0.0, 0.0])
            for t, f, r in zip(self.thresholds, self.fpr[1:], self.tpr[1:]):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(r))])


def roc_auc(scores, gt, region=None) -> RocCurve:
    """ROC from a sweep over every distinct score; AUC by the trapezoid rule.

    Tied scores enter as one step, so the area equals the Mann-Whitney
    statistic with ties counted one half.
    """
    s = np.asarray(getattr(scores, "values", scores), dtype=np.float64)
    g = np.asarray(getattr(gt, "values", gt)).astype(bool)
    if s.shape != g.shape:
        raise DataError(f"shape mismatch: scores {s.shape} vs gt {g.shape}")
    if region is not None:
        keep = np.asarray(getattr(region, "values", region)).astype(bool)
        s, g = s[keep], g[keep]
    s, g = s.ravel(), g.ravel()
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both vessel and background pixels in the ground truth")
    order = np.argsort(-s, kind="mergesort")
    s, g = s[order], g[order]
    last_of_run = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(g)[last_of_run]
    fps = (last_of_run + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, s[last_of_run], auc)


def tolerance_region(gt_centerline, radius: float = TOLERANCE_RADIUS) -> np.ndarray:
    g = np.asarray(getattr(gt_centerline, "values", gt_centerline)).astype(bool)
    if not g.any():
        return np.zeros_like(g)
    return ndimage.distance_transform_edt(~g) <= radius


def tolerance_confusion(pred, gt_centerline, radius: float = TOLERANCE_RADIUS) -> ConfusionCounts:
    """Confusion counts that forgive localization errors up to ``radius`` pixels.

    Predictions inside the Euclidean ``radius`` band around the centerline are
    TP, outside it FP. Centerline pixels with no prediction within ``radius``
    are FN. Negatives outside the band are TN. Pixels inside the band that are
    not predicted are not counted, so the total can be below H*W.
    """
    p = np.asarray(getattr(pred, "values", pred)).astype(bool)
    g = np.asarray(getattr(gt_centerline, "values", gt_centerline)).astype(bool)
    if p.shape != g.shape:
        raise DataError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if not is_thin(g):
        warnings.warn("centerline ground truth is not single-pixel wide", stacklevel=2)
    band = tolerance_region(g, radius)
    if p.any():
        near_pred = ndimage.distance_transform_edt(~p) <= radius
    else:
        near_pred = np.zeros_like(p)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & band)),
        fp=int(np.count_nonzero(p & ~band)),
        tn=int(np.count_nonzero(~p & ~band)),
        fn=int(np.count_nonzero(g & ~near_pred)),
    )


@dataclass
class TTestResult:
    t: float
    p: float
    tie: bool = False
    n: int = 0


def paired_ttest(a, b) -> TTestResult:
    """Two-sided paired t-test on per-image scores.

    When every difference is the same the statistic is degenerate: equal
    samples give t=0, p=1 (a tie); a constant nonzero shift gives |t|=inf, p=0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise DataError("paired t-test needs two equal-length samples of size >= 2")
    d = a - b
    if np.allclose(d, d[0], rtol=0, atol=1e-12 * max(1.0, np.abs(d).max())):
        if np.allclose(d, 0, rtol=0, atol=1e-12):
            return TTestResult(0.0, 1.0, tie=True, n=a.size)
        return TTestResult(math.copysign(math.inf, d.mean()), 0.0, tie=True, n=a.size)
    res = stats.ttest_rel(a, b)
    return TTestResult(float(res.statistic), float(res.pvalue), n=a.size)


# ---------------------------------------------------------------------- reports

def evaluate_map(
    cmap,
    gt,
    threshold: float = DEFAULT_THRESHOLD,
    tolerance: Optional[float] = None,
    region=None,
) -> dict:
    """All metrics for one confidence map.

    With ``tolerance`` set, ``gt`` is a centerline mask: counts follow the
    tolerance protocol and AUC is swept against the tolerance band.
    """
    values = np.asarray(getattr(cmap, "values", cmap))
    g = np.asarray(getattr(gt, "values", gt)).astype(bool)
    pred = binarize(values, threshold)
    if tolerance is None:
        counts = confusion(pred, g)
        auc_truth = g
    else:
        counts = tolerance_confusion(pred, g, tolerance)
        auc_truth = tolerance_region(g, tolerance)
    row = basic_metrics(counts)
    try:
        row["auc"] = roc_auc(values, auc_truth, region).auc
    except DataError:
        row["auc"] = None
    row.update(tp=counts.tp, fp=counts.fp, tn=counts.tn, fn=counts.fn)
    return row


@dataclass
class MetricsReport:
    rows: list  # (name, metrics dict)
    threshold: float = DEFAULT_THRESHOLD
    tolerance: Optional[float] = None
    pooling: str = "macro"
    aggregate: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = aggregate([m for _, m in self.rows], self.pooling)

    def to_csv(self, path) -> None:
        cols = ["image", *METRICS, "tp", "fp", "tn", "fn"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for name, m in [*self.rows, (f"aggregate_{self.pooling}", self.aggregate)]:
                w.writerow([name, *(_fmt(m.get(k)) for k in cols[1:])])

    def summary(self) -> dict:
        return {
            "threshold": self.threshold,
            "tolerance": self.tolerance,
            "tolerance_mode": self.tolerance is not None,
            "pooling": self.pooling,
            "n_images": len(self.rows),
            "aggregate": {k: self.aggregate.get(k) for k in METRICS},
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def _fmt(v):
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def aggregate(rows: list[dict], pooling: str = "macro") -> dict:
    """Macro: mean of per-image values, skipping undefined ones. Micro: metrics of pooled counts.

    AUC is always the macro mean.
    """
    if pooling not in ("macro", "micro"):
        raise ValueError(f"unknown pooling {pooling!r}")
    out = {}
    for k in ("auc", *METRICS[1:]):
        vals = [r[k] for r in rows if r.get(k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
    if pooling == "micro" and rows:
        pooled = ConfusionCounts(*(sum(r[k] for r in rows) for k in ("tp", "fp", "tn", "fn")))
        auc = out["auc"]
        out.update(basic_metrics(pooled))
        out["auc"] = auc
    for k in ("tp", "fp", "tn", "fn"):
        out[k] = sum(r.get(k, 0) for r in rows)
    return out
