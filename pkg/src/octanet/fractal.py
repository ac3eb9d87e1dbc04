"""Box-counting fractal dimension and two-group comparison of FD values."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .core import DataError


@dataclass
class FdResult:
    fd: float
    sizes: list
    counts: list
    r2: float


def default_sizes(shape) -> list[int]:
    """Dyadic box edges 2, 4, ... up to floor(min(H, W) / 4)."""
    top = min(shape) // 4
    sizes = []
    s = 2
    while s <= top:
        sizes.append(s)
        s *= 2
    return sizes


def box_counts(mask: np.ndarray, size: int, offset: tuple[int, int] = (0, 0)) -> int:
    """Occupied ``size x size`` cells of a grid anchored at ``-offset``; edge cells may be partial."""
    m = np.asarray(mask).astype(bool)
    oy, ox = offset
    if oy or ox:
        m = np.pad(m, ((oy, 0), (ox, 0)))
    h, w = m.shape
    ph, pw = (-h) % size, (-w) % size
    if ph or pw:
        m = np.pad(m, ((0, ph), (0, pw)))
    cells = m.reshape(m.shape[0] // size, size, m.shape[1] // size, size)
    return int(cells.any(axis=(1, 3)).sum())


def box_count_fd(mask, sizes: Optional[Sequence[int]] = None, anchors: int = 1) -> FdResult:
    """Least-squares slope of log N(s) against log(1/s).

    ``anchors > 1`` averages N(s) over that many grid offsets along the diagonal
    instead of using the single origin-anchored grid.
    """
    m = np.asarray(getattr(mask, "values", mask)).astype(bool)
    if m.ndim != 2:
        raise DataError("box counting needs a 2D mask")
    if not m.any():
        raise DataError("box counting needs a nonempty mask")
    sizes = list(sizes) if sizes is not None else default_sizes(m.shape)
    if len(sizes) < 3:
        raise DataError(f"need at least 3 box sizes, got {sizes}")
    if any(s < 1 or s > min(m.shape) for s in sizes):
        raise DataError(f"box sizes must lie in [1, {min(m.shape)}]")
    counts = []
    for s in sizes:
        if anchors <= 1:
            counts.append(box_counts(m, s))
        else:
            offs = {int(round(k * s / anchors)) for k in range(anchors)}
            counts.append(float(np.mean([box_counts(m, s, (o, o)) for o in offs])))
    x = np.log(1.0 / np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(counts, dtype=np.float64))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return FdResult(float(slope), sizes, counts, min(max(r2, 0.0), 1.0))


@dataclass
class GroupComparison:
    labels: tuple
    values: tuple
    means: tuple
    stds: tuple
    t: float
    p: float
    test: str = "student"
    tie: bool = False
    quantiles: dict = field(default_factory=dict)


def _quantiles(v: np.ndarray) -> dict:
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(("min", "q1", "median", "q3", "max"), map(float, q)))


def compare_groups(fd_a, fd_b, labels=("A", "B"), test: str = "student") -> GroupComparison:
    """Two-sided two-sample test of FD values.

    ``student`` is the equal-variance t-test; ``ranksum`` the Mann-Whitney U test.
    Zero pooled variance is reported as an exact tie (equal means) or p=0.
    """
    a = np.asarray(fd_a, dtype=np.float64)
    b = np.asarray(fd_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DataError("each group needs at least 2 values")
    base = dict(
        labels=tuple(labels),
        values=(a.tolist(), b.tolist()),
        means=(float(a.mean()), float(b.mean())),
        stds=(float(a.std(ddof=1)), float(b.std(ddof=1))),
        test=test,
        quantiles={labels[0]: _quantiles(a), labels[1]: _quantiles(b)},
    )
    if test == "ranksum":
        res = stats.mannwhitneyu(a, b, alternative="two-sided")
        return GroupComparison(t=float(res.statistic), p=float(res.pvalue), **base)
    if test != "student":
        raise ValueError(f"unknown test {test!r}")
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        diff = a[0] - b[0]
        if diff == 0:
            return GroupComparison(t=0.0, p=1.0, tie=True, **base)
        return GroupComparison(t=math.copysign(math.inf, diff), p=0.0, tie=True, **base)
    res = stats.ttest_ind(a, b, equal_var=True)
    return GroupComparison(t=float(res.statistic), p=float(res.pvalue), **base)


def write_fd_csv(path, rows) -> None:
    """``rows`` are (group, subject, FdResult)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "subject", "fd", "r2", "sizes", "counts"])
        for group, subject, res in rows:
            w.writerow([group, subject, f"{res.fd:.6f}", f"{res.r2:.6f}",
                        " ".join(map(str, res.sizes)), " ".join(map(str, res.counts))])


def write_quantiles_csv(path, cmp: GroupComparison) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "n", "mean", "std", "min", "q1", "median", "q3", "max"])
        for label, vals, mean, sd in zip(cmp.labels, cmp.values, cmp.means, cmp.stds):
            q = cmp.quantiles[label]
            w.writerow([label, len(vals), f"{mean:.6f}", f"{sd:.6f}",
                        *(f"{q[k]:.6f}" for k in ("min", "q1", "median", "q3", "max"))])
