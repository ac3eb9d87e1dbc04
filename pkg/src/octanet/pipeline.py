"""End-to-end helpers: inference with a trained model, evaluation and the ablation grid."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch

from .core import ConfidenceMap, DEFAULT_THRESHOLD
from .metrics import TOLERANCE_RADIUS, MetricsReport, evaluate_map
from .nn.coarse import CoarseNet, CoarseNetConfig, CoarseOutput, coarse_forward
from .nn.fine import SrsConfig, SrsNet, srs_refine
from .training import TrainConfig, fine_target, train_coarse, train_fine

log = logging.getLogger(__name__)

ABLATION_COLUMNS = ("auc", "acc", "gmean", "kappa", "dice", "fdr")
ABLATION_HEADERS = ("AUC", "ACC", "G-mean", "Kappa", "Dice", "FDR")


@dataclass
class Prediction:
    coarse: CoarseOutput
    refined: Optional[CoarseOutput]
    final: ConfidenceMap


@dataclass
class Model:
    coarse: CoarseNet
    srs: Optional[SrsNet] = None

    def predict(self, img) -> Prediction:
        co = coarse_forward(self.coarse, img)
        if self.srs is None:
            return Prediction(co, None, ConfidenceMap(co.fused()))
        refined, final = srs_refine(self.srs, img, co)
        return Prediction(co, refined, final)


def time_inference(model: Model, img, runs: int = 10) -> float:
    """Mean wall-clock seconds over ``runs`` calls after one warm-up call."""
    model.predict(img)
    t0 = time.perf_counter()
    for _ in range(runs):
        model.predict(img)
    return (time.perf_counter() - t0) / runs


def evaluation_target(ann, tolerance: Optional[float]) -> np.ndarray:
    """Centerline mask in tolerance mode, otherwise the union of available masks."""
    if tolerance is not None:
        m = ann.centerline_mask if ann.centerline_mask is not None else ann.pixel_mask
        return m.values
    return fine_target(ann)


def evaluate_maps(
    maps,
    samples,
    threshold: float = DEFAULT_THRESHOLD,
    tolerance: Optional[float] = None,
    pooling: str = "macro",
) -> MetricsReport:
    rows = []
    for cmap, s in zip(maps, samples):
        target = evaluation_target(s.annotations, tolerance)
        rows.append((s.name, evaluate_map(cmap, target, threshold, tolerance)))
    return MetricsReport(rows, threshold, tolerance, pooling)


def tolerance_for(subset: str, force: Optional[bool] = None) -> Optional[float]:
    from .data.dataset import TOLERANCE_SUBSETS

    use = subset in TOLERANCE_SUBSETS if force is None else force
    return float(TOLERANCE_RADIUS) if use else None


def run_ablation(
    train,
    test,
    train_cfg: TrainConfig,
    coarse_cfg: CoarseNetConfig,
    srs_cfg: Optional[SrsConfig] = None,
    threshold: float = DEFAULT_THRESHOLD,
    tolerance: Optional[float] = None,
):
    """Backbone (single branch), joint learning (dual branch) and the full two-stage model.

    Every row is scored against the same target. Joint learning needs both
    annotation levels and is skipped (``None``) otherwise. Returns
    ``(table, reports)`` where table maps row name to a metrics dict.
    """
    srs_cfg = srs_cfg or SrsConfig()
    dual_ok = all(
        s.annotations.pixel_mask is not None and s.annotations.centerline_mask is not None
        for s in train
    )
    reports = {}

    single = train_coarse(train_cfg, train, replace(coarse_cfg, dual_branch=False))
    reports["backbone"] = evaluate_maps(
        [coarse_forward(single.coarse, s.image).pixel_map for s in test], test, threshold, tolerance
    )
    if dual_ok:
        joint = train_coarse(train_cfg, train, replace(coarse_cfg, dual_branch=True))
        reports["joint"] = evaluate_maps(
            [coarse_forward(joint.coarse, s.image).pixel_map for s in test], test, threshold, tolerance
        )
        base, refine_cl = joint.coarse, True
    else:
        base, refine_cl = single.coarse, False
    fine = train_fine(train_cfg, train, base, replace(srs_cfg, refine_centerline_branch=refine_cl))
    model = Model(base, fine.srs)
    reports["two-stage"] = evaluate_maps(
        [model.predict(s.image).final for s in test], test, threshold, tolerance
    )
    table = {
        name: ({k: reports[name].aggregate.get(k) for k in ABLATION_COLUMNS} if name in reports else None)
        for name in ("backbone", "joint", "two-stage")
    }
    return table, reports


def write_ablation_csv(path, table: dict) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *ABLATION_HEADERS])
        for name, row in table.items():
            if row is None:
                w.writerow([name, *("-" for _ in ABLATION_COLUMNS)])
            else:
                w.writerow([name, *("n/a" if row[c] is None else f"{row[c]:.4f}" for c in ABLATION_COLUMNS)])
