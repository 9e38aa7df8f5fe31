"""Outlier-removal and pose metrics, the RANSAC baseline, evaluation and ablations."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import CorrespondenceSet, pose_error
from .network import (
    LLHANet,
    NetworkConfig,
    declared_parameter_count,
    infer_logits,
    predict_from_logits,
)
from .ransac import ransac_essential
from .scenes import Dataset

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
MAP_THRESHOLDS = (5, 10, 20)


def prf(decisions, labels, with_flag: bool = False):
    """Precision, recall and F-score in percent. Empty denominators give 0."""
    d = np.asarray(decisions).astype(bool).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if d.shape != y.shape:
        raise ValueError("decisions and labels differ in length")
    tp = float(np.sum(d & y))
    fp = float(np.sum(d & ~y))
    fn = float(np.sum(~d & y))
    empty = (tp + fp == 0) or (tp + fn == 0)
    p = 100.0 * tp / (tp + fp) if tp + fp > 0 else 0.0
    r = 100.0 * tp / (tp + fn) if tp + fn > 0 else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return (p, r, f, empty) if with_flag else (p, r, f)


def map_metric(pose_errors: Sequence, threshold_deg: float) -> Optional[float]:
    """Mean over 5-degree sub-thresholds up to ``threshold_deg`` of the fraction of pairs
    whose ``max(rot, trans)`` error is below the sub-threshold, in percent."""
    if len(pose_errors) == 0:
        return None
    if threshold_deg < 5 or threshold_deg % 5:
        raise ValueError("threshold must be a positive multiple of 5 degrees")
    e = np.max(np.asarray(pose_errors, dtype=np.float64).reshape(-1, 2), axis=1)
    subs = np.arange(5, threshold_deg + 1, 5)
    return float(100.0 * np.mean([np.mean(e < s) for s in subs]))


def ransac_baseline(corr: CorrespondenceSet, iterations: int = 1000,
                    inlier_threshold: float = 1e-4, seed: int = 0):
    """Returns ``(decisions, pose, low_confidence)``."""
    corr.validate()
    res = ransac_essential(corr, iterations, inlier_threshold, seed)
    return res.decisions, res.pose, res.low_confidence


@dataclass
class EvalReport:
    precision: float
    recall: float
    f_score: float
    map_at: dict = field(default_factory=dict)  # {"no_ransac": {5: ..}, "ransac": {...}}
    pose_errors: dict = field(default_factory=dict)
    low_confidence: int = 0
    runtime: dict = field(default_factory=dict)
    notices: list = field(default_factory=list)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_json(self) -> str:
        d = asdict(self)
        d["map_at"] = {k: (None if v is None else {str(t): m for t, m in v.items()})
                       for k, v in self.map_at.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"P {self.precision:6.2f}  R {self.recall:6.2f}  F {self.f_score:6.2f}"]
        for mode, vals in self.map_at.items():
            if vals is None:
                lines.append(f"mAP ({mode}): absent")
            else:
                cells = "  ".join(f"@{t}: {m:6.2f}" for t, m in vals.items())
                lines.append(f"mAP ({mode}) {cells}")
        lines.extend(self.notices)
        return "\n".join(lines)


class OracleModel:
    """Test double emitting saturated logits from ground-truth labels."""

    def logits(self, corr: CorrespondenceSet) -> np.ndarray:
        return np.where(np.asarray(corr.labels) > 0, 20.0, -20.0)


def _logit_fn(model) -> Callable:
    if isinstance(model, OracleModel):
        return model.logits
    if hasattr(model, "logits") and not hasattr(model, "parameters"):
        return model.logits
    return lambda corr: infer_logits(model, corr)


def evaluate(dataset: Dataset, model, checkpoint_config: Optional[NetworkConfig] = None,
             expected_config: Optional[NetworkConfig] = None, with_ransac: bool = True,
             ransac_iterations: int = 1000, thresholds=MAP_THRESHOLDS, seed: int = 0) -> EvalReport:
    """Pooled P/R/F over all correspondences plus pose mAP without and with RANSAC."""
    from .network import CheckpointError

    if expected_config is not None and checkpoint_config is not None \
            and expected_config.hash() != checkpoint_config.hash():
        raise CheckpointError("checkpoint config does not match the requested config")
    if not dataset.has_labels:
        raise ValueError("evaluation requires labels")
    logit_fn = _logit_fn(model)
    modes = ["no_ransac"] + (["ransac"] if with_ransac else [])
    errors = {m: [] for m in modes}
    decisions, labels = [], []
    low = 0
    t_net = t_pose = 0.0
    has_poses = dataset.has_poses
    for k, scene in enumerate(dataset):
        corr = scene.corr
        t0 = time.perf_counter()
        logits = logit_fn(corr)
        t_net += time.perf_counter() - t0
        decisions.append(logits > 0)
        labels.append(corr.labels)
        if not has_poses:
            continue
        t0 = time.perf_counter()
        for mode in modes:
            pred = predict_from_logits(corr, logits, mode == "ransac", ransac_iterations, seed + k)
            low += int(pred.low_confidence)
            errors[mode].append((180.0, 180.0) if pred.pose is None else pose_error(pred.pose, corr.pose))
        t_pose += time.perf_counter() - t0
    p, r, f = prf(np.concatenate(decisions), np.concatenate(labels))
    report = EvalReport(p, r, f, low_confidence=low,
                        runtime={"network_s": t_net, "pose_s": t_pose, "scenes": len(dataset)})
    if has_poses:
        report.map_at = {m: {t: map_metric(errors[m], t) for t in thresholds} for m in modes}
        report.pose_errors = {m: [list(e) for e in errors[m]] for m in modes}
    else:
        report.map_at = {m: None for m in modes}
        report.notices.append("poses missing: mAP absent")
    return report


def all_positive_f(dataset: Dataset) -> float:
    labels = np.concatenate([s.corr.labels for s in dataset])
    return prf(np.ones_like(labels), labels)[2]


# --- ablation grid ----------------------------------------------------------------

ABLATION_MODULES = {
    "baseline": dict(block="pointcn", use_pool=False, extraction_stages=1),
    "+pool": dict(block="pointcn", use_pool=True, extraction_stages=1),
    "+iter": dict(block="pointcn", use_pool=True),
    "+llf": dict(block="llf", use_pool=True),
    "+ha": dict(block="ha", use_pool=True),
    "+piha": dict(block="piha", use_pool=True),
}
ABLATION_ENDS = {
    "pointcn+pointcn": ("pointcn", "pointcn"),
    "llf+pointcn": ("llf", "pointcn"),
    "pointcn+llf": ("pointcn", "llf"),
    "llf+llf": ("llf", "llf"),
}
ABLATION_POOLS = {"gap": "gap", "gmp": "gmp"}


def ablation_configs(base: NetworkConfig, axes: Sequence[str]) -> dict:
    """Named configurations for the requested axes: ``modules``, ``ends`` and/or ``pool``,
    or explicit cell names such as ``+ha``."""
    cells = {}
    for axis in axes:
        if axis == "modules":
            cells.update({k: replace(base, **v) for k, v in ABLATION_MODULES.items()})
        elif axis == "ends":
            cells.update({k: replace(base, ha_ends=v) for k, v in ABLATION_ENDS.items()})
        elif axis == "pool":
            cells.update({k: replace(base, pool=v) for k, v in ABLATION_POOLS.items()})
        elif axis in ABLATION_MODULES:
            cells[axis] = replace(base, **ABLATION_MODULES[axis])
        elif axis in ABLATION_ENDS:
            cells[axis] = replace(base, ha_ends=ABLATION_ENDS[axis])
        elif axis in ABLATION_POOLS:
            cells[axis] = replace(base, pool=axis)
        else:
            raise ValueError(f"unknown ablation axis or cell {axis!r}")
    return cells


def ablation_grid(train_set: Dataset, test_set: Dataset, base: NetworkConfig, train_config,
                  axes: Sequence[str], out_dir=None, with_pose: bool = True) -> list:
    """Train every cell with the same seed and budget; one row per cell.

    A failing cell is reported with its error and the grid continues.
    """
    from .training import train

    rows = []
    for name, cfg in ablation_configs(base, axes).items():
        row = {"config": name, "parameters": declared_parameter_count(cfg)}
        try:
            cell_dir = None if out_dir is None else Path(out_dir) / name.replace("+", "plus_")
            result = train(train_set, cfg, train_config, cell_dir)
            rep = evaluate(test_set, result.model, with_ransac=False) if with_pose else None
            val = result.trace[-1].get("val", {}) if result.trace else {}
            row.update(val_f=val.get("f_score"))
            if rep is not None:
                row.update(precision=rep.precision, recall=rep.recall, f_score=rep.f_score,
                           map5=rep.map_at["no_ransac"][5], map20=rep.map_at["no_ransac"][20])
        except Exception as exc:  # grid continues past failing cells
            log.exception("ablation cell %s failed", name)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def format_table(rows: list) -> str:
    cols = ["config", "parameters", "precision", "recall", "f_score", "map5", "map20", "error"]
    cols = [c for c in cols if any(c in r for r in rows)]
    out = ["\t".join(cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = r.get(c, "")
            cells.append(f"{v:.2f}" if isinstance(v, float) else str(v))
        out.append("\t".join(cells))
    return "\n".join(out)
