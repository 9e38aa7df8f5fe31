"""Hybrid classification + essential-matrix loss and the optimization loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import episym
from .network import (
    LLHANet,
    NetworkConfig,
    NetworkOutput,
    build_model,
    decisions_from_logits,
    save_checkpoint,
)
from .scenes import Dataset

log = logging.getLogger(__name__)

ESSENTIAL_CAP = 0.25
GRAD_CLIP = 10.0


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    alpha_warmup_iters: int = 2000
    alpha: float = 0.1
    total_iters: int = 500_000
    seed: int = 0
    balance: bool = True
    supervise_intermediate: bool = True
    eval_every: int = 250
    val_fraction: float = 0.2
    deterministic: bool = True
    dtype: str = "float32"

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1 or self.total_iters < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be positive, total_iters >= 0")
        if self.learning_rate < 0 or self.alpha < 0 or self.alpha_warmup_iters < 0:
            raise ValueError("learning_rate, alpha and alpha_warmup_iters must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return self

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


# Reference schedule; the full-length run is not a desk-scale target.
FULL_TRAIN = TrainConfig(batch_size=32, learning_rate=1e-4, alpha_warmup_iters=2000,
                          alpha=0.1, total_iters=482_000)


@dataclass
class LossReport:
    total: torch.Tensor
    classification: float
    essential: float
    alpha_used: float
    stage_terms: list = field(default_factory=list)
    skipped_essential: int = 0

    def as_dict(self) -> dict:
        return {"total": float(self.total.detach()), "classification": self.classification,
                "essential": self.essential, "alpha_used": self.alpha_used,
                "stage_terms": list(self.stage_terms)}


def classification_loss(logits: torch.Tensor, labels: torch.Tensor, balance: bool = True) -> torch.Tensor:
    """Binary cross entropy on ``sigmoid(logits)``, averaged over instances.

    With ``balance`` each class within an instance is averaged separately
    (count floored at 1) and the present classes are averaged; an absent
    class contributes nothing.
    """
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels, dtype=logits.dtype)
    if logits.shape != labels.shape:
        raise ValueError("logits and labels must have the same shape")
    if logits.dim() == 1:
        logits, labels = logits[None], labels[None]
    bce = F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    if not balance:
        return bce.mean()
    pos = labels
    neg = 1.0 - labels
    n_pos = pos.sum(-1)
    n_neg = neg.sum(-1)
    term_pos = (bce * pos).sum(-1) / n_pos.clamp(min=1.0)
    term_neg = (bce * neg).sum(-1) / n_neg.clamp(min=1.0)
    present = (n_pos > 0).to(bce.dtype) + (n_neg > 0).to(bce.dtype)
    return ((term_pos + term_neg) / present).mean()


def essential_loss(E_hat: torch.Tensor, coords: torch.Tensor, labels: torch.Tensor,
                   E_gt: Optional[torch.Tensor] = None, mixed: bool = False):
    """Capped mean symmetric epipolar distance over ground-truth inliers.

    Returns ``(loss, n_skipped)``; instances without inliers are skipped.
    ``mixed`` puts ``E_gt`` in the denominator instead of ``E_hat``.
    """
    if E_hat.dim() == 2:
        E_hat, coords, labels = E_hat[None], coords[None], labels[None]
        E_gt = None if E_gt is None else E_gt[None]
    denom = E_gt.to(E_hat.dtype) if mixed else None
    res = torch.clamp(episym(coords.to(E_hat.dtype), E_hat, denom), max=ESSENTIAL_CAP)
    mask = labels.to(res.dtype)
    n_in = mask.sum(-1)
    valid = n_in > 0
    skipped = int((~valid).sum())
    if not valid.any():
        return res.sum() * 0.0, skipped
    per = (res * mask).sum(-1) / n_in.clamp(min=1.0)
    return per[valid].mean(), skipped


def alpha_at(iteration: int, cfg: TrainConfig) -> float:
    return 0.0 if iteration < cfg.alpha_warmup_iters else float(cfg.alpha)


def hybrid_loss(output: NetworkOutput, coords: torch.Tensor, labels: torch.Tensor,
                iteration: int, cfg: TrainConfig, E_gt: Optional[torch.Tensor] = None) -> LossReport:
    if labels is None:
        raise TrainingError("labels are required for the hybrid loss")
    terms = output.stage_logits if cfg.supervise_intermediate else [output.logits]
    stage = [classification_loss(lg, labels, cfg.balance) for lg in terms]
    cls = torch.stack(stage).sum()
    ess, skipped = essential_loss(output.essential, coords, labels, E_gt)
    a = alpha_at(iteration, cfg)
    total = cls + a * ess if a > 0 else cls
    return LossReport(total, float(cls.detach()), float(ess.detach()), a,
                      [float(s.detach()) for s in stage], skipped)


# --- batching -----------------------------------------------------------------

def _stack(dataset: Dataset, idx, dtype):
    coords = torch.as_tensor(np.stack([dataset[i].corr.coords for i in idx]), dtype=dtype)
    labels = torch.as_tensor(np.stack([dataset[i].corr.labels for i in idx]), dtype=dtype)
    return coords, labels


class BatchSampler:
    """Deterministic epoch-shuffled batches; a batch only mixes sets of equal size."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int):
        self.rng = np.random.default_rng(seed)
        groups: dict = {}
        for i, s in enumerate(dataset):
            groups.setdefault(len(s.corr), []).append(i)
        self.groups = list(groups.values())
        self.batch_size = batch_size
        self.queue: list = []

    def _refill(self):
        batches = []
        for g in self.groups:
            order = self.rng.permutation(g)
            bs = min(self.batch_size, len(order))
            batches += [order[k:k + bs] for k in range(0, len(order) - bs + 1, bs)]
        self.queue = [batches[j] for j in self.rng.permutation(len(batches))]

    def next(self) -> np.ndarray:
        if not self.queue:
            self._refill()
        return self.queue.pop(0)


# --- validation -------------------------------------------------------------------

def evaluate_classification(model: LLHANet, dataset: Dataset, batch_size: int = 16) -> dict:
    """Pooled precision/recall/F (percent) of final-logit decisions."""
    from .evaluation import prf

    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    decisions, labels = [], []
    try:
        with torch.no_grad():
            for k in range(0, len(dataset), batch_size):
                idx = range(k, min(k + batch_size, len(dataset)))
                sizes = {len(dataset[i].corr) for i in idx}
                chunks = [list(idx)] if len(sizes) == 1 else [[i] for i in idx]
                for chunk in chunks:
                    coords, lab = _stack(dataset, chunk, dtype)
                    out = model(coords)
                    decisions.append(decisions_from_logits(out.logits).flatten().numpy())
                    labels.append(lab.flatten().numpy())
    finally:
        model.train(was_training)
    p, r, f = prf(np.concatenate(decisions), np.concatenate(labels))
    return {"precision": p, "recall": r, "f_score": f}


# --- training loop ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: LLHANet
    trace: list
    best_checkpoint: Optional[Path]
    final_checkpoint: Optional[Path]
    best_val_f: float
    degenerate_solves: int


def train(dataset: Dataset, net_config: NetworkConfig, train_config: TrainConfig,
          out_dir=None, val_dataset: Optional[Dataset] = None,
          trace_name: str = "trace.jsonl") -> TrainResult:
    """Adam on the hybrid loss with global-norm gradient clipping.

    When ``val_dataset`` is omitted the trailing ``val_fraction`` of scenes
    (by index) is held out. Every ``eval_every`` iterations a record is
    appended to the JSON-lines trace and the best-by-validation-F model is
    checkpointed.
    """
    cfg = train_config.validate()
    if not dataset.has_labels:
        raise TrainingError("training requires labeled correspondence sets")
    if val_dataset is None and cfg.val_fraction > 0:
        n_val = max(1, int(round(cfg.val_fraction * len(dataset))))
        train_set = dataset.subset(range(len(dataset) - n_val))
        val_dataset = dataset.subset(range(len(dataset) - n_val, len(dataset)))
    else:
        train_set = dataset
    if len(train_set) == 0:
        raise TrainingError("empty training split")

    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)

    dtype = cfg.torch_dtype
    model = build_model(net_config, seed=cfg.seed, dtype=dtype)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sampler = BatchSampler(train_set, cfg.batch_size, cfg.seed)

    out_dir = Path(out_dir) if out_dir is not None else None
    trace_fh = None
    best_path = final_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        trace_fh = open(out_dir / trace_name, "w")
        best_path = out_dir / "best.ckpt"
        final_path = out_dir / "final.ckpt"

    trace = []
    best_f = -1.0
    degenerate = 0
    start = time.time()
    running = []

    def record(it, report):
        nonlocal best_f
        rec = {"iter": it, "wall_clock": round(time.time() - start, 3)}
        if report is not None:
            rec.update(report)
        if val_dataset is not None and len(val_dataset):
            val = evaluate_classification(model, val_dataset)
            rec["val"] = val
            if val["f_score"] > best_f:
                best_f = val["f_score"]
                if best_path is not None:
                    save_checkpoint(model, best_path, {"iter": it, "val": val})
        att = model.attention_scalars()
        if att:
            rec["att1"] = float(np.mean([a for a, _ in att]))
            rec["att2"] = float(np.mean([b for _, b in att]))
        rec["degenerate_solves"] = degenerate
        trace.append(rec)
        if trace_fh is not None:
            trace_fh.write(json.dumps(rec) + "\n")
            trace_fh.flush()
        log.info("iter %d %s", it, {k: v for k, v in rec.items() if k != "stage_terms"})

    try:
        for it in range(cfg.total_iters):
            idx = sampler.next()
            coords, labels = _stack(train_set, idx, dtype)
            out = model(coords)
            degenerate += int(out.degenerate.sum())
            report = hybrid_loss(out, coords, labels, it, cfg)
            if not math.isfinite(float(report.total.detach())):
                raise TrainingError(
                    f"non-finite loss at iteration {it} (seed {cfg.seed}, batch scenes {idx.tolist()})"
                )
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP)
            opt.step()
            running.append(report.as_dict())
            if (it + 1) % cfg.eval_every == 0 or it + 1 == cfg.total_iters:
                summary = {k: float(np.mean([r[k] for r in running]))
                           for k in ("total", "classification", "essential")}
                summary["alpha_used"] = report.alpha_used
                running = []
                record(it + 1, summary)
    finally:
        if trace_fh is not None:
            trace_fh.close()

    if final_path is not None:
        save_checkpoint(model, final_path, {"iter": cfg.total_iters})
    return TrainResult(model, trace, best_path, final_path, best_f, degenerate)
