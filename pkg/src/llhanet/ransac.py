"""Hypothesize-and-verify essential matrix estimation with an eight-point minimal sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .geometry import (
    INLIER_THRESHOLD,
    MIN_CORRESPONDENCES,
    CameraPose,
    CorrespondenceSet,
    EssentialMatrix,
    GeometryError,
    constraint_matrix,
    episym,
    project_to_essential,
    recover_pose,
)


REFINE_ROUNDS = 5


@dataclass
class RansacResult:
    decisions: np.ndarray
    essential: Optional[EssentialMatrix]
    pose: Optional[CameraPose]
    n_inliers: int
    low_confidence: bool


def _fit_projected(X: np.ndarray) -> np.ndarray:
    """Batch of constraint matrices ``(..., k, 9)`` -> projected essentials ``(..., 3, 3)``."""
    _, _, Vt = np.linalg.svd(X)
    E = Vt[..., -1, :].reshape(*X.shape[:-2], 3, 3)
    U, _, Vt = np.linalg.svd(E)
    return U @ (np.array([1.0, 1.0, 0.0])[:, None] * Vt) / np.sqrt(2.0)


def _refine(X: np.ndarray, coords_t: torch.Tensor, res: np.ndarray, threshold: float,
            rounds: int = REFINE_ROUNDS) -> np.ndarray:
    # truncated-quadratic weights: outliers that happen to fall inside the band are
    # pulled down instead of entering the refit with full weight
    E = None
    for _ in range(rounds):
        w = np.clip(1.0 - res / threshold, 0.0, None) ** 2
        if np.count_nonzero(w) < MIN_CORRESPONDENCES:
            break
        E = _fit_projected((np.sqrt(w)[:, None] * X)[None])[0]
        res = episym(coords_t[None], torch.from_numpy(E)[None]).numpy()[0]
    if E is None:
        E = _fit_projected(X[res < threshold][None])[0]
    return E


def ransac_essential(corr: CorrespondenceSet, iterations: int = 1000,
                     inlier_threshold: float = INLIER_THRESHOLD, seed: int = 0,
                     chunk: int = 500) -> RansacResult:
    """Best minimal model by truncated residual cost, refined by reweighted least squares on its consensus set.

    Decisions are residuals under the refined model below the threshold.
    """
    coords = corr.coords
    n = coords.shape[0]
    if n < MIN_CORRESPONDENCES:
        raise GeometryError(f"RANSAC needs at least {MIN_CORRESPONDENCES} correspondences")
    rng = np.random.default_rng(seed)
    X = constraint_matrix(torch.from_numpy(coords)).numpy()
    coords_t = torch.from_numpy(coords)

    # truncated cost rather than a bare count: inside a wide band a slightly wrong
    # model can collect as many points as the exact one
    best_cost, best_E, best_res = np.inf, None, None
    done = 0
    while done < iterations:
        k = min(chunk, iterations - done)
        samples = np.stack([rng.choice(n, MIN_CORRESPONDENCES, replace=False) for _ in range(k)])
        Es = _fit_projected(X[samples])
        res = episym(coords_t.expand(k, n, 4), torch.from_numpy(Es)).numpy()
        cost = np.minimum(res, inlier_threshold).sum(1)
        j = int(np.argmin(cost))
        if cost[j] < best_cost:
            best_cost, best_E, best_res = float(cost[j]), Es[j], res[j]
        done += k

    decisions = (best_res < inlier_threshold).astype(np.float64)
    best_count = int(decisions.sum())
    if best_count < MIN_CORRESPONDENCES:
        return RansacResult(decisions, EssentialMatrix(best_E, True), None, best_count, True)

    E_m = _refine(X, coords_t, best_res, inlier_threshold)
    res = episym(coords_t[None], torch.from_numpy(E_m)[None]).numpy()[0]
    if (res < inlier_threshold).sum() >= MIN_CORRESPONDENCES:
        decisions = (res < inlier_threshold).astype(np.float64)
    E = project_to_essential(EssentialMatrix(E_m, True))
    try:
        pose = recover_pose(E, corr, decisions)
    except GeometryError:
        return RansacResult(decisions, E, None, best_count, True)
    return RansacResult(decisions, E, pose, best_count, False)
