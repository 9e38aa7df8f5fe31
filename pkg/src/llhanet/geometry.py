"""Essential-matrix geometry for calibrated two-view correspondences.

Conventions: a pose maps first-camera coordinates to second-camera
coordinates, ``X2 = R @ X1 + t``, so that ``E = [t]x R`` and
``v2^T E v1 = 0`` for a true correspondence with ``v = (x, y, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

EPS_DENOM = 1e-15
INLIER_THRESHOLD = 1e-4
COORD_BOUND = 10.0
MIN_CORRESPONDENCES = 8
GAP_CLAMP = 1e-6
DEGENERATE_GAP = 1e-12
MIN_ACTIVE_WEIGHT = 1e-6


class GeometryError(ValueError):
    """Invalid input to a geometric operation."""


class DegeneratePoseError(GeometryError):
    pass


class DegenerateConfigurationError(GeometryError):
    pass


class UnrecoverablePoseError(GeometryError):
    pass


@dataclass
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def validate(self, tol: float = 1e-9) -> "CameraPose":
        R = self.rotation
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(self.translation)):
            raise GeometryError("pose contains non-finite entries")
        if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
            raise GeometryError("rotation is not a proper orthonormal matrix")
        if np.linalg.norm(self.translation) == 0.0:
            raise DegeneratePoseError("translation must be nonzero")
        return self


@dataclass
class EssentialMatrix:
    m: np.ndarray
    projected: bool = False

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64).reshape(3, 3)

    def normalized(self) -> "EssentialMatrix":
        norm = np.linalg.norm(self.m)
        if norm == 0.0:
            raise GeometryError("zero essential matrix")
        return EssentialMatrix(self.m / norm, self.projected)


@dataclass
class CorrespondenceSet:
    """N putative matches ``(x, y, x', y')`` in normalized image coordinates."""

    coords: np.ndarray
    labels: Optional[np.ndarray] = None
    pose: Optional[CameraPose] = None
    gt_essential: Optional[EssentialMatrix] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)

    def __len__(self) -> int:
        return self.coords.shape[0]

    def validate(self, min_size: int = MIN_CORRESPONDENCES) -> "CorrespondenceSet":
        c = self.coords
        if c.ndim != 2 or c.shape[1] != 4:
            raise GeometryError(f"coords must be N x 4, got shape {c.shape}")
        if c.shape[0] < min_size:
            raise GeometryError(f"need at least {min_size} correspondences, got {c.shape[0]}")
        if not np.all(np.isfinite(c)):
            raise GeometryError("coords contain non-finite values")
        if np.abs(c).max(initial=0.0) > COORD_BOUND:
            raise GeometryError(f"coords exceed the normalized-plane bound {COORD_BOUND}")
        if self.labels is not None:
            if self.labels.shape != (c.shape[0],):
                raise GeometryError("labels length does not match coords")
            if not np.all((self.labels == 0) | (self.labels == 1)):
                raise GeometryError("labels must be 0/1")
        return self

    def permuted(self, perm: np.ndarray) -> "CorrespondenceSet":
        labels = None if self.labels is None else self.labels[perm]
        return CorrespondenceSet(self.coords[perm], labels, self.pose, self.gt_essential)


def validate_weights(w, n: int, min_active: int = 0) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n,):
        raise GeometryError(f"weights must have shape ({n},), got {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0) or np.any(w >= 1):
        raise GeometryError("weights must be finite and lie in [0, 1)")
    if min_active and np.count_nonzero(w > MIN_ACTIVE_WEIGHT) < min_active:
        raise DegenerateConfigurationError(
            f"need at least {min_active} weights above {MIN_ACTIVE_WEIGHT}"
        )
    return w


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_about_axis(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64).reshape(3)
    k = k / np.linalg.norm(k)
    K = skew(k)
    return np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)


def essential_from_pose(pose: CameraPose) -> EssentialMatrix:
    pose.validate()
    E = skew(pose.translation) @ pose.rotation
    return EssentialMatrix(E / np.linalg.norm(E), projected=True)


def _homogeneous(coords):
    ones = torch.ones_like(coords[..., :1])
    return torch.cat([coords[..., 0:2], ones], -1), torch.cat([coords[..., 2:4], ones], -1)


def episym(coords: torch.Tensor, E_hat: torch.Tensor, E_denom: Optional[torch.Tensor] = None,
           eps: float = EPS_DENOM) -> torch.Tensor:
    """Batched symmetric epipolar distance.

    ``coords`` is ``(..., N, 4)`` and ``E_hat`` is ``(..., 3, 3)``. The
    denominator uses ``E_denom`` when given (mixed form), else ``E_hat``.
    """
    v1, v2 = _homogeneous(coords)
    E_d = E_hat if E_denom is None else E_denom
    num = torch.einsum("...ni,...ij,...nj->...n", v2, E_hat, v1) ** 2
    Ev1 = torch.einsum("...ij,...nj->...ni", E_d, v1)
    Etv2 = torch.einsum("...ji,...nj->...ni", E_d, v2)
    den = Ev1[..., 0] ** 2 + Ev1[..., 1] ** 2 + Etv2[..., 0] ** 2 + Etv2[..., 1] ** 2
    return num / torch.clamp(den, min=eps)


def symmetric_epipolar_distance(E: EssentialMatrix, corr: CorrespondenceSet,
                                denominator: Optional[EssentialMatrix] = None) -> np.ndarray:
    """Per-correspondence ``(v2^T E v1)^2 / (|(E v1)_{1,2}|^2 + |(E^T v2)_{1,2}|^2)``.

    Pass ``denominator`` to evaluate the mixed form where the denominator
    lines come from a different (e.g. ground-truth) matrix.
    """
    coords = np.asarray(corr.coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)) or not np.all(np.isfinite(E.m)):
        raise GeometryError("non-finite input to symmetric_epipolar_distance")
    E_d = None if denominator is None else torch.from_numpy(denominator.m)
    out = episym(torch.from_numpy(coords), torch.from_numpy(E.m), E_d)
    return out.numpy()


def label_inliers(corr: CorrespondenceSet, E: EssentialMatrix,
                  threshold: float = INLIER_THRESHOLD) -> np.ndarray:
    return (symmetric_epipolar_distance(E, corr) < threshold).astype(np.float64)


def constraint_matrix(coords: torch.Tensor) -> torch.Tensor:
    """Rows ``flatten(v2 v1^T)`` so that ``row . vec(E) = v2^T E v1``."""
    v1, v2 = _homogeneous(coords)
    return (v2.unsqueeze(-1) * v1.unsqueeze(-2)).flatten(-2)


class _SmallestEigenvector(torch.autograd.Function):
    """Unit eigenvector of the smallest eigenvalue of a batch of symmetric 9x9 matrices.

    Backward uses first-order eigenvector perturbation with the eigen-gap
    denominators clamped at ``GAP_CLAMP``; entries flagged degenerate get
    zero gradient.
    """

    @staticmethod
    def forward(ctx, A):
        with torch.no_grad():
            # non-finite systems are solved on a placeholder and flagged degenerate
            finite = torch.isfinite(A).all(-1).all(-1)
            eye = torch.eye(A.shape[-1], dtype=A.dtype).expand_as(A)
            A = torch.where(finite[..., None, None], A, eye)
            lam, V = torch.linalg.eigh(0.5 * (A + A.transpose(-1, -2)))
            v = V[..., 0]
            # deterministic sign: largest-magnitude component positive
            idx = v.abs().argmax(-1, keepdim=True)
            sign = torch.sign(torch.gather(v, -1, idx))
            sign[sign == 0] = 1.0
            V = V * sign.unsqueeze(-1)
            v = V[..., 0]
            scale = lam[..., -1].abs().clamp_min(torch.finfo(A.dtype).tiny)
            degenerate = ((lam[..., 1] - lam[..., 0]) / scale < DEGENERATE_GAP) | ~finite
        ctx.save_for_backward(lam, V, degenerate)
        ctx.mark_non_differentiable(degenerate)
        return v, degenerate

    @staticmethod
    def backward(ctx, grad_v, _grad_flag):
        lam, V, degenerate = ctx.saved_tensors
        gap = lam[..., :1] - lam  # lambda_0 - lambda_k <= 0
        gap = torch.where(gap.abs() < GAP_CLAMP, -torch.full_like(gap, GAP_CLAMP), gap)
        inv = 1.0 / gap
        inv[..., 0] = 0.0
        coeff = inv * torch.einsum("...ik,...i->...k", V, grad_v)  # (.., 9)
        dv = torch.einsum("...ik,...k->...i", V, coeff)
        grad_A = dv.unsqueeze(-1) * V[..., :, 0].unsqueeze(-2)
        grad_A = 0.5 * (grad_A + grad_A.transpose(-1, -2))
        grad_A = torch.where(degenerate[..., None, None], torch.zeros_like(grad_A), grad_A)
        return grad_A


def weighted_eight_point_batch(coords: torch.Tensor, weights: torch.Tensor):
    """Differentiable weighted eight-point solve.

    Args:
        coords: ``(B, N, 4)`` correspondences.
        weights: ``(B, N)`` nonnegative weights.

    Returns:
        ``(E, degenerate)`` with ``E`` of shape ``(B, 3, 3)``, unit Frobenius
        norm, and a boolean mask of batch entries whose weighted system was
        rank deficient (their gradient is stopped).
    """
    X = constraint_matrix(coords.to(torch.float64))
    w = weights.to(torch.float64)
    A = torch.einsum("bni,bn,bnj->bij", X, w, X)
    v, degenerate = _SmallestEigenvector.apply(A)
    return v.reshape(*v.shape[:-1], 3, 3).to(coords.dtype), degenerate


def weighted_eight_point(corr: CorrespondenceSet, w, strict: bool = True) -> EssentialMatrix:
    corr.validate()
    w = validate_weights(w, len(corr), min_active=MIN_CORRESPONDENCES if strict else 0)
    E, degenerate = weighted_eight_point_batch(
        torch.from_numpy(corr.coords)[None], torch.from_numpy(w)[None]
    )
    if strict and bool(degenerate[0]):
        raise DegenerateConfigurationError("weighted epipolar system is rank deficient")
    return EssentialMatrix(E[0].numpy(), projected=False)


def project_to_essential(E: EssentialMatrix) -> EssentialMatrix:
    U, _, Vt = np.linalg.svd(E.m)
    m = U @ np.diag([1.0, 1.0, 0.0]) @ Vt / np.sqrt(2.0)
    return EssentialMatrix(m, projected=True)


def decompose_essential(E: EssentialMatrix):
    """The four ``(R, t)`` candidates of a projected essential matrix."""
    U, _, Vt = np.linalg.svd(E.m)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R1, R2 = U @ W @ Vt, U @ W.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def triangulate_depths(R: np.ndarray, t: np.ndarray, coords: np.ndarray):
    """Depths ``(z1, z2)`` solving ``z1 R v1 + t = z2 v2`` in least squares."""
    n = coords.shape[0]
    v1 = np.concatenate([coords[:, :2], np.ones((n, 1))], 1)
    v2 = np.concatenate([coords[:, 2:], np.ones((n, 1))], 1)
    a = v1 @ R.T
    b = -v2
    aa = np.einsum("ni,ni->n", a, a)
    bb = np.einsum("ni,ni->n", b, b)
    ab = np.einsum("ni,ni->n", a, b)
    at = a @ t
    bt = b @ t
    det = aa * bb - ab * ab
    ok = np.abs(det) > 1e-14
    det = np.where(ok, det, 1.0)
    z1 = np.where(ok, (-at * bb + bt * ab) / det, 0.0)
    z2 = np.where(ok, (-bt * aa + at * ab) / det, 0.0)
    return z1, z2


def recover_pose(E: EssentialMatrix, corr: CorrespondenceSet, w) -> CameraPose:
    """Pick the decomposition with the largest weighted count of points in front of both cameras."""
    coords = corr.coords
    w = np.asarray(w, dtype=np.float64)
    best, best_score = None, 0.0
    for R, t in decompose_essential(E):
        z1, z2 = triangulate_depths(R, t, coords)
        score = float(np.sum(w * ((z1 > 0) & (z2 > 0))))
        if score > best_score:
            best, best_score = (R, t), score
    if best is None:
        raise UnrecoverablePoseError("no decomposition places weighted points in front of both cameras")
    R, t = best
    return CameraPose(R, t / np.linalg.norm(t))


def _angle_between(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b)))


def pose_error(estimated: CameraPose, truth: CameraPose) -> tuple[float, float]:
    """Rotation and translation-direction errors in degrees.

    The rotation angle equals ``arccos((tr(R_est^T R) - 1) / 2)``; it is
    evaluated through ``atan2`` of the sine and cosine parts so that
    identical rotations give exactly zero.
    """
    M = estimated.rotation.T @ truth.rotation
    cos = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    sin = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    rot = np.degrees(np.arctan2(sin, cos))
    trans = np.degrees(_angle_between(estimated.translation, truth.translation))
    return float(rot), float(trans)
