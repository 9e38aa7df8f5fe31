"""The multi-stage correspondence network and its checkpoint archive."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .blocks import BLOCK_KINDS, ConfigurationError, PoolOAUnpool, conv1x1, llf_widths, make_block
from .geometry import (
    MIN_CORRESPONDENCES,
    CameraPose,
    CorrespondenceSet,
    EssentialMatrix,
    GeometryError,
    project_to_essential,
    recover_pose,
    weighted_eight_point_batch,
)
from .ransac import ransac_essential

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "llha-ckpt-v1"
LOGIT_CAP = 1e4


@dataclass(frozen=True)
class NetworkConfig:
    channels: int = 128
    piha_per_extraction: int = 7
    extraction_stages: int = 3
    clusters: int = 32
    integration_piha: int = 3
    llf_ratio: int = 4
    pool: str = "gap"
    block: str = "piha"
    use_pool: bool = True
    ha_ends: tuple = ("llf", "llf")
    gated_attention: bool = False

    def validate(self) -> "NetworkConfig":
        c = self.channels
        if c < 8 or c & (c - 1):
            raise ConfigurationError("channels must be a power of two >= 8")
        for name in ("piha_per_extraction", "extraction_stages", "clusters", "llf_ratio"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.integration_piha < 0:
            raise ConfigurationError("integration_piha must be >= 0")
        if self.block not in BLOCK_KINDS:
            raise ConfigurationError(f"block must be one of {BLOCK_KINDS}")
        if self.pool not in ("gap", "gmp"):
            raise ConfigurationError("pool must be 'gap' or 'gmp'")
        if self.use_pool and self.clusters < 2:
            raise ConfigurationError("clusters must be >= 2")
        llf_widths(c, self.llf_ratio)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ha_ends"] = list(self.ha_ends)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if "ha_ends" in d:
            d["ha_ends"] = tuple(d["ha_ends"])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESETS = {
    "desk": NetworkConfig(channels=64, clusters=16),
    "full": NetworkConfig(channels=128, clusters=500),
    "tiny": NetworkConfig(channels=8, piha_per_extraction=1, clusters=4, integration_piha=1),
}


@dataclass
class NetworkOutput:
    logits: torch.Tensor  # (B, N) final
    probabilities: torch.Tensor
    weights: torch.Tensor
    essential: torch.Tensor  # (B, 3, 3)
    degenerate: torch.Tensor  # (B,) bool
    stage_logits: list = field(default_factory=list)  # extraction stages, then final
    stage_features: list = field(default_factory=list)


def logits_to_weights(logits):
    """``w = tanh(relu(logit))`` held strictly below 1; probabilities equal weights."""
    if isinstance(logits, np.ndarray):
        w = logits_to_weights(torch.from_numpy(logits))[0].numpy()
        return w, w
    w = torch.tanh(torch.clamp(logits, min=0.0, max=LOGIT_CAP))
    below_one = torch.nextafter(torch.ones((), dtype=w.dtype), torch.zeros((), dtype=w.dtype))
    w = torch.minimum(w, below_one)
    return w, w


def decisions_from_logits(logits):
    return logits > 0


def logit_head(channels: int):
    # small init keeps the first logits near zero despite the residual feature growth
    head = conv1x1(channels, 1)
    torch.nn.init.normal_(head.weight, std=0.01 / math.sqrt(channels))
    return head


class ExtractionStage(nn.Module):
    def __init__(self, c_in: int, cfg: NetworkConfig):
        super().__init__()
        C = cfg.channels
        self.embed = conv1x1(c_in, C)
        self.blocks = nn.Sequential(*[
            make_block(cfg.block, C, cfg.llf_ratio, cfg.pool, cfg.ha_ends, cfg.gated_attention)
            for _ in range(cfg.piha_per_extraction)
        ])
        self.pool = PoolOAUnpool(C, cfg.clusters) if cfg.use_pool else None
        self.head = logit_head(C)

    def forward(self, x):
        f = self.blocks(self.embed(x))
        if self.pool is not None:
            f = self.pool(f)
        return f, self.head(f).squeeze(1)


class IntegrationStage(nn.Module):
    def __init__(self, n_stages: int, cfg: NetworkConfig):
        super().__init__()
        C = cfg.channels
        self.reduce = conv1x1(n_stages * C, C)
        self.blocks = nn.Sequential(*[
            make_block(cfg.block, C, cfg.llf_ratio, cfg.pool, cfg.ha_ends, cfg.gated_attention)
            for _ in range(cfg.integration_piha)
        ])
        self.head = logit_head(C)

    def forward(self, features):
        f = self.blocks(self.reduce(torch.cat(features, dim=1)))
        return self.head(f).squeeze(1)


class LLHANet(nn.Module):
    """Iterative extraction stages followed by a feature-integration stage.

    Stage 1 sees the raw ``(x, y, x', y')`` coordinates; every later stage
    sees the coordinates plus the previous stage's weights (5 channels).
    With a single extraction stage there is no integration stage.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config.validate()
        self.stages = nn.ModuleList(
            [ExtractionStage(4 if k == 0 else 5, config) for k in range(config.extraction_stages)]
        )
        self.integration = (
            IntegrationStage(config.extraction_stages, config) if config.extraction_stages > 1 else None
        )

    def stage_input(self, coords_t, prev_weights=None):
        if prev_weights is None:
            return coords_t
        return torch.cat([coords_t, prev_weights.unsqueeze(1)], dim=1)

    def forward(self, coords: torch.Tensor) -> NetworkOutput:
        """``coords`` is ``(B, N, 4)``."""
        if coords.dim() != 3 or coords.shape[-1] != 4:
            raise ValueError(f"coords must be (B, N, 4), got {tuple(coords.shape)}")
        if coords.shape[1] < MIN_CORRESPONDENCES:
            raise GeometryError(f"need at least {MIN_CORRESPONDENCES} correspondences")
        coords_t = coords.transpose(1, 2)
        features, stage_logits = [], []
        w = None
        for k, stage in enumerate(self.stages):
            try:
                f, logits = stage(self.stage_input(coords_t, w))
            except (ValueError, RuntimeError) as exc:
                raise type(exc)(f"extraction stage {k + 1}: {exc}") from exc
            w, _ = logits_to_weights(logits)
            features.append(f)
            stage_logits.append(logits)
        if self.integration is not None:
            logits = self.integration(features)
            stage_logits.append(logits)
        else:
            logits = stage_logits[-1]
        w, p = logits_to_weights(logits)
        E, degenerate = weighted_eight_point_batch(coords, w)
        return NetworkOutput(logits, p, w, E, degenerate, stage_logits, features)

    def attention_scalars(self) -> list:
        """``(att1, att2)`` of every attention module, in module order."""
        return [(m.att1.item(), m.att2.item()) for m in self.modules() if hasattr(m, "att1")]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def declared_parameter_count(cfg: NetworkConfig) -> int:
    """Parameter count derived from the channel plan alone (no module construction)."""
    C, m, h = cfg.channels, cfg.clusters, cfg.llf_ratio

    def conv(ci, co):
        return ci * co + co

    def pcn(ci, co):
        return conv(ci, co) + 2 * co

    def llf():
        widths = llf_widths(C, h)
        n = pcn(C, widths[0])
        if h > 1:
            n += pcn(widths[0], widths[0]) + sum(pcn(w, w) for w in widths[1:])
        return n

    def end(kind):
        return llf() if kind == "llf" else pcn(C, C)

    def ha():
        return end(cfg.ha_ends[0]) + end(cfg.ha_ends[1]) + 2 * (conv(C, C) + 2 * C) + 2

    block = {
        "piha": lambda: 2 * pcn(C, C) + ha(),
        "ha": ha,
        "llf": llf,
        "pointcn": lambda: pcn(C, C),
    }[cfg.block]
    pool = conv(C, m) + 2 * pcn(C, C) + 2 * m + conv(m, m) + conv(C, m) if cfg.use_pool else 0
    total = 0
    for k in range(cfg.extraction_stages):
        total += conv(4 if k == 0 else 5, C) + cfg.piha_per_extraction * block() + pool + conv(C, 1)
    if cfg.extraction_stages > 1:
        total += conv(cfg.extraction_stages * C, C) + cfg.integration_piha * block() + conv(C, 1)
    return total


def build_model(config: NetworkConfig, seed: int = 0, dtype=torch.float32) -> LLHANet:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = LLHANet(config).to(dtype)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


# --- checkpoint archive -----------------------------------------------------

_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_checkpoint(model: LLHANet, path, extra: Optional[dict] = None) -> Path:
    """Write a named-tensor archive plus a JSON config sidecar.

    Archive layout: 8-byte little-endian manifest length, JSON manifest
    (format version, config hash, one entry per tensor with path, shape,
    dtype, byte offset), then the raw little-endian tensor bytes.
    """
    path = Path(path)
    state = model.state_dict()
    entries, chunks, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"path": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    cfg = model.config
    manifest = {"format_version": CHECKPOINT_FORMAT, "config_hash": cfg.hash(), "tensors": entries}
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_U64.pack(len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    sidecar = {"format_version": CHECKPOINT_FORMAT, "config": cfg.to_dict(),
               "config_hash": cfg.hash(), "extra": extra or {}}
    _sidecar(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def read_archive(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    (hlen,) = _U64.unpack_from(data, 0)
    manifest = json.loads(data[8:8 + hlen])
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    base = 8 + hlen
    tensors = {}
    for e in manifest["tensors"]:
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["path"]] = torch.from_numpy(arr.copy())
    return manifest, tensors


def load_checkpoint(path, expected: Optional[NetworkConfig] = None) -> LLHANet:
    """Rebuild a model; refuses archives whose config hash disagrees with the sidecar or ``expected``."""
    path = Path(path)
    side = json.loads(_sidecar(path).read_text())
    config = NetworkConfig.from_dict(side["config"])
    manifest, tensors = read_archive(path)
    if manifest["config_hash"] != side["config_hash"] or config.hash() != side["config_hash"]:
        raise CheckpointError("checkpoint archive and config sidecar disagree")
    if expected is not None and expected.hash() != config.hash():
        raise CheckpointError(
            f"checkpoint config hash {config.hash()} does not match expected {expected.hash()}"
        )
    dtype = next(iter(tensors.values())).dtype if tensors else torch.float32
    model = LLHANet(config).to(dtype)
    model.load_state_dict(tensors)
    model.eval()
    return model


# --- inference ----------------------------------------------------------------

@dataclass
class Prediction:
    decisions: np.ndarray
    weights: np.ndarray
    logits: np.ndarray
    pose: Optional[CameraPose]
    essential: Optional[EssentialMatrix]
    low_confidence: bool = False


def infer_logits(model: nn.Module, corr: CorrespondenceSet) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(torch.as_tensor(corr.coords, dtype=dtype)[None])
    finally:
        model.train(was_training)
    return out.logits[0].double().numpy()


def predict_from_logits(corr: CorrespondenceSet, logits: np.ndarray, with_ransac: bool = False,
                        ransac_iterations: int = 1000, seed: int = 0) -> Prediction:
    """Pose from network logits, either directly or via RANSAC on accepted correspondences."""
    logits = np.asarray(logits, dtype=np.float64)
    w, _ = logits_to_weights(logits)
    decisions = (logits > 0).astype(np.float64)
    low = False
    if np.count_nonzero(w > 1e-6) < MIN_CORRESPONDENCES:
        log.warning("fewer than %d accepted correspondences; using top-%d by logit",
                    MIN_CORRESPONDENCES, MIN_CORRESPONDENCES)
        low = True
        top = np.argsort(-logits, kind="stable")[:MIN_CORRESPONDENCES]
        w = np.zeros_like(w)
        w[top] = 0.5
    keep = w > 0
    if with_ransac:
        sub = CorrespondenceSet(corr.coords[keep])
        res = ransac_essential(sub, iterations=ransac_iterations, seed=seed)
        pose = res.pose
        E = res.essential
        low = low or res.low_confidence
    else:
        E_t, degenerate = weighted_eight_point_batch(torch.from_numpy(corr.coords)[None],
                                                     torch.from_numpy(w)[None])
        E = project_to_essential(EssentialMatrix(E_t[0].numpy()))
        low = low or bool(degenerate[0])
        try:
            pose = recover_pose(E, corr, w)
        except GeometryError:
            pose, low = None, True
    return Prediction(decisions, w, logits, pose, E, low)


def predict(corr: CorrespondenceSet, model: nn.Module, with_ransac: bool = False,
            ransac_iterations: int = 1000, seed: int = 0) -> Prediction:
    corr.validate()
    return predict_from_logits(corr, infer_logits(model, corr), with_ransac, ransac_iterations, seed)
