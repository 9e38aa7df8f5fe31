"""Permutation-equivariant building blocks over correspondence feature maps.

All blocks take and return tensors laid out as ``(B, C, N)``: batch,
channels, correspondences. Every learnable map is a 1x1 convolution so
that rows (correspondences) never mix except through symmetric pooling.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-5


class ConfigurationError(ValueError):
    pass


class Conv1x1(nn.Conv1d):
    """1x1 convolution evaluated as a batched matmul (the generic conv path is slow on CPU)."""

    def forward(self, x):
        return torch.matmul(self.weight.squeeze(-1), x) + self.bias.unsqueeze(-1)


def conv1x1(c_in: int, c_out: int) -> Conv1x1:
    conv = Conv1x1(c_in, c_out, kernel_size=1)
    nn.init.normal_(conv.weight, std=1.0 / math.sqrt(c_in))
    nn.init.zeros_(conv.bias)
    return conv


def context_norm(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Zero-mean, unit-variance across the correspondence axis, per channel and instance."""
    if x.shape[-1] < 2:
        raise ValueError("context normalization needs at least 2 correspondences")
    return F.instance_norm(x, eps=eps)


class PointCN(nn.Module):
    """1x1 conv -> context norm -> batch norm -> ReLU.

    The same composition serves as the convolution block wrapped around the
    attention module (instance norm over N is context norm).
    """

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.conv = conv1x1(c_in, c_out)
        self.bn = nn.BatchNorm1d(c_out, eps=NORM_EPS)

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ValueError(f"expected {self.c_in} channels, got {x.shape[1]}")
        return F.relu(self.bn(context_norm(self.conv(x))))


def llf_widths(channels: int, ratio: int) -> list:
    """Channel ladder ``C/h, 2C/h, ..., C`` of the layer-by-layer fusion module."""
    if ratio < 1 or ratio & (ratio - 1):
        raise ConfigurationError(f"LLF ratio must be a power of two, got {ratio}")
    if channels % ratio:
        raise ConfigurationError(f"channels {channels} not divisible by LLF ratio {ratio}")
    base = channels // ratio
    return [base * 2**k for k in range(int(math.log2(ratio)) + 1)]


class LLF(nn.Module):
    """Layer-by-layer channel fusion.

    A PointCN first shrinks ``C`` to ``C/h``; one more PointCN at that width
    gives the first stage's output. Each later stage concatenates the
    previous stage's input and output (doubling the width) and applies a
    width-preserving PointCN, until the width is back to ``C``.
    """

    def __init__(self, channels: int, ratio: int = 4):
        super().__init__()
        self.widths = llf_widths(channels, ratio)
        if self.widths[-1] != channels:
            raise ConfigurationError("LLF ladder does not return to the input width")
        self.down = PointCN(channels, self.widths[0])
        self.stages = nn.ModuleList()
        if ratio > 1:
            self.stages.append(PointCN(self.widths[0], self.widths[0]))
            for w in self.widths[1:]:
                self.stages.append(PointCN(w, w))

    def forward(self, x):
        f_in = self.down(x)
        if not len(self.stages):
            return f_in
        f_out = self.stages[0](f_in)
        for pcn in self.stages[1:]:
            f_in = torch.cat([f_in, f_out], dim=1)
            f_out = pcn(f_in)
        return f_out


def _end_module(kind: str, channels: int, ratio: int) -> nn.Module:
    if kind == "llf":
        return LLF(channels, ratio)
    if kind == "pointcn":
        return PointCN(channels, channels)
    raise ConfigurationError(f"unknown attention end module {kind!r}")


class HA(nn.Module):
    """Hierarchical attention.

    ``F_l1 = end_in(F)``; a pooled global vector and a per-point structural
    map are each passed through 1x1 conv + batch norm, mixed with the
    learned scalars ``att1``/``att2``, and used to rescale ``F_l1`` before
    ``end_out``.
    """

    def __init__(self, channels: int, ratio: int = 4, pool: str = "gap",
                 ends=("llf", "llf"), gated: bool = False):
        super().__init__()
        if pool not in ("gap", "gmp"):
            raise ConfigurationError(f"pool must be 'gap' or 'gmp', got {pool!r}")
        self.pool = pool
        self.gated = gated
        self.end_in = _end_module(ends[0], channels, ratio)
        self.end_out = _end_module(ends[1], channels, ratio)
        self.global_conv = conv1x1(channels, channels)
        self.global_bn = nn.BatchNorm1d(channels, eps=NORM_EPS)
        self.struct_conv = conv1x1(channels, channels)
        self.struct_bn = nn.BatchNorm1d(channels, eps=NORM_EPS)
        self.att1 = nn.Parameter(torch.tensor(1.0))
        self.att2 = nn.Parameter(torch.tensor(1.0))

    def global_features(self, f_l1):
        pooled = f_l1.mean(-1, keepdim=True) if self.pool == "gap" else f_l1.amax(-1, keepdim=True)
        return self.global_bn(self.global_conv(pooled))

    def attention(self, f_l1):
        f_global = self.global_features(f_l1)
        f_struct = self.struct_bn(self.struct_conv(f_l1))
        f_att = self.att1 * f_struct + self.att2 * f_global
        return torch.sigmoid(f_att) if self.gated else f_att

    def forward(self, x):
        f_l1 = self.end_in(x)
        f_m = f_l1 * self.attention(f_l1)
        return self.end_out(f_m)


class PIHA(nn.Module):
    """Conv block -> hierarchical attention -> conv block, with an identity skip."""

    def __init__(self, channels: int, ratio: int = 4, pool: str = "gap",
                 ends=("llf", "llf"), gated: bool = False):
        super().__init__()
        self.pre = PointCN(channels, channels)
        self.ha = HA(channels, ratio, pool, ends, gated)
        self.post = PointCN(channels, channels)

    def forward(self, x):
        return x + self.post(self.ha(self.pre(x)))


class Residual(nn.Module):
    """``x + body(x)``; used to stack the simpler blocks in ablations."""

    def __init__(self, body: nn.Module):
        super().__init__()
        self.body = body

    def forward(self, x):
        return x + self.body(x)


class DiffPool(nn.Module):
    """Soft-assign N points to m clusters; returns ``(B, C, m)`` cluster features.

    Each cluster is a convex combination of the points (the assignment is
    normalized over N), which keeps the pooled scale independent of N.
    """

    def __init__(self, channels: int, clusters: int):
        super().__init__()
        self.clusters = clusters
        self.conv = conv1x1(channels, clusters)

    def assignment(self, x):
        return torch.softmax(self.conv(x), dim=2)  # (B, m, N), rows sum to 1 over points

    def forward(self, x):
        if self.clusters > x.shape[-1]:
            raise ConfigurationError(f"{self.clusters} clusters exceed {x.shape[-1]} correspondences")
        return torch.bmm(x, self.assignment(x).transpose(1, 2))


class DiffUnpool(nn.Module):
    """Scatter cluster features back to points with attention computed from the original map."""

    def __init__(self, channels: int, clusters: int):
        super().__init__()
        self.conv = conv1x1(channels, clusters)

    def forward(self, x_points, x_clusters):
        attn = torch.softmax(self.conv(x_points), dim=1)  # (B, m, N)
        return torch.bmm(x_clusters, attn)


class OrderAwareFilter(nn.Module):
    """PointCN over clusters, a 1x1 conv mixing along the cluster axis, PointCN again."""

    def __init__(self, channels: int, clusters: int):
        super().__init__()
        self.pcn1 = PointCN(channels, channels)
        self.mix_bn = nn.BatchNorm1d(clusters, eps=NORM_EPS)
        self.mix_conv = conv1x1(clusters, clusters)
        self.pcn2 = PointCN(channels, channels)

    def forward(self, x):
        h = self.pcn1(x)
        mixed = self.mix_conv(F.relu(self.mix_bn(h.transpose(1, 2)))).transpose(1, 2)
        h = self.pcn2(h + mixed)
        return x + h


class PoolOAUnpool(nn.Module):
    def __init__(self, channels: int, clusters: int):
        super().__init__()
        if clusters < 2:
            raise ConfigurationError("pool/filter/unpool needs at least 2 clusters")
        self.pool = DiffPool(channels, clusters)
        self.filter = OrderAwareFilter(channels, clusters)
        self.unpool = DiffUnpool(channels, clusters)

    def forward(self, x):
        clusters = self.filter(self.pool(x))
        return x + self.unpool(x, clusters)


BLOCK_KINDS = ("pointcn", "llf", "ha", "piha")


def make_block(kind: str, channels: int, ratio: int = 4, pool: str = "gap",
               ends=("llf", "llf"), gated: bool = False) -> nn.Module:
    if kind == "piha":
        return PIHA(channels, ratio, pool, ends, gated)
    if kind == "ha":
        return Residual(HA(channels, ratio, pool, ends, gated))
    if kind == "llf":
        return Residual(LLF(channels, ratio))
    if kind == "pointcn":
        return Residual(PointCN(channels, channels))
    raise ConfigurationError(f"unknown block kind {kind!r}")
