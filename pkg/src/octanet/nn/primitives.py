"""Split attention and the ResNeSt residual block.

Radix and cardinality are both fixed at two. Tensors are NCHW.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import ConfigError, NumericError

CARDINALITY = 2
RADIX = 2
REDUCTION = 16
MIN_FC_WIDTH = 4
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def batch_norm(channels: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)


def global_pool(u1: torch.Tensor, u2: torch.Tensor) -> torch.Tensor:
    """Channel statistics of the fused branches: spatial mean of ``u1 + u2``.

    Returns a tensor of shape (N, C).
    """
    if u1.shape != u2.shape:
        raise ValueError(f"branch shapes differ: {tuple(u1.shape)} vs {tuple(u2.shape)}")
    return (u1 + u2).mean(dim=(2, 3))


class SplitAttention(nn.Module):
    """Channel-wise soft attention between two parallel branches.

    Two FC layers map pooled statistics to a pair of logits per channel; a
    softmax over the pair gives weights ``a1 + a2 = 1``.
    """

    def __init__(self, channels: int, reduction: int = REDUCTION):
        super().__init__()
        hidden = max(channels // reduction, MIN_FC_WIDTH)
        self.channels = channels
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, RADIX * channels)

    def attention(self, u1: torch.Tensor, u2: torch.Tensor) -> torch.Tensor:
        """Weights of shape (N, 2, C); index 0 scales ``u1``, index 1 scales ``u2``."""
        s = global_pool(u1, u2)
        if not torch.isfinite(s).all():
            raise NumericError("non-finite activations entering split attention")
        logits = self.fc2(F.relu(self.fc1(s)))
        return logits.view(-1, RADIX, self.channels).softmax(dim=1)

    def forward(self, u1: torch.Tensor, u2: torch.Tensor) -> torch.Tensor:
        a = self.attention(u1, u2)
        return a[:, 0, :, None, None] * u1 + a[:, 1, :, None, None] * u2


@dataclass(frozen=True)
class ResNeStBlockConfig:
    in_channels: int
    out_channels: int
    stride: int = 1
    reduction: int = REDUCTION

    def __post_init__(self):
        groups = CARDINALITY * RADIX
        if self.in_channels < groups or self.in_channels % groups:
            raise ConfigError(
                f"in_channels={self.in_channels} must be a positive multiple of {groups}"
            )
        if self.out_channels < 1:
            raise ConfigError("out_channels must be positive")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def shortcut_kind(self) -> str:
        if self.stride == 1 and self.in_channels == self.out_channels:
            return "identity"
        return "projection"


class ResNeStBlock(nn.Module):
    """Two cardinal groups, each with two 1x1 -> 3x3 branches merged by split attention.

    The four branches act on disjoint quarters of the input, so they are run
    as grouped convolutions. Output is ``Z + T(x)`` with ``Z`` the 1x1 fusion
    of the concatenated cardinal outputs.
    """

    def __init__(self, cfg: ResNeStBlockConfig):
        super().__init__()
        self.cfg = cfg
        groups = CARDINALITY * RADIX
        c = cfg.in_channels
        self.branch_width = c // groups
        self.conv1 = nn.Conv2d(c, c, 1, groups=groups, bias=False)
        self.bn1 = batch_norm(c)
        self.conv2 = nn.Conv2d(
            c, c, 3, stride=cfg.stride, padding=1, groups=groups, bias=False
        )
        self.bn2 = batch_norm(c)
        self.attn = nn.ModuleList(
            SplitAttention(self.branch_width, cfg.reduction) for _ in range(CARDINALITY)
        )
        self.fuse = nn.Conv2d(CARDINALITY * self.branch_width, cfg.out_channels, 1)
        if cfg.shortcut_kind == "identity":
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c, cfg.out_channels, 1, stride=cfg.stride, bias=False),
                batch_norm(cfg.out_channels),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}"
            )
        u = F.relu(self.bn1(self.conv1(x)))
        u = F.relu(self.bn2(self.conv2(u)))
        branches = u.split(self.branch_width, dim=1)
        merged = [
            attn(branches[RADIX * k], branches[RADIX * k + 1])
            for k, attn in enumerate(self.attn)
        ]
        z = self.fuse(torch.cat(merged, dim=1))
        return z + self.shortcut(x)


def resnest_block(in_channels: int, out_channels: int, stride: int = 1, **kw) -> ResNeStBlock:
    return ResNeStBlock(ResNeStBlockConfig(in_channels, out_channels, stride, **kw))
