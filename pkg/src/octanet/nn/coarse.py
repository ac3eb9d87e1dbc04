"""Coarse stage: U-shaped ResNeSt network with an optional centerline decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import ConfidenceMap, ConfigError, NumericError, pad_to_multiple
from .primitives import batch_norm, resnest_block

DEPTH = 5
PRESETS = {"full": 64, "tiny": 8}


@dataclass(frozen=True)
class CoarseNetConfig:
    base_width: int = 64
    depth: int = DEPTH
    dual_branch: bool = True
    shared_stages: int = 3
    centerline_blocks: int = 2

    def __post_init__(self):
        if self.depth != DEPTH:
            raise ConfigError(f"the coarse network has exactly {DEPTH} encoder stages")
        if self.base_width < 4 or self.base_width % 4:
            raise ConfigError("base_width must be a positive multiple of 4")
        if not 1 <= self.shared_stages <= self.depth:
            raise ConfigError("shared_stages must lie in [1, depth]")
        if self.dual_branch and self.centerline_blocks < 1:
            raise ConfigError("dual-branch network needs at least one centerline block")

    @classmethod
    def preset(cls, name: str, **overrides) -> "CoarseNetConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(base_width=PRESETS[name], **overrides)

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2**k for k in range(self.depth)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CoarseOutput:
    pixel_map: Optional[ConfidenceMap] = None
    centerline_map: Optional[ConfidenceMap] = None

    def __post_init__(self):
        maps = [m for m in (self.pixel_map, self.centerline_map) if m is not None]
        if not maps:
            raise ValueError("CoarseOutput needs at least one map")
        if len(maps) == 2 and maps[0].shape != maps[1].shape:
            raise ValueError("coarse maps differ in shape")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.pixel_map or self.centerline_map).shape

    def fused(self) -> np.ndarray:
        """Elementwise max of the available maps."""
        maps = [m.values for m in (self.pixel_map, self.centerline_map) if m is not None]
        return np.maximum.reduce(maps) if len(maps) > 1 else maps[0]


class CoarseNet(nn.Module):
    """Five ResNeSt encoder stages, four upsampling decoder stages with skips.

    In dual-branch mode the centerline head hangs off the output of encoder
    stage ``shared_stages`` through a few ResNeSt blocks and one bilinear
    upsampling back to full resolution.
    """

    def __init__(self, cfg: CoarseNetConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.stem = nn.Sequential(
            nn.Conv2d(1, w[0], 3, padding=1, bias=False), batch_norm(w[0]), nn.ReLU(inplace=True)
        )
        self.encoder = nn.ModuleList(
            resnest_block(w[0] if k == 0 else w[k - 1], w[k], stride=1 if k == 0 else 2)
            for k in range(cfg.depth)
        )
        self.decoder = nn.ModuleList(
            resnest_block(w[k + 1] + w[k], w[k]) for k in range(cfg.depth - 1)
        )
        self.pixel_head = nn.Conv2d(w[0], 1, 1)
        if cfg.dual_branch:
            cw = w[cfg.shared_stages - 1]
            self.centerline_blocks = nn.Sequential(
                *(resnest_block(cw, cw) for _ in range(cfg.centerline_blocks))
            )
            self.centerline_scale = 2 ** (cfg.shared_stages - 1)
            self.centerline_head = nn.Conv2d(cw, 1, 1)

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """Map an (N, 1, H, W) batch to sigmoid confidence maps of the same size.

        H and W must be multiples of 16.
        """
        feats = []
        h = self.stem(x)
        for stage in self.encoder:
            h = stage(h)
            feats.append(h)
        out = {}
        if self.cfg.dual_branch:
            c = self.centerline_blocks(feats[self.cfg.shared_stages - 1])
            if self.centerline_scale > 1:
                c = F.interpolate(
                    c, scale_factor=self.centerline_scale, mode="bilinear", align_corners=False
                )
            out["centerline"] = torch.sigmoid(self.centerline_head(c))
        h = feats[-1]
        for k in reversed(range(self.cfg.depth - 1)):
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = self.decoder[k](torch.cat([h, feats[k]], dim=1))
        out["pixel"] = torch.sigmoid(self.pixel_head(h))
        return out


def build_coarse(cfg: CoarseNetConfig, seed: int) -> CoarseNet:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = CoarseNet(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return net


def to_batch(images) -> tuple[torch.Tensor, tuple[int, int]]:
    """Stack images into a padded (N, 1, H, W) tensor; returns the crop size."""
    arrs = [np.asarray(getattr(im, "values", im), dtype=np.float32) for im in images]
    stacked, size = pad_to_multiple(np.stack(arrs)[:, None])
    return torch.from_numpy(np.ascontiguousarray(stacked)), size


def _as_map(t: torch.Tensor, size: tuple[int, int]) -> ConfidenceMap:
    arr = t[..., : size[0], : size[1]].detach().cpu().numpy().astype(np.float32)
    if not np.isfinite(arr).all():
        raise NumericError("coarse network produced non-finite confidences")
    return ConfidenceMap(arr)


@torch.no_grad()
def coarse_forward(net: CoarseNet, img) -> CoarseOutput:
    """Inference on one image; pads to a multiple of 16 and crops back."""
    was_training = net.training
    net.eval()
    try:
        x, size = to_batch([img])
        x = x.to(next(net.parameters()).dtype)
        out = net(x)
    finally:
        net.train(was_training)
    return CoarseOutput(
        pixel_map=_as_map(out["pixel"][0, 0], size),
        centerline_map=_as_map(out["centerline"][0, 0], size) if "centerline" in out else None,
    )
