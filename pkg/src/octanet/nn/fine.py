"""Fine stage: learned local propagation over coarse confidence maps."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import ConfidenceMap, ConfigError, NumericError
from .coarse import CoarseOutput, to_batch
from .primitives import batch_norm


@dataclass(frozen=True)
class SrsConfig:
    m: int = 3
    hidden_channels: tuple = (32, 32, None)  # None -> m*m logits
    refine_centerline_branch: bool = True
    init_sigma: float = 1e-4

    def __post_init__(self):
        if self.m < 1 or self.m % 2 == 0:
            raise ConfigError(f"neighborhood size m must be odd, got {self.m}")
        hc = tuple(self.hidden_channels)
        if len(hc) != 3:
            raise ConfigError("hidden_channels needs exactly three entries")
        if hc[2] not in (None, self.m * self.m):
            raise ConfigError("the last layer must emit m*m logit channels")
        if not 0 < self.init_sigma < 0.1:
            raise ConfigError("init_sigma must be small and positive")
        object.__setattr__(self, "hidden_channels", (hc[0], hc[1], self.m * self.m))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_channels"] = list(self.hidden_channels)
        return d


def softmax_coefficients(logits: torch.Tensor) -> torch.Tensor:
    """Normalize (N, m*m, H, W) logits into per-pixel propagation weights."""
    return logits.softmax(dim=1)


def propagate(weights: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
    """Aggregate each pixel's m x m neighborhood with its own weights.

    ``weights`` is (N, m*m, H, W), ordered row-major over the window;
    ``source`` is (N, 1, H, W). Outside the image the source counts as zero.
    """
    n, k2, h, w = weights.shape
    if source.shape != (n, 1, h, w):
        raise ValueError(f"source shape {tuple(source.shape)} does not match weights {tuple(weights.shape)}")
    m = int(round(k2**0.5))
    if m * m != k2:
        raise ValueError(f"weight channels {k2} is not a square")
    patches = F.unfold(source, m, padding=m // 2).view(n, k2, h, w)
    return (weights * patches).sum(dim=1, keepdim=True)


class SrsNet(nn.Module):
    """Three 3x3 conv layers emitting propagation logits for the pixel map,
    plus an optional extra 3x3 layer off the second one for the centerline map.
    """

    def __init__(self, cfg: SrsConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, k2 = cfg.hidden_channels
        self.conv1 = nn.Conv2d(3, c1, 3, padding=1)
        self.bn1 = batch_norm(c1)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.bn2 = batch_norm(c2)
        self.pixel_logits = nn.Conv2d(c2, k2, 3, padding=1)
        if cfg.refine_centerline_branch:
            self.centerline_logits = nn.Conv2d(c2, k2, 3, padding=1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Near-zero kernels with a unit bias on the window-center logit."""
        center = self.cfg.m * self.cfg.m // 2
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                nn.init.normal_(mod.weight, 0.0, self.cfg.init_sigma)
                nn.init.zeros_(mod.bias)
        with torch.no_grad():
            self.pixel_logits.bias[center] = 1.0
            if self.cfg.refine_centerline_branch:
                self.centerline_logits.bias[center] = 1.0

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        h = F.relu(self.bn1(self.conv1(x)))
        h = F.relu(self.bn2(self.conv2(h)))
        out = {"pixel": softmax_coefficients(self.pixel_logits(h))}
        if self.cfg.refine_centerline_branch:
            out["centerline"] = softmax_coefficients(self.centerline_logits(h))
        return out


def build_srs(cfg: SrsConfig, seed: int) -> SrsNet:
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = SrsNet(cfg)
    finally:
        torch.random.set_rng_state(state)
    return net


def refine_tensors(net: SrsNet, img: torch.Tensor, maps: dict[str, torch.Tensor]):
    """Batched refinement.

    ``maps`` holds (N, 1, H, W) coarse maps under "pixel" and/or "centerline".
    A lone map is duplicated into both input channels and refined by the
    pixel-logit head. Returns (refined maps, fused final map).
    """
    if not maps:
        raise ValueError("need at least one coarse map to refine")
    if len(maps) == 2:
        if not net.cfg.refine_centerline_branch:
            raise ConfigError("refiner has no centerline head but two coarse maps were given")
        x = torch.cat([img, maps["pixel"], maps["centerline"]], dim=1)
        fields = net(x)
        refined = {k: propagate(fields[k], maps[k]) for k in ("pixel", "centerline")}
        return refined, torch.maximum(refined["pixel"], refined["centerline"])
    (name, single), = maps.items()
    fields = net(torch.cat([img, single, single], dim=1))
    refined = {name: propagate(fields["pixel"], single)}
    return refined, refined[name]


@torch.no_grad()
def srs_refine(net: SrsNet, img, coarse: CoarseOutput):
    """Refine the coarse maps of one image; returns (refined CoarseOutput, final map)."""
    if coarse.pixel_map is None and coarse.centerline_map is None:
        raise ValueError("no coarse maps to refine")
    was_training = net.training
    net.eval()
    try:
        dtype = next(net.parameters()).dtype
        x, size = to_batch([img])
        maps = {}
        for name, cm in (("pixel", coarse.pixel_map), ("centerline", coarse.centerline_map)):
            if cm is not None:
                maps[name] = to_batch([cm])[0].to(dtype)
        refined, final = refine_tensors(net, x.to(dtype), maps)
    finally:
        net.train(was_training)

    def crop(t):
        arr = t[0, 0, : size[0], : size[1]].numpy().astype(np.float32)
        if not np.isfinite(arr).all():
            raise NumericError("refiner produced non-finite confidences")
        return ConfidenceMap(np.clip(arr, 0.0, 1.0))

    out = CoarseOutput(
        pixel_map=crop(refined["pixel"]) if "pixel" in refined else None,
        centerline_map=crop(refined["centerline"]) if "centerline" in refined else None,
    )
    return out, crop(final)
