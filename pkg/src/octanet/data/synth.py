"""Synthetic en face angiograms with exact vessel and centerline ground truth."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from ..core import AnnotationSet, BinaryMask, ConfigError, RasterImage
from .skeleton import skeletonize


@dataclass(frozen=True)
class SynthParams:
    size: int = 64
    trees: int = 3
    depth: int = 3
    width_range: tuple = (1.5, 4.0)
    capillary_density: float = 0.6  # capillary segments per 1000 pixels
    noise: float = 0.1  # speckle variance; 0 disables every noise source
    seed: int = 0

    def __post_init__(self):
        if self.size < 64:
            raise ConfigError("synthetic images must be at least 64 pixels wide")
        lo, hi = self.width_range
        if lo < 1 or hi < lo:
            raise ConfigError("width_range must satisfy 1 <= min <= max")
        if self.trees < 1 or self.depth < 1:
            raise ConfigError("trees and depth must be positive")
        if self.noise < 0 or self.capillary_density < 0:
            raise ConfigError("noise and capillary_density must be nonnegative")
        object.__setattr__(self, "width_range", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        return asdict(self)


class _Canvas:
    def __init__(self, size: int):
        self.size = size
        self.support = np.zeros((size, size), bool)
        self.intensity = np.zeros((size, size), np.float32)

    def stroke(self, pts: np.ndarray, widths: np.ndarray, level: float) -> None:
        """Paint disks of diameter ``widths`` along the sampled curve ``pts`` (x, y)."""
        n = self.size
        for (x, y), w in zip(pts, widths):
            r = max(w / 2.0, 0.5)
            reach = int(np.ceil(r)) + 1
            cy, cx = int(round(y)), int(round(x))
            y0, y1 = max(cy - reach, 0), min(cy + reach + 1, n)
            x0, x1 = max(cx - reach, 0), min(cx + reach + 1, n)
            if y0 >= y1 or x0 >= x1:
                continue
            gy, gx = np.mgrid[y0:y1, x0:x1]
            inside = (gy - y) ** 2 + (gx - x) ** 2 <= r * r
            if 0 <= cy < n and 0 <= cx < n:
                inside[cy - y0, cx - x0] = True
            self.support[y0:y1, x0:x1] |= inside
            patch = self.intensity[y0:y1, x0:x1]
            np.maximum(patch, np.where(inside, level, 0.0), out=patch)


def _bezier(p0, p1, p2, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _grow(canvas: _Canvas, rng, start, angle, width, length, depth, params) -> None:
    lo, _ = params.width_range
    end = start + length * np.array([np.cos(angle), np.sin(angle)])
    bend = rng.uniform(-0.35, 0.35) * length
    normal = np.array([-np.sin(angle), np.cos(angle)])
    ctrl = (start + end) / 2 + bend * normal
    pts = _bezier(start, ctrl, end, max(int(length * 3), 4))
    w_end = max(width * 0.8, lo)
    widths = np.linspace(width, w_end, len(pts))
    level = 0.55 + 0.4 * min(width / params.width_range[1], 1.0)
    canvas.stroke(pts, widths, level)
    if depth <= 1:
        return
    child_w = max(w_end * 0.75, lo)
    for sign in (-1, 1):
        turn = sign * rng.uniform(np.radians(20), np.radians(50))
        _grow(canvas, rng, end, angle + turn, child_w, length * rng.uniform(0.55, 0.8),
              depth - 1, params)


def _capillaries(canvas: _Canvas, rng, params) -> None:
    n = params.size
    count = rng.poisson(params.capillary_density * n * n / 1000.0)
    for _ in range(count):
        p0 = rng.uniform(0, n, 2)
        ang = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(4, max(n / 6, 6))
        p2 = p0 + length * np.array([np.cos(ang), np.sin(ang)])
        p1 = (p0 + p2) / 2 + rng.normal(0, length / 4, 2)
        pts = _bezier(p0, p1, p2, max(int(length * 3), 4))
        canvas.stroke(pts, np.ones(len(pts)), 0.35)


def synth_generate(params: SynthParams) -> tuple[RasterImage, AnnotationSet]:
    """Render branching vessel trees plus a faint capillary mesh.

    The pixel mask is the painted support; the centerline mask is its skeleton.
    With ``noise == 0`` the image is nonzero exactly on the pixel mask.
    """
    rng = np.random.default_rng(params.seed)
    n = params.size
    canvas = _Canvas(n)
    for _ in range(params.trees):
        side = rng.integers(4)
        u = rng.uniform(0.15, 0.85) * n
        start, angle = {
            0: (np.array([u, 0.0]), np.pi / 2),
            1: (np.array([u, n - 1.0]), -np.pi / 2),
            2: (np.array([0.0, u]), 0.0),
            3: (np.array([n - 1.0, u]), np.pi),
        }[int(side)]
        angle += rng.uniform(-0.4, 0.4)
        _grow(canvas, rng, start, angle, params.width_range[1], n * rng.uniform(0.3, 0.45),
              params.depth, params)
    _capillaries(canvas, rng, params)

    img = canvas.intensity.astype(np.float64)
    if params.noise > 0:
        shape = 1.0 / params.noise
        img = img * rng.gamma(shape, 1.0 / shape, img.shape)
        haze = np.abs(rng.normal(0.0, 0.5 * np.sqrt(params.noise), img.shape))
        stripes = rng.normal(0.0, 0.3 * np.sqrt(params.noise), (n, 1))
        img = img + haze + np.clip(stripes, 0, None)
    img = np.clip(img, 0.0, 1.0)

    pixel = BinaryMask(canvas.support.astype(np.uint8))
    centerline = BinaryMask(_break_crossings(skeletonize(pixel).values))
    return RasterImage(img.astype(np.float32)), AnnotationSet(pixel, centerline, thin=True)


def _break_crossings(skel: np.ndarray) -> np.ndarray:
    """Drop one pixel from each 2x2 block left where two capillaries cross.

    Such blocks are four-armed junctions that thinning must keep; annotations
    are single-pixel wide, so the label gives up that one pixel.
    """
    m = skel.astype(bool)
    while True:
        block = m[:-1, :-1] & m[1:, :-1] & m[:-1, 1:] & m[1:, 1:]
        if not block.any():
            return m.astype(np.uint8)
        r, c = np.argwhere(block)[0]
        m[r, c] = False


BUNDLED_SPLIT = {"train": 20, "test": 5, "size": 64, "noise": 0.2, "seed": 2020}


def synth_samples(count: int, params: SynthParams, first_seed: int, prefix: str = "synth"):
    """``count`` samples with consecutive seeds starting at ``first_seed``."""
    from .dataset import Sample

    out = []
    for k in range(count):
        seed = first_seed + k
        img, ann = synth_generate(replace(params, seed=seed))
        out.append(Sample(f"{prefix}_{seed:05d}", img, ann))
    return out


def bundled_split(params: SynthParams | None = None):
    """The standard synthetic benchmark: 20 training and 5 test images of 64x64."""
    params = params or SynthParams(size=BUNDLED_SPLIT["size"], noise=BUNDLED_SPLIT["noise"])
    seed = BUNDLED_SPLIT["seed"]
    train = synth_samples(BUNDLED_SPLIT["train"], params, seed)
    test = synth_samples(BUNDLED_SPLIT["test"], params, seed + 10_000)
    return train, test


def write_synthetic_dataset(root, n_train: int, n_test: int, params: SynthParams, seed: int = 0):
    """Materialize a synthetic dataset in the canonical layout plus ``manifest.txt``."""
    from pathlib import Path

    from .dataset import DatasetManifest, write_samples

    root = Path(root)
    write_samples(root, "train", synth_samples(n_train, params, seed))
    write_samples(root, "test", synth_samples(n_test, params, seed + 10_000))
    manifest = DatasetManifest(root, "synthetic")
    manifest.write(root / "manifest.txt")
    return manifest
