"""Shared domain types: images, masks, confidence maps and confusion counts."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DEFAULT_THRESHOLD = 0.5
DIVISOR = 16  # four stride-2 stages in the encoder


class OctaError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(OctaError):
    exit_code = 2
    kind = "config"


class DataError(OctaError):
    exit_code = 3
    kind = "data"


class NumericError(OctaError):
    exit_code = 4
    kind = "numeric"


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _check_2d(values: np.ndarray, name: str) -> None:
    if values.ndim != 2:
        raise DataError(f"{name} must be 2D, got shape {values.shape}")
    if min(values.shape) < 8:
        raise DataError(f"{name} must be at least 8x8, got {values.shape}")


@dataclass(frozen=True)
class RasterImage:
    """Single-channel intensity image with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        _check_2d(v, "RasterImage")
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise DataError("RasterImage values must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "RasterImage":
        return cls(np.asarray(arr, dtype=np.float32) / 255.0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    height = property(lambda self: self.values.shape[0])
    width = property(lambda self: self.values.shape[1])


@dataclass(frozen=True)
class BinaryMask:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        _check_2d(v, "BinaryMask")
        if v.dtype == bool:
            v = v.astype(np.uint8)
        elif not np.isin(v, (0, 1)).all():
            raise DataError("BinaryMask values must be 0 or 1")
        object.__setattr__(self, "values", _frozen(v.astype(np.uint8)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    height = property(lambda self: self.values.shape[0])
    width = property(lambda self: self.values.shape[1])

    def is_thin(self) -> bool:
        return is_thin(self.values)


def is_thin(mask: np.ndarray) -> bool:
    """True when no 2x2 block is entirely foreground."""
    m = np.asarray(mask, dtype=bool)
    block = m[:-1, :-1] & m[1:, :-1] & m[:-1, 1:] & m[1:, 1:]
    return not block.any()


@dataclass(frozen=True)
class AnnotationSet:
    pixel_mask: Optional[BinaryMask] = None
    centerline_mask: Optional[BinaryMask] = None
    thin: bool = field(default=False)

    def __post_init__(self):
        if self.pixel_mask is None and self.centerline_mask is None:
            raise DataError("AnnotationSet needs at least one mask")
        if (
            self.pixel_mask is not None
            and self.centerline_mask is not None
            and self.pixel_mask.shape != self.centerline_mask.shape
        ):
            raise DataError("pixel and centerline masks differ in shape")
        if self.thin and self.centerline_mask is not None and not self.centerline_mask.is_thin():
            raise DataError("centerline mask declared thin contains a 2x2 foreground block")

    @property
    def shape(self) -> tuple[int, int]:
        m = self.pixel_mask if self.pixel_mask is not None else self.centerline_mask
        return m.shape

    @property
    def mode(self) -> str:
        if self.pixel_mask is not None and self.centerline_mask is not None:
            return "dual"
        return "pixel-only" if self.pixel_mask is not None else "centerline-only"

    def union(self) -> np.ndarray:
        """Pixelwise OR of whichever masks are present."""
        out = np.zeros(self.shape, dtype=np.uint8)
        for m in (self.pixel_mask, self.centerline_mask):
            if m is not None:
                out |= m.values
        return out


@dataclass(frozen=True)
class ConfidenceMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise DataError(f"ConfidenceMap must be 2D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericError("ConfidenceMap contains non-finite values")
        if v.min() < 0 or v.max() > 1:
            raise DataError("ConfidenceMap values must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            value = int(getattr(self, name))
            if value < 0:
                raise ValueError(f"{name} must be nonnegative")
            object.__setattr__(self, name, value)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


def _values(x) -> np.ndarray:
    return x.values if hasattr(x, "values") else np.asarray(x)


def binarize(cmap, threshold: float = DEFAULT_THRESHOLD) -> BinaryMask:
    """Pixel is foreground iff its confidence is >= threshold."""
    if not 0 < threshold < 1:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    return BinaryMask((_values(cmap) >= threshold).astype(np.uint8))


def confusion(pred, gt) -> ConfusionCounts:
    p = _values(pred).astype(bool)
    g = _values(gt).astype(bool)
    if p.shape != g.shape:
        raise DataError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp=tp, fp=fp, tn=p.size - tp - fp - fn, fn=fn)


def pad_to_multiple(arr: np.ndarray, divisor: int = DIVISOR):
    """Reflect-pad the trailing two axes up to a multiple of ``divisor``.

    Returns the padded array and the original (height, width) for cropping.
    """
    h, w = arr.shape[-2:]
    ph = (-h) % divisor
    pw = (-w) % divisor
    if ph == 0 and pw == 0:
        return arr, (h, w)
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(arr, pad, mode=mode), (h, w)
