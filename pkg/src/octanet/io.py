"""PNG and float sidecar persistence for masks and confidence maps."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .core import BinaryMask, ConfidenceMap, DataError, RasterImage

CMAP_MAGIC = b"OCTACMAP"
CMAP_SUFFIX = ".cmap"


def read_gray_png(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG (colour inputs are converted to luminance)."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "1"):
                im = im.convert("L")
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    return arr


def write_gray_png(path, arr: np.ndarray) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path, optimize=False)


def load_image(path) -> RasterImage:
    return RasterImage.from_uint8(read_gray_png(path))


def load_mask(path) -> BinaryMask:
    arr = read_gray_png(path)
    values = np.unique(arr)
    if not set(values.tolist()) <= {0, 1, 255}:
        raise DataError(f"annotation {path} is not binary (values {values[:8].tolist()}...)")
    return BinaryMask((arr > 0).astype(np.uint8))


def save_mask(path, mask) -> None:
    v = mask.values if hasattr(mask, "values") else np.asarray(mask)
    write_gray_png(path, (v > 0).astype(np.uint8) * 255)


def save_image(path, img) -> None:
    v = img.values if hasattr(img, "values") else np.asarray(img)
    write_gray_png(path, np.round(np.clip(v, 0, 1) * 255))


def write_cmap(path, cmap) -> None:
    """Lossless float32 sidecar: magic, uint32 height and width, row-major LE data."""
    v = np.asarray(cmap.values if hasattr(cmap, "values") else cmap, dtype="<f4")
    h, w = v.shape
    with open(path, "wb") as fh:
        fh.write(CMAP_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(v).tobytes())


def read_cmap(path) -> ConfidenceMap:
    data = Path(path).read_bytes()
    if data[:8] != CMAP_MAGIC:
        raise DataError(f"{path} is not a confidence-map sidecar")
    h, w = struct.unpack("<II", data[8:16])
    body = data[16:]
    if len(body) != 4 * h * w:
        raise DataError(f"{path}: truncated sidecar ({len(body)} bytes for {h}x{w})")
    return ConfidenceMap(np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32))


def save_confidence(stem, cmap) -> tuple[Path, Path]:
    """Write ``stem.png`` (quantized view) and ``stem.cmap`` (exact values)."""
    stem = Path(stem)
    png = stem.with_suffix(".png")
    side = stem.with_suffix(CMAP_SUFFIX)
    save_image(png, cmap)
    write_cmap(side, cmap)
    return png, side


DISPLAY_WIDTH = 7


def widen_for_display(mask, width: int = DISPLAY_WIDTH) -> np.ndarray:
    """Dilate a thin centerline to ``width`` pixels with a disk. Display only, never a training target."""
    from scipy import ndimage

    if width < 1 or width % 2 == 0:
        raise ValueError("display width must be a positive odd number")
    m = np.asarray(getattr(mask, "values", mask)).astype(bool)
    r = width // 2
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return ndimage.binary_dilation(m, structure=yy**2 + xx**2 <= r * r)


def save_overlay(path, img, centerline=None, pred=None, width: int = DISPLAY_WIDTH) -> None:
    """RGB figure: image in gray, prediction in green, widened centerline in red."""
    base = np.clip(np.asarray(getattr(img, "values", img), dtype=np.float32), 0, 1)
    rgb = np.repeat(base[..., None], 3, axis=2)
    if pred is not None:
        p = np.asarray(getattr(pred, "values", pred)).astype(bool)
        rgb[p] = (0.1, 0.9, 0.1)
    if centerline is not None:
        rgb[widen_for_display(centerline, width)] = (0.9, 0.1, 0.1)
    Image.fromarray(np.round(rgb * 255).astype(np.uint8), mode="RGB").save(path)
