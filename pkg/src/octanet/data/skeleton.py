"""Topology-preserving thinning to single-pixel-wide centerlines."""
from __future__ import annotations

import numpy as np
from skimage.morphology import thin

from ..core import BinaryMask

# 8-neighborhood offsets, counter-clockwise starting east
_RING = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)]


def connectivity_number(mask: np.ndarray, r: int, c: int) -> int:
    """8-connectivity (Yokoi) number of pixel (r, c); 1 means deleting it keeps topology."""
    h, w = mask.shape
    x = []
    for dr, dc in _RING:
        rr, cc = r + dr, c + dc
        x.append(1 - int(0 <= rr < h and 0 <= cc < w and mask[rr, cc]))
    x += x[:2]
    return sum(x[k] - x[k] * x[k + 1] * x[k + 2] for k in (0, 2, 4, 6))


def ring_components(mask: np.ndarray, r: int, c: int) -> int:
    """Number of 8-connected foreground groups among the neighbors of (r, c)."""
    h, w = mask.shape
    on = [
        0 <= r + dr < h and 0 <= c + dc < w and bool(mask[r + dr, c + dc])
        for dr, dc in _RING
    ]
    parent = list(range(8))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for i in range(8):
        # ring neighbors are adjacent; edge neighbors two apart touch diagonally
        for j in ((i + 1) % 8, (i + 2) % 8 if i % 2 == 0 else None):
            if j is not None and on[i] and on[j]:
                parent[find(i)] = find(j)
    return len({find(i) for i in range(8) if on[i]})


def _remove_blocks(mask: np.ndarray) -> np.ndarray:
    """Break remaining 2x2 foreground blocks.

    Simple pixels go first; otherwise a pixel whose neighbors stay connected
    without it is removed (keeps 8-connected components, may open a hole).
    """
    m = mask.copy()
    quad = ((0, 0), (0, 1), (1, 0), (1, 1))
    changed = True
    while changed:
        changed = False
        block = m[:-1, :-1] & m[1:, :-1] & m[:-1, 1:] & m[1:, 1:]
        for r, c in zip(*np.nonzero(block)):
            if not all(m[r + dr, c + dc] for dr, dc in quad):
                continue
            cells = [(r + dr, c + dc) for dr, dc in quad]
            pick = next((p for p in cells if connectivity_number(m, *p) == 1), None)
            if pick is None:
                pick = next((p for p in cells if ring_components(m, *p) == 1), None)
            if pick is not None:
                m[pick] = False
                changed = True
    return m


def skeletonize(mask) -> BinaryMask:
    """Two-subiteration thinning followed by a 2x2-block cleanup pass.

    Output is a subset of the input with the same 8-connected components.
    A 2x2 block whose four pixels all anchor separate branches cannot be
    broken without splitting a component and is kept.
    """
    arr = np.asarray(getattr(mask, "values", mask)).astype(bool)
    if not arr.any():
        return BinaryMask(np.zeros(arr.shape, np.uint8))
    out = _remove_blocks(thin(arr))
    return BinaryMask(out.astype(np.uint8))
