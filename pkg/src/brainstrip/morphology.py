"""Connected-component helpers for 2D binary masks (8-connectivity)."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

EIGHT = np.ones((3, 3), dtype=bool)
FOUR = ndimage.generate_binary_structure(2, 1)


def label(mask) -> tuple[np.ndarray, int]:
    return ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT)


def components(mask) -> list[np.ndarray]:
    """Boolean mask per 8-connected component, in label order."""
    labels, n = label(mask)
    return [labels == i for i in range(1, n + 1)]


def areas(labels: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(labels.ravel(), minlength=n + 1)[1:]


def centroids(labels: np.ndarray, n: int) -> np.ndarray:
    """``(n, 2)`` array of (row, col) centroids."""
    if n == 0:
        return np.zeros((0, 2))
    idx = np.arange(1, n + 1)
    return np.array(ndimage.center_of_mass(np.ones_like(labels), labels, idx)).reshape(n, 2)


def keep_labels(labels: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Mask of the components whose 1-based labels are flagged in ``keep``."""
    lut = np.concatenate([[False], np.asarray(keep, dtype=bool)])
    return lut[labels]


def remove_small(mask, min_area: int) -> np.ndarray:
    labels, n = label(mask)
    if n == 0:
        return np.zeros_like(labels, dtype=bool)
    return keep_labels(labels, areas(labels, n) >= min_area)


def largest_component(mask) -> np.ndarray:
    labels, n = label(mask)
    if n == 0:
        return np.zeros_like(labels, dtype=bool)
    a = areas(labels, n)
    # argmax takes the lowest label on ties
    return labels == int(np.argmax(a)) + 1


def fill_small_holes(mask, max_area: int) -> np.ndarray:
    """Fill background regions not touching the border with area below ``max_area``."""
    mask = np.asarray(mask, dtype=bool)
    holes, n = ndimage.label(~mask, structure=FOUR)
    if n == 0:
        return mask.copy()
    border = np.unique(np.concatenate([holes[0], holes[-1], holes[:, 0], holes[:, -1]]))
    a = areas(holes, n)
    fill = a < max_area
    fill[border[border > 0] - 1] = False
    return mask | keep_labels(holes, fill)


def bbox(mask) -> tuple[int, int, int, int] | None:
    """``(row0, col0, row1, col1)`` inclusive bounds, or ``None`` for an empty mask."""
    rows = np.flatnonzero(np.any(mask, axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(np.any(mask, axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])
