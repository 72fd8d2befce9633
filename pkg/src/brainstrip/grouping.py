"""Split a volume's slices into groups I/II/III with HOG features and two linear SVMs."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from skimage import feature
from skimage.filters import threshold_otsu
from skimage.transform import resize

from . import morphology
from .core import GROUP_I, GROUP_II, GROUP_III, GroupPartition, Volume, normalize_intensity

log = logging.getLogger(__name__)


class Rect(NamedTuple):
    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True)
class HogParams:
    size: int = 64
    cell: int = 8
    block: int = 2
    bins: int = 9
    subrect_fraction: float = 0.6


def extract_skull_rect(pixels: np.ndarray) -> Rect:
    """Bounding box of the largest Otsu-foreground component; full image if degenerate."""
    h, w = pixels.shape
    full = Rect(0, 0, w, h)
    if pixels.max() <= pixels.min():
        return full
    fg = pixels > threshold_otsu(pixels)
    box = morphology.bbox(morphology.largest_component(fg))
    if box is None:
        return full
    r0, c0, r1, c1 = box
    return Rect(c0, r0, c1 - c0 + 1, r1 - r0 + 1)


def extract_subrect(rect: Rect, k: float, shape: tuple[int, int] | None = None) -> Rect:
    """Lower-left ``k`` fraction of ``rect`` (image rows grow downwards)."""
    if k <= 0 or k > 1:
        raise ValueError(f"sub-rectangle fraction must be in (0, 1], got {k}")
    w = max(1, int(round(rect.w * k)))
    h = max(1, int(round(rect.h * k)))
    x, y = rect.x, rect.y + rect.h - h
    if shape is not None:
        rows, cols = shape
        x = min(max(x, 0), cols - 1)
        y = min(max(y, 0), rows - 1)
        w = min(w, cols - x)
        h = min(h, rows - y)
    return Rect(x, y, w, h)


def hog_descriptor(img: np.ndarray, p: HogParams = HogParams()) -> np.ndarray:
    """HOG of an already-resized square image: centred gradients, unsigned hard binning,
    per-block L2 normalisation with one-cell block stride."""
    return feature.hog(np.asarray(img, dtype=np.float64), orientations=p.bins,
                       pixels_per_cell=(p.cell, p.cell), cells_per_block=(p.block, p.block),
                       block_norm="L2", feature_vector=True)


def hog(pixels: np.ndarray, rect: Rect, p: HogParams = HogParams()) -> np.ndarray:
    sub = pixels[rect.y:rect.y + rect.h, rect.x:rect.x + rect.w]
    sub = resize(sub.astype(np.float64), (p.size, p.size), order=1, mode="edge",
                 anti_aliasing=False, preserve_range=True)
    return hog_descriptor(sub, p)


def slice_feature(pixels: np.ndarray, p: HogParams = HogParams()) -> np.ndarray:
    """Group-classifier feature of one raw slice."""
    norm = normalize_intensity(pixels)
    rect = extract_subrect(extract_skull_rect(norm), p.subrect_fraction, norm.shape)
    return hog(norm, rect, p)


def volume_features(v: Volume, p: HogParams = HogParams()) -> np.ndarray:
    return np.stack([slice_feature(v.data[z], p) for z in range(v.nz)])


# --- linear SVM ------------------------------------------------------------

@dataclass
class LinearSvm:
    w: np.ndarray | None = None
    b: float = 0.0
    train_accuracy: float = float("nan")

    @property
    def trained(self) -> bool:
        return self.w is not None

    def decision(self, features) -> np.ndarray:
        if not self.trained:
            raise RuntimeError("SVM used before training")
        return np.asarray(features, dtype=np.float64) @ self.w + self.b

    def predict(self, features) -> np.ndarray:
        """Labels in {0, 1}; 1 where the decision value is positive."""
        return (self.decision(features) > 0).astype(np.int8)


def svm_train(features, labels, epochs: int = 400, lr: float = 0.5, reg: float = 1e-3) -> LinearSvm:
    """Hinge loss + L2 by full-batch subgradient descent; returns the best iterate seen.

    Full-batch steps keep the result deterministic and unchanged when every
    training example is duplicated.
    """
    x = np.asarray(features, dtype=np.float64)
    y01 = np.asarray(labels).astype(int)
    if x.ndim != 2 or len(x) != len(y01):
        raise ValueError("features must be (n, d) with one label per row")
    if not np.isin(y01, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if len(np.unique(y01)) < 2:
        raise ValueError("SVM training needs examples of both classes")
    y = 2.0 * y01 - 1.0
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0

    def objective(w, b):
        return np.maximum(0.0, 1.0 - y * (x @ w + b)).mean() + 0.5 * reg * (w @ w)

    best = (objective(w, b), w.copy(), b)
    for t in range(1, epochs + 1):
        margin = y * (x @ w + b)
        active = margin < 1.0
        gw = reg * w - (y[active, None] * x[active]).sum(axis=0) / n
        gb = -y[active].sum() / n
        step = lr / np.sqrt(t)
        w = w - step * gw
        b = b - step * gb
        obj = objective(w, b)
        if obj < best[0]:
            best = (obj, w.copy(), b)
    _, w, b = best
    svm = LinearSvm(w, float(b))
    svm.train_accuracy = float((svm.predict(x) == y01).mean())
    return svm


# --- Algorithms 1 and 2 -------------------------------------------------------

@dataclass(frozen=True)
class GroupRates:
    r1: float
    r2: float
    r3: float
    r4: float

    def __post_init__(self):
        if not 0 < self.r1 < self.r2 < self.r3 < self.r4 < 1:
            raise ValueError(f"rates must be ordered fractions, got {self.as_tuple()}")

    def as_tuple(self):
        return self.r1, self.r2, self.r3, self.r4


@dataclass
class GroupModels:
    m12: LinearSvm
    m23: LinearSvm
    rates: GroupRates
    hog: HogParams = HogParams()


def rates_from_partitions(parts: list[GroupPartition]) -> GroupRates:
    fr = np.array([[k / p.nz for k in p.ks] for p in parts])
    return GroupRates(*(float(v) for v in fr.mean(axis=0)))


def train_group_classifiers(subjects, hog_params: HogParams = HogParams(),
                            svm_kwargs: dict | None = None, features=None) -> GroupModels:
    """``subjects`` is a list of ``(volume, per-slice group labels)``.

    ``features`` may carry precomputed per-subject HOG matrices.
    """
    parts = [GroupPartition.from_labels(labels) for _, labels in subjects]
    rates = rates_from_partitions(parts)
    per_group = {GROUP_I: [], GROUP_II: [], GROUP_III: []}
    for i, (vol, labels) in enumerate(subjects):
        feats = features[i] if features is not None else volume_features(vol, hog_params)
        for g in per_group:
            per_group[g].append(feats[np.asarray(labels) == g])
    f1, f2, f3 = (np.concatenate(per_group[g]) for g in (GROUP_I, GROUP_II, GROUP_III))
    kw = svm_kwargs or {}
    # M12 answers 1 for group I, M23 answers 1 for group II
    m12 = svm_train(np.concatenate([f1, f2]), np.r_[np.ones(len(f1)), np.zeros(len(f2))], **kw)
    m23 = svm_train(np.concatenate([f2, f3]), np.r_[np.ones(len(f2)), np.zeros(len(f3))], **kw)
    log.info("group SVMs: M12 train acc %.3f, M23 train acc %.3f",
             m12.train_accuracy, m23.train_accuracy)
    return GroupModels(m12, m23, rates, hog_params)


def assign_groups(models: GroupModels, v: Volume | None = None, features=None,
                  window: int = 10) -> GroupPartition:
    """Locate the four group boundaries of one volume.

    Each boundary scans slice numbers (1-based)
    ``R*n - window .. R*n + window`` and cuts before the first slice whose
    classifier output flips; without a flip the cut is ``round(R*n)``.
    Windows never start before the previous boundary, so the cuts are monotone.
    """
    if not (models.m12.trained and models.m23.trained):
        raise RuntimeError("group classifiers are not trained")
    if features is None:
        features = volume_features(v, models.hog)
    n = len(features)
    pred12 = models.m12.predict(features)
    pred23 = models.m23.predict(features)
    rules = [(pred12, 0), (pred23, 0), (pred23, 1), (pred12, 1)]
    ks = []
    prev = 0
    for rate, (pred, target) in zip(models.rates.as_tuple(), rules):
        center = int(round(rate * n))
        k = None
        for sid in range(max(center - window, prev + 1, 1), min(center + window, n) + 1):
            if pred[sid - 1] == target:
                k = sid - 1
                break
        if k is None:
            k = center
        k = min(max(k, prev), n)
        ks.append(k)
        prev = k
    return GroupPartition(*ks, nz=n)
