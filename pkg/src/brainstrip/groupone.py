"""Small end slices (group I): centroid trajectory by Gaussian-process regression and a rule cascade."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.linalg import cho_factor, cho_solve
from skimage.morphology import disk

from . import morphology
from .crf import CrfParams, crf_window

log = logging.getLogger(__name__)

GP_LO, GP_HI = 1.0, 100.0
ELL_GRID = (5.0, 10.0, 20.0, 40.0)
SF2_GRID = (0.5, 1.0, 2.0)
SN2_GRID = (0.01, 0.1, 1.0)


@dataclass(frozen=True)
class GroupOneParams:
    alpha_area: float = 0.4
    beta_dist: float = 1.75
    denoise_min: int = 5
    threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.alpha_area <= 1:
            raise ValueError("groupone.alpha_area must be in (0, 1]")
        if self.beta_dist < 1:
            raise ValueError("groupone.beta_dist must be >= 1")
        if self.denoise_min < 0:
            raise ValueError("groupone.denoise_min must be >= 0")
        if not 0 < self.threshold < 1:
            raise ValueError("groupone.threshold must be in (0, 1)")


def convert_range(a: float, b: float, c: float, d: float, x):
    """Map ``x`` linearly from ``[a, b]`` onto ``[c, d]``."""
    if b == a:
        raise ZeroDivisionError("convert_range needs a != b")
    return c + (x - a) * (d - c) / (b - a)


def centroid_norm(mask) -> float:
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("centroid of an empty mask")
    rc = np.argwhere(m).mean(axis=0)
    return float(np.hypot(rc[0], rc[1]))


# --- Gaussian process ---------------------------------------------------------------

def se_kernel(a, b, ell: float, sf2: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)[:, None]
    b = np.asarray(b, dtype=np.float64)[None, :]
    return sf2 * np.exp(-0.5 * (a - b) ** 2 / ell ** 2)


@dataclass
class GpModel:
    x: np.ndarray
    y: np.ndarray
    ell: float
    sf2: float
    sn2: float
    mean: float
    chol: tuple | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        if min(self.ell, self.sf2, self.sn2) <= 0:
            raise ValueError("GP hyperparameters must be positive")
        if self.chol is None:
            k = se_kernel(self.x, self.x, self.ell, self.sf2) + self.sn2 * np.eye(len(self.x))
            self.chol = cho_factor(k, lower=True)
            self.weights = cho_solve(self.chol, self.y - self.mean)

    def log_marginal_likelihood(self) -> float:
        r = self.y - self.mean
        logdet = 2.0 * np.sum(np.log(np.diag(self.chol[0])))
        return float(-0.5 * r @ self.weights - 0.5 * logdet - 0.5 * len(r) * math.log(2 * math.pi))


def _subject_points(entry):
    pos, vals = np.asarray(entry[0], dtype=np.float64), np.asarray(entry[1], dtype=np.float64)
    if len(entry) > 2 and entry[2] is not None:
        b, e = entry[2]
    else:
        b, e = pos.min(), pos.max()
    if len(pos) > 1 and np.any(np.diff(pos) <= 0):
        raise ValueError("positions must be strictly increasing within a subject")
    return convert_range(b, e, GP_LO, GP_HI, pos), vals


def gp_fit(subjects, hyper: tuple[float, float, float] | None = None,
           prior_mean: float | None = None) -> GpModel:
    """Pool ``(positions, values[, (b, e)])`` entries mapped to [1, 100] and fit a GP.

    Without ``hyper = (ell, sf2, sn2)`` the grid maximising the log marginal
    likelihood is used, with ``sf2`` and ``sn2`` scaled by the target variance.
    """
    xs, ys = [], []
    for entry in subjects:
        x, y = _subject_points(entry)
        xs.append(x)
        ys.append(y)
    x = np.concatenate(xs) if xs else np.zeros(0)
    y = np.concatenate(ys) if ys else np.zeros(0)
    if len(x) < 3:
        raise ValueError("GP fit needs at least 3 points")
    mean = float(y.mean()) if prior_mean is None else float(prior_mean)
    if hyper is not None:
        return GpModel(x, y, *hyper, mean)
    var = max(float(y.var()), 1e-6)
    best = None
    for ell, sf, sn in itertools.product(ELL_GRID, SF2_GRID, SN2_GRID):
        m = GpModel(x, y, ell, sf * var, sn * var, mean)
        lml = m.log_marginal_likelihood()
        if best is None or lml > best[0]:
            best = (lml, m)
    log.info("GP: ell=%.1f sf2=%.3g sn2=%.3g over %d points", best[1].ell, best[1].sf2,
             best[1].sn2, len(x))
    return best[1]


def gp_predict(model: GpModel | None, pos):
    """Posterior mean and variance at ``pos`` (scalar or array on the [1, 100] scale)."""
    if model is None or model.chol is None:
        raise RuntimeError("GP model is not fitted")
    q = np.atleast_1d(np.asarray(pos, dtype=np.float64))
    ks = se_kernel(q, model.x, model.ell, model.sf2)
    mu = model.mean + ks @ model.weights
    v = cho_solve(model.chol, ks.T)
    var = np.maximum(model.sf2 - np.sum(ks * v.T, axis=1), 0.0)
    if np.ndim(pos) == 0:
        return float(mu[0]), float(var[0])
    return mu, var


def gp_state(m: GpModel, prefix: str = "gp") -> dict:
    return {f"{prefix}.x": m.x, f"{prefix}.y": m.y, f"{prefix}.ell": m.ell,
            f"{prefix}.sf2": m.sf2, f"{prefix}.sn2": m.sn2, f"{prefix}.mean": m.mean}


def gp_from_state(s: dict, prefix: str = "gp") -> GpModel:
    return GpModel(s[f"{prefix}.x"], s[f"{prefix}.y"], s[f"{prefix}.ell"], s[f"{prefix}.sf2"],
                   s[f"{prefix}.sn2"], s[f"{prefix}.mean"])


def estimate_shift(items, model: GpModel) -> float:
    """Mean of ``centroid_norm(mask) - prediction`` over ``(gp position, mask)`` pairs."""
    devs = [centroid_norm(m) - gp_predict(model, p)[0] for p, m in items if np.any(m)]
    if not devs:
        raise ValueError("no non-empty masks to estimate the shift from")
    return float(np.mean(devs))


# --- component rules --------------------------------------------------------------------

def check_center(x, y) -> np.ndarray:
    """Drop components of ``x`` whose centroid is outside the closed bounding box of ``y``."""
    x = np.asarray(x, dtype=bool)
    box = morphology.bbox(np.asarray(y, dtype=bool))
    if box is None:
        return x.copy()
    r0, c0, r1, c1 = box
    labels, n = morphology.label(x)
    if n == 0:
        return x.copy()
    cen = morphology.centroids(labels, n)
    keep = (cen[:, 0] >= r0) & (cen[:, 0] <= r1) & (cen[:, 1] >= c0) & (cen[:, 1] <= c1)
    return morphology.keep_labels(labels, keep)


def check_area(x, alpha: float) -> np.ndarray:
    """Drop components smaller than ``alpha`` times the largest one."""
    labels, n = morphology.label(x)
    if n == 0:
        return np.zeros_like(labels, dtype=bool)
    a = morphology.areas(labels, n)
    return morphology.keep_labels(labels, a >= alpha * a.max())


def check_distance(x, d: float, beta: float) -> np.ndarray:
    """Keep components whose centroid norm differs from ``d`` by at most ``beta`` times the best."""
    labels, n = morphology.label(x)
    if n == 0:
        return np.zeros_like(labels, dtype=bool)
    cen = morphology.centroids(labels, n)
    dif = np.abs(d - np.hypot(cen[:, 0], cen[:, 1]))
    return morphology.keep_labels(labels, dif <= beta * dif.min())


def merge_slice(x, y, alpha: int, hole_area: int = 10) -> np.ndarray:
    """Core of ``y`` (eroded by a disk of radius ``alpha``) joined with ``x`` inside ``y``'s rim."""
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    core = ndimage.binary_erosion(y, disk(alpha)) if alpha > 0 else y.copy()
    rim = y & ~core
    return morphology.fill_small_holes(core | (x & rim), hole_area)


def denoise(x, min_area: int = 5) -> np.ndarray:
    return morphology.remove_small(x, min_area)


# --- cascade --------------------------------------------------------------------------

def cascade_step(prob, intensities, reference, d: float, params: GroupOneParams,
                 crf_params: CrfParams) -> np.ndarray:
    c = np.asarray(prob) >= params.threshold
    c = denoise(c, params.denoise_min)
    c = check_center(c, reference)
    c = check_area(c, params.alpha_area)
    c = check_distance(c, d, params.beta_dist)
    if not c.any():
        return c
    return crf_window(np.where(c, prob, 0.0), intensities, crf_params)


def process_group_one(prob, intensities, k1: int, k4: int, finals, gp: GpModel, shift: float,
                      params: GroupOneParams = GroupOneParams(),
                      crf_params: CrfParams = CrfParams()) -> dict[int, np.ndarray]:
    """Run both sweeps over slices ``k1-1 .. 0`` and ``k4 .. nz-1``.

    ``prob`` and ``intensities`` are ``(nz, ny, nx)``; ``finals`` maps slice
    index to the final group II/III masks and must hold the anchors ``k1``
    and ``k4 - 1`` when the matching sweep is non-empty. Returns the new
    masks by slice index.
    """
    nz = prob.shape[0]
    b, e = 0, nz - 1
    out: dict[int, np.ndarray] = {}
    sweeps = [(list(range(k1 - 1, -1, -1)), k1), (list(range(k4, nz)), k4 - 1)]
    for order, anchor in sweeps:
        if not order:
            continue
        ref = finals.get(anchor) if 0 <= anchor < nz else None
        if ref is None or not np.any(ref):
            raise ValueError(f"anchor slice {anchor} has an empty final mask")
        for i in order:
            d = gp_predict(gp, convert_range(b, e, GP_LO, GP_HI, i))[0] + shift
            out[i] = cascade_step(prob[i], intensities[i], ref, d, params, crf_params)
            ref = out[i]
    return out
