"""Two-label fully connected CRF with Gaussian kernels, mean-field inference and an exact oracle.

Energy of a labelling ``x``::

    E(x) = sum_i phi_u(x_i) + sum_{i<j} mu(x_i, x_j) (w1 k_app(i, j) + w2 k_smooth(i, j))

with Potts ``mu`` (1 for differing labels). Label 1 is brain.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from .metrics import confusion, dice

log = logging.getLogger(__name__)

EXACT_LIMIT = 4096
ENUM_LIMIT = 16
FLOOR = 1e-12


@dataclass(frozen=True)
class CrfParams:
    w1: float = 1.0
    w2: float = 3.0
    sigma_alpha: float = 10.0
    sigma_beta: float = 0.1
    sigma_gamma: float = 3.0
    n_iterations: int = 10

    def __post_init__(self):
        if min(self.sigma_alpha, self.sigma_beta, self.sigma_gamma) <= 0:
            raise ValueError("CRF kernel widths must be positive")
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("CRF kernel weights must be non-negative")
        if self.n_iterations < 1:
            raise ValueError("CRF needs at least one iteration")


def potts(a: int, b: int) -> float:
    return 0.0 if a == b else 1.0


def unary_from_probs(prob) -> np.ndarray:
    """``(2, ...)`` stack of ``-log P(background)``, ``-log P(brain)``."""
    p = np.clip(np.asarray(prob, dtype=np.float64), FLOOR, 1.0 - FLOOR)
    return np.stack([-np.log1p(-p), -np.log(p)])


def pairwise_kernel(pi, pj, ii: float, ij: float, params: CrfParams) -> tuple[float, float]:
    """Appearance and smoothness kernel values between two pixels."""
    d2 = float(np.sum((np.asarray(pi, dtype=np.float64) - np.asarray(pj, dtype=np.float64)) ** 2))
    k1 = np.exp(-d2 / (2 * params.sigma_alpha ** 2) - (ii - ij) ** 2 / (2 * params.sigma_beta ** 2))
    k2 = np.exp(-d2 / (2 * params.sigma_gamma ** 2))
    return float(k1), float(k2)


def kernel_matrix(shape, intensities, params: CrfParams, dtype=np.float64) -> np.ndarray:
    """Dense ``w1 k1 + w2 k2`` over all pixel pairs with a zero diagonal."""
    h, w = shape
    rr, cc = np.divmod(np.arange(h * w), w)
    pos = np.column_stack([rr, cc]).astype(np.float64)
    inten = np.asarray(intensities, dtype=np.float64).ravel()
    n = h * w
    out = np.empty((n, n), dtype=dtype)
    step = max(1, 2 ** 22 // max(n, 1))
    for s in range(0, n, step):
        d2 = ((pos[s:s + step, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
        di = (inten[s:s + step, None] - inten[None, :]) ** 2
        k = (params.w1 * np.exp(-d2 / (2 * params.sigma_alpha ** 2) - di / (2 * params.sigma_beta ** 2))
             + params.w2 * np.exp(-d2 / (2 * params.sigma_gamma ** 2)))
        out[s:s + step] = k
    np.fill_diagonal(out, 0.0)
    return out


def gibbs_energy(labels, unary, kernel: np.ndarray) -> float:
    x = np.asarray(labels).ravel().astype(int)
    u = unary.reshape(2, -1)
    e_u = float(u[x, np.arange(x.size)].sum())
    s = x.astype(np.float64)
    # sum over unordered pairs with differing labels
    return e_u + float(s @ kernel @ (1.0 - s))


def _softmax2(neg_energy: np.ndarray) -> np.ndarray:
    m = neg_energy.max(axis=0, keepdims=True)
    e = np.exp(neg_energy - m)
    return e / e.sum(axis=0, keepdims=True)


def _mean_field_dense(u: np.ndarray, kernel: np.ndarray, n_iter: int, callback=None) -> np.ndarray:
    q = _softmax2(-u)
    for it in range(n_iter):
        msg = np.stack([kernel @ (1.0 - q[0]), kernel @ (1.0 - q[1])])
        q = _softmax2(-u - msg)
        if callback is not None:
            callback(it, q)
    return q


def _block_mean(a: np.ndarray, f: int) -> np.ndarray:
    h, w = a.shape[-2:]
    ph, pw = (-h) % f, (-w) % f
    pad = [(0, 0)] * (a.ndim - 2) + [(0, ph), (0, pw)]
    p = np.pad(a, pad, mode="edge")
    shp = p.shape[:-2] + (p.shape[-2] // f, f, p.shape[-1] // f, f)
    return p.reshape(shp).mean(axis=(-3, -1))


def _block_up(a, f, shape):
    return np.repeat(np.repeat(a, f, axis=1), f, axis=2)[:, :shape[0], :shape[1]]


def mean_field(unary: np.ndarray, intensities, params: CrfParams, callback=None):
    """Approximate marginals and labels; returns ``(mask, q)`` with ``q`` shaped like ``unary``.

    Up to 4096 pixels every pair is summed exactly. Larger slices run on a
    grid coarsened by 2x per axis until it fits, with kernel widths and
    weights rescaled to the coarse spacing, and the marginals are upsampled
    back by pixel replication.
    """
    u = np.asarray(unary, dtype=np.float64)
    shape = u.shape[1:]
    n = int(np.prod(shape))
    if n <= EXACT_LIMIT:
        dtype = np.float64 if n <= 1024 else np.float32
        k = kernel_matrix(shape, intensities, params, dtype)
        q = _mean_field_dense(u.reshape(2, -1), k, params.n_iterations, callback).reshape(u.shape)
    else:
        f = 2
        while np.prod([-(-s // f) for s in shape]) > EXACT_LIMIT:
            f *= 2
        uc = _block_mean(u, f)
        ic = _block_mean(np.asarray(intensities, dtype=np.float64), f)
        pc = replace(params, w1=params.w1 * f * f, w2=params.w2 * f * f,
                     sigma_alpha=params.sigma_alpha / f, sigma_gamma=params.sigma_gamma / f)
        k = kernel_matrix(uc.shape[1:], ic, pc, np.float32)
        qc = _mean_field_dense(uc.reshape(2, -1), k, params.n_iterations).reshape(uc.shape)
        # keep the coarse messages but swap the block-mean unary for each pixel's own
        logq = np.log(np.maximum(_block_up(qc, f, shape), FLOOR))
        q = _softmax2(logq + _block_up(uc, f, shape) - u)
    return q[1] > q[0], q


def exact_small_crf(unary: np.ndarray, intensities, params: CrfParams):
    """Enumerate every labelling; returns ``(map_labels, marginals_q, min_energy)``."""
    u = np.asarray(unary, dtype=np.float64)
    shape = u.shape[1:]
    n = int(np.prod(shape))
    if n > ENUM_LIMIT:
        raise ValueError(f"exact enumeration limited to {ENUM_LIMIT} pixels, got {n}")
    k = kernel_matrix(shape, intensities, params)
    states = ((np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1).astype(np.float64)
    uf = u.reshape(2, -1)
    energy = (1.0 - states) @ uf[0] + states @ uf[1] + np.sum((states @ k) * (1.0 - states), axis=1)
    best = int(np.argmin(energy))
    w = np.exp(-(energy - energy[best]))
    p1 = (w @ states) / w.sum()
    q = np.stack([1.0 - p1, p1]).reshape(u.shape)
    return states[best].reshape(shape).astype(bool), q, float(energy[best])


def crf_segment(prob, intensities, params: CrfParams) -> np.ndarray:
    mask, _ = mean_field(unary_from_probs(prob), intensities, params)
    return mask


def crf_window(prob: np.ndarray, intensities: np.ndarray, params: CrfParams,
               margin: int | None = None) -> np.ndarray:
    """CRF restricted to the box around ``prob > 0`` plus a margin of three smoothness widths.

    Pixels outside the box have probability 0 and stay background.
    """
    out = np.zeros(prob.shape, dtype=bool)
    box = np.argwhere(prob > 0)
    if box.size == 0:
        return out
    m = int(np.ceil(3 * params.sigma_gamma)) if margin is None else margin
    r0, c0 = np.maximum(box.min(axis=0) - m, 0)
    r1, c1 = np.minimum(box.max(axis=0) + m + 1, prob.shape)
    out[r0:r1, c0:c1] = crf_segment(prob[r0:r1, c0:c1], intensities[r0:r1, c0:c1], params)
    return out


# --- parameter search -------------------------------------------------------------

UNTUNED = CrfParams(w1=1.0, sigma_alpha=10.0, sigma_beta=0.1)


def mean_dice(items, params: CrfParams) -> float:
    scores = []
    for prob, inten, gt in items:
        scores.append(dice(confusion(crf_segment(prob, inten, params), gt)))
    return float(np.mean(scores))


def tune_params(items, trials: int = 50, seed: int = 0, base: CrfParams = CrfParams()):
    """Random search over ``(w1, sigma_alpha, sigma_beta)``, log-uniform in
    ``[0.1, 10] x [1, 80] x [0.01, 1]``; ``w2`` and ``sigma_gamma`` stay at ``base``.

    ``items`` are ``(prob map, intensities, reference mask)`` triples. Returns
    the best parameters and the trial log rows.
    """
    items = list(items)
    if not items:
        raise ValueError("CRF tuning needs at least one validation item")
    if trials < 1:
        raise ValueError("CRF tuning needs at least one trial")
    rng = np.random.default_rng(seed)
    lo = np.log([0.1, 1.0, 0.01])
    hi = np.log([10.0, 80.0, 1.0])
    best, best_score, rows = None, -np.inf, []
    for t in range(trials):
        w1, sa, sb = np.exp(rng.uniform(lo, hi))
        p = replace(base, w1=float(w1), sigma_alpha=float(sa), sigma_beta=float(sb))
        score = mean_dice(items, p)
        rows.append((t, p.w1, p.sigma_alpha, p.sigma_beta, score))
        if score > best_score:
            best, best_score = p, score
    log.info("CRF tuning: best mean Dice %.4f with %s", best_score, best)
    return best, rows


def params_state(p: CrfParams, prefix: str = "crf") -> dict:
    return {f"{prefix}.{k}": v for k, v in asdict(p).items()}


def params_from_state(s: dict, prefix: str = "crf") -> CrfParams:
    return CrfParams(**{k: s[f"{prefix}.{k}"] for k in asdict(CrfParams())})
