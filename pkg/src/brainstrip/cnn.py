"""Pixel classifier: three-slice patch streams through a shared conv trunk, then FC layers.

Everything is plain numpy in float64, channels-last. Per stream: 3x3 same-padded
convolutions with ReLU and 2x2 ceil-mode max-pooling (11 -> 6 -> 3 -> 2), then a
ReLU projection to ``stream_width`` units. The three stream vectors, the three
normalised coordinates and zero padding form the first FC layer of width
``fc[0]``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class CnnConfig:
    patch: int = 11
    conv: tuple[int, ...] = (13, 26, 39)
    stream_width: int = 190
    fc: tuple[int, ...] = (574, 300, 50, 2)
    dropout: float = 0.5
    conv_std: float = 0.1

    def __post_init__(self):
        if self.patch < 1 or self.patch % 2 == 0:
            raise ValueError("cnn.patch must be a positive odd size")
        if not self.conv or min(self.conv) < 1:
            raise ValueError("cnn.conv depths must be positive")
        if len(self.fc) < 2 or self.fc[-1] != 2:
            raise ValueError("cnn.fc must end with the 2-unit output layer")
        if self.pad_units < 0:
            raise ValueError(f"cnn.fc[0]={self.fc[0]} is smaller than 3*stream_width+3")
        if not 0 <= self.dropout < 1:
            raise ValueError("cnn.dropout must be in [0, 1)")

    @property
    def pooled_side(self) -> int:
        s = self.patch
        for _ in self.conv:
            s = math.ceil(s / 2)
        return s

    @property
    def flat(self) -> int:
        return self.pooled_side ** 2 * self.conv[-1]

    @property
    def pad_units(self) -> int:
        return self.fc[0] - 3 * self.stream_width - 3


@dataclass(frozen=True)
class AdamConfig:
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eta: float = 0.005


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


@dataclass
class CnnModel:
    config: CnnConfig
    params: dict = field(default_factory=dict)

    def weight_names(self) -> list[str]:
        return [k for k in self.params if k.endswith(".w")]


def param_names(cfg: CnnConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """``(name, shape, kind)`` in a fixed order; kind is conv, fc or bias."""
    out = []
    c_in = 1
    for i, depth in enumerate(cfg.conv):
        out.append((f"conv{i}.w", (9 * c_in, depth), "conv"))
        out.append((f"conv{i}.b", (depth,), "bias"))
        c_in = depth
    out.append(("proj.w", (cfg.flat, cfg.stream_width), "fc"))
    out.append(("proj.b", (cfg.stream_width,), "bias"))
    for i in range(len(cfg.fc) - 1):
        out.append((f"fc{i}.w", (cfg.fc[i], cfg.fc[i + 1]), "fc"))
        out.append((f"fc{i}.b", (cfg.fc[i + 1],), "bias"))
    return out


def init_weights(cfg: CnnConfig = CnnConfig(), seed: int = 0) -> CnnModel:
    """Conv kernels ~ N(0, conv_std^2); FC weights ~ N(0, 1/fan_in); biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in param_names(cfg):
        if kind == "conv":
            params[name] = rng.normal(0.0, cfg.conv_std, size=shape)
        elif kind == "fc":
            params[name] = rng.normal(0.0, math.sqrt(1.0 / shape[0]), size=shape)
        else:
            params[name] = np.zeros(shape)
    return CnnModel(cfg, params)


# --- layers -----------------------------------------------------------------------

def im2col(x: np.ndarray) -> np.ndarray:
    """``(B, H, W, C)`` -> ``(B, H, W, 9C)`` 3x3 neighbourhoods with zero padding."""
    b, h, w, c = x.shape
    p = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return np.concatenate([p[:, dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)],
                          axis=3)


def col2im(dcols: np.ndarray, c: int) -> np.ndarray:
    b, h, w, _ = dcols.shape
    dp = np.zeros((b, h + 2, w + 2, c))
    i = 0
    for dy in range(3):
        for dx in range(3):
            dp[:, dy:dy + h, dx:dx + w] += dcols[..., i * c:(i + 1) * c]
            i += 1
    return dp[:, 1:-1, 1:-1]


def conv_forward(x, w, b):
    cols = im2col(x)
    return cols @ w + b, cols


def conv_backward(dout, cols, w, c_in):
    k = w.shape[1]
    dw = cols.reshape(-1, cols.shape[-1]).T @ dout.reshape(-1, k)
    db = dout.sum(axis=(0, 1, 2))
    dx = col2im(dout @ w.T, c_in)
    return dx, dw, db


def pool_forward(x):
    """2x2 max-pool, ceil mode (odd edges padded with -inf)."""
    b, h, w, c = x.shape
    ph, pw = h % 2, w % 2
    p = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), constant_values=-np.inf)
    h2, w2 = p.shape[1] // 2, p.shape[2] // 2
    blocks = p.reshape(b, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def pool_backward(dout, cache):
    arg, shape = cache
    b, h, w, c = shape
    h2, w2 = dout.shape[1], dout.shape[2]
    blocks = np.zeros((b, h2, w2, c, 4))
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    full = blocks.reshape(b, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, 2 * h2, 2 * w2, c)
    return full[:, :h, :w]


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# --- network ------------------------------------------------------------------------

def forward(model: CnnModel, patches, coords, train: bool = False, rng=None):
    """Class probabilities ``(B, 2)`` (column 1 is brain) and a cache for ``backward``.

    ``patches`` is ``(B, 3, p, p)``; ``coords`` is ``(B, 3)``. Inverted dropout
    runs only when ``train`` is set and needs ``rng``.
    """
    cfg, P = model.config, model.params
    patches = np.asarray(patches, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    bsz = patches.shape[0]
    # the three slices share one trunk: fold them into the batch axis
    h = patches.reshape(bsz * 3, cfg.patch, cfg.patch, 1)
    cache = {"conv": []}
    for i in range(len(cfg.conv)):
        z, cols = conv_forward(h, P[f"conv{i}.w"], P[f"conv{i}.b"])
        a = np.maximum(z, 0.0)
        h, pc = pool_forward(a)
        cache["conv"].append((cols, z, pc))
    flat = h.reshape(bsz * 3, -1)
    zp = flat @ P["proj.w"] + P["proj.b"]
    ap = np.maximum(zp, 0.0)
    cache["proj"] = (flat, zp)
    x = np.concatenate([ap.reshape(bsz, 3 * cfg.stream_width), coords,
                        np.zeros((bsz, cfg.pad_units))], axis=1)
    n_fc = len(cfg.fc) - 1
    cache["fc"] = []
    for i in range(n_fc):
        mask = None
        if train and cfg.dropout > 0:
            keep = 1.0 - cfg.dropout
            mask = (rng.random(x.shape) < keep) / keep
            x = x * mask
        z = x @ P[f"fc{i}.w"] + P[f"fc{i}.b"]
        cache["fc"].append((x, z, mask))
        x = np.maximum(z, 0.0) if i < n_fc - 1 else z
    probs = softmax(x)
    cache["probs"] = probs
    return probs, cache


def l2_penalty(model: CnnModel, eta: float) -> float:
    return 0.5 * eta * sum(float(np.sum(model.params[k] ** 2)) for k in model.weight_names())


def cross_entropy(probs, labels) -> float:
    labels = np.asarray(labels).astype(int)
    p = np.clip(probs[np.arange(len(labels)), labels], PROB_FLOOR, 1.0)
    return float(-np.mean(np.log(p)))


def loss(model: CnnModel, patches, coords, labels, eta: float = AdamConfig.eta) -> float:
    probs, _ = forward(model, patches, coords)
    return cross_entropy(probs, labels) + l2_penalty(model, eta)


def backward(model: CnnModel, cache, labels, eta: float = AdamConfig.eta) -> dict:
    """Exact gradients of mean cross-entropy plus ``eta/2 * ||w||^2`` (weights only)."""
    cfg, P = model.config, model.params
    labels = np.asarray(labels).astype(int)
    probs = cache["probs"]
    bsz = len(labels)
    d = probs.copy()
    d[np.arange(bsz), labels] -= 1.0
    d /= bsz
    grads = {}
    n_fc = len(cfg.fc) - 1
    for i in reversed(range(n_fc)):
        x, z, mask = cache["fc"][i]
        if i < n_fc - 1:
            d = d * (z > 0)
        grads[f"fc{i}.w"] = x.T @ d
        grads[f"fc{i}.b"] = d.sum(axis=0)
        d = d @ P[f"fc{i}.w"].T
        if mask is not None:
            d = d * mask
    dproj = d[:, :3 * cfg.stream_width].reshape(bsz * 3, cfg.stream_width)
    flat, zp = cache["proj"]
    dproj = dproj * (zp > 0)
    grads["proj.w"] = flat.T @ dproj
    grads["proj.b"] = dproj.sum(axis=0)
    dh = dproj @ P["proj.w"].T
    side = cfg.pooled_side
    dh = dh.reshape(bsz * 3, side, side, cfg.conv[-1])
    for i in reversed(range(len(cfg.conv))):
        cols, z, pc = cache["conv"][i]
        da = pool_backward(dh, pc)
        dz = da * (z > 0)
        c_in = 1 if i == 0 else cfg.conv[i - 1]
        dh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv_backward(dz, cols, P[f"conv{i}.w"], c_in)
    for k in model.weight_names():
        grads[k] = grads[k] + eta * P[k]
    return grads


# --- Adam ---------------------------------------------------------------------------

def adam_init(params: dict) -> AdamState:
    return AdamState({k: np.zeros_like(v) for k, v in params.items()},
                     {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adam_step(state: AdamState, params: dict, grads: dict, cfg: AdamConfig = AdamConfig()) -> dict:
    """One bias-corrected Adam update, in place; returns ``params``."""
    state.t += 1
    c1 = 1.0 - cfg.beta1 ** state.t
    c2 = 1.0 - cfg.beta2 ** state.t
    for k, g in grads.items():
        m = state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        params[k] = params[k] - cfg.alpha * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params


# --- pixel features -------------------------------------------------------------------

@dataclass
class PixelFeatures:
    patches: np.ndarray   # (B, 3, p, p)
    coords: np.ndarray    # (B, 3) as (x/nx, y/ny, z/nz)

    def __len__(self):
        return len(self.coords)

    def take(self, idx) -> "PixelFeatures":
        return PixelFeatures(self.patches[idx], self.coords[idx])


@dataclass
class PixelIndex:
    """Training pixels as ``(volume number, z, y, x)`` rows; patches are cut on demand."""

    volumes: list
    rows: np.ndarray
    patch: int = 11

    def __len__(self):
        return len(self.rows)

    def take(self, idx) -> PixelFeatures:
        rows = self.rows[idx]
        out_p = np.empty((len(rows), 3, self.patch, self.patch))
        out_c = np.empty((len(rows), 3))
        for v in np.unique(rows[:, 0]):
            sel = np.flatnonzero(rows[:, 0] == v)
            f = extract_features(self.volumes[v], rows[sel, 3], rows[sel, 2], rows[sel, 1], self.patch)
            out_p[sel] = f.patches
            out_c[sel] = f.coords
        return PixelFeatures(out_p, out_c)


def extract_features(vol: np.ndarray, xs, ys, zs, patch: int = 11) -> PixelFeatures:
    """Patches from slices ``z-1, z, z+1`` around each pixel, zero outside the volume."""
    vol = np.asarray(vol, dtype=np.float64)
    nz, ny, nx = vol.shape
    xs, ys, zs = (np.asarray(a, dtype=np.int64).ravel() for a in (xs, ys, zs))
    if np.any((xs < 0) | (xs >= nx) | (ys < 0) | (ys >= ny) | (zs < 0) | (zs >= nz)):
        raise IndexError("pixel outside the volume")
    r = patch // 2
    padded = np.pad(vol, ((1, 1), (r, r), (r, r)))
    off = np.arange(patch)
    zi = (zs[:, None] + np.arange(3)[None, :])[:, :, None, None]
    yi = (ys[:, None] + off[None, :])[:, None, :, None]
    xi = (xs[:, None] + off[None, :])[:, None, None, :]
    patches = padded[zi, yi, xi]
    coords = np.column_stack([xs / nx, ys / ny, zs / nz]).astype(np.float64)
    return PixelFeatures(patches, coords)


def extract_feature(vol: np.ndarray, x: int, y: int, z: int, patch: int = 11) -> PixelFeatures:
    return extract_features(vol, [x], [y], [z], patch)


def boundary_band(mask, distance: int) -> np.ndarray:
    """Pixels within Chebyshev ``distance`` of the mask boundary (the image edge counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return np.zeros_like(m)
    p = np.pad(m, 1)
    inner = p[1:-1, 1:-1] & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    edge = m & ~inner
    if distance <= 0:
        return edge
    return ndimage.binary_dilation(edge, np.ones((2 * distance + 1,) * 2, dtype=bool))


# --- training and inference ----------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 128
    samples_per_epoch: int = 8192
    seed: int = 0


@dataclass
class TrainResult:
    model: CnnModel
    history: list[tuple[int, float, float]]
    adam: AdamState


def train(model: CnnModel, data, labels, tcfg: TrainConfig = TrainConfig(),
          acfg: AdamConfig = AdamConfig(), balanced: bool = True) -> TrainResult:
    """Adam on shuffled mini-batches; each epoch draws equal numbers of both classes.

    ``data`` is anything with ``take(indices) -> PixelFeatures``.

    History rows are ``(epoch, mean batch loss, training accuracy)``.
    """
    labels = np.asarray(labels).astype(int)
    if len(np.unique(labels)) < 2:
        raise ValueError("CNN training needs both classes")
    rng = np.random.default_rng(tcfg.seed)
    state = adam_init(model.params)
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    history = []
    for epoch in range(1, tcfg.epochs + 1):
        if balanced:
            half = tcfg.samples_per_epoch // 2
            idx = np.concatenate([rng.choice(pos, half, replace=len(pos) < half),
                                  rng.choice(neg, half, replace=len(neg) < half)])
            rng.shuffle(idx)
        else:
            idx = rng.permutation(len(labels))
        losses, correct = [], 0
        for s in range(0, len(idx), tcfg.batch_size):
            bi = idx[s:s + tcfg.batch_size]
            batch = data.take(bi)
            probs, cache = forward(model, batch.patches, batch.coords, train=True, rng=rng)
            y = labels[bi]
            losses.append(cross_entropy(probs, y) + l2_penalty(model, acfg.eta))
            correct += int(np.sum((probs[:, 1] > 0.5) == (y == 1)))
            grads = backward(model, cache, y, acfg.eta)
            adam_step(state, model.params, grads, acfg)
        history.append((epoch, float(np.mean(losses)), correct / len(idx)))
        log.info("cnn epoch %d loss %.4f acc %.4f", *history[-1])
    return TrainResult(model, history, state)


def predict_proba(model: CnnModel, data: PixelFeatures, chunk: int = 2048) -> np.ndarray:
    """P(brain) per sample."""
    out = np.empty(len(data))
    for s in range(0, len(data), chunk):
        probs, _ = forward(model, data.patches[s:s + chunk], data.coords[s:s + chunk])
        out[s:s + chunk] = probs[:, 1]
    return out


def predict_pixels(model: CnnModel, vol: np.ndarray, zs, ys, xs, chunk: int = 2048) -> np.ndarray:
    out = np.empty(len(zs))
    for s in range(0, len(zs), chunk):
        f = extract_features(vol, xs[s:s + chunk], ys[s:s + chunk], zs[s:s + chunk],
                             model.config.patch)
        out[s:s + chunk] = predict_proba(model, f, chunk)
    return out


def refine(vol: np.ndarray, asm_masks: np.ndarray, group_one: np.ndarray, rects, model: CnnModel | None,
           band: int = 5) -> np.ndarray:
    """Per-pixel P(brain) maps.

    Slices flagged in ``group_one`` get CNN probabilities over their skull
    rectangle ``rects[z] = (x, y, w, h)`` and 0 elsewhere. Other slices keep
    their ASM mask as a {0, 1} baseline with band pixels replaced by the CNN.
    """
    if model is None:
        raise RuntimeError("no CNN model available")
    prob = np.asarray(asm_masks, dtype=np.float64).copy()
    region = np.zeros(prob.shape, dtype=bool)
    for z in range(prob.shape[0]):
        if group_one[z]:
            prob[z] = 0.0
            x, y, w, h = rects[z]
            region[z, y:y + h, x:x + w] = True
        else:
            region[z] = boundary_band(asm_masks[z], band)
    zs, ys, xs = np.nonzero(region)
    if len(zs):
        prob[zs, ys, xs] = predict_pixels(model, vol, zs, ys, xs)
    return prob


def model_state(model: CnnModel, prefix: str = "cnn") -> dict:
    cfg = model.config
    out = {f"{prefix}.{k}": v for k, v in model.params.items()}
    out[f"{prefix}.config"] = {"patch": cfg.patch, "conv": list(cfg.conv),
                               "stream_width": cfg.stream_width, "fc": list(cfg.fc),
                               "dropout": cfg.dropout, "conv_std": cfg.conv_std}
    return out


def model_from_state(s: dict, prefix: str = "cnn") -> CnnModel:
    c = dict(s[f"{prefix}.config"])
    cfg = CnnConfig(c["patch"], tuple(c["conv"]), c["stream_width"], tuple(c["fc"]),
                    c["dropout"], c["conv_std"])
    params = {name: s[f"{prefix}.{name}"] for name, _, _ in param_names(cfg)}
    return CnnModel(cfg, params)
