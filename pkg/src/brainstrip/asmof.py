"""Active shape model with optimal features.

Shapes are stacked landmark vectors ``(x1, y1, ..., xn, yn)`` in pixel
coordinates, ``x`` along columns and ``y`` along rows.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.stats import rankdata
from skimage import draw

from . import morphology

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class AsmParams:
    n: int = 40
    n_s: int = 2
    k: int = 3
    l_max: int = 2
    n_grid: int = 5
    n_max: int = 10
    k_nn: int = 15
    f_v: float = 0.95
    q: float = 3.0
    n_keep: int = 10
    grid_step: float = 1.0

    def __post_init__(self):
        ints = dict(n=self.n, n_s=self.n_s, k=self.k, l_max=self.l_max, n_grid=self.n_grid,
                    n_max=self.n_max, k_nn=self.k_nn, n_keep=self.n_keep)
        for name, value in ints.items():
            if int(value) != value or value < 1:
                raise ValueError(f"asm.{name} must be a positive integer, got {value}")
        if self.n < 3:
            raise ValueError("asm.n must be at least 3")
        if self.n_grid % 2 == 0:
            raise ValueError("asm.n_grid must be odd")
        if not 0 < self.f_v <= 1:
            raise ValueError("asm.f_v must be in (0, 1]")
        if not 2 <= self.q <= 3:
            raise ValueError("asm.q must be in [2, 3]")
        if self.grid_step <= 0:
            raise ValueError("asm.grid_step must be positive")


# --- landmarks ---------------------------------------------------------------

# (drow, dcol) ring around a pixel, clockwise on screen starting at west
_RING = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]
_RING_INDEX = {d: i for i, d in enumerate(_RING)}


def trace_contour(mask) -> np.ndarray:
    """Moore-neighbour trace of the outer boundary, ``(m, 2)`` (row, col) pixels.

    Starts at the topmost-then-leftmost pixel and runs clockwise on screen;
    stops by Jacob's criterion (re-entering the start with the first move).
    """
    p = np.pad(np.asarray(mask, dtype=bool), 1)
    rr, cc = np.nonzero(p)
    if rr.size == 0:
        raise ShapeError("empty mask has no contour")
    start = (int(rr[0]), int(cc[0]))
    cur, back = start, (start[0], start[1] - 1)
    out = [start]
    first = None
    for _ in range(8 * p.size):
        bi = _RING_INDEX[(back[0] - cur[0], back[1] - cur[1])]
        nxt = None
        for i in range(1, 9):
            dr, dc = _RING[(bi + i) % 8]
            cand = (cur[0] + dr, cur[1] + dc)
            if p[cand]:
                nxt = cand
                break
            back = cand
        if nxt is None:
            break
        if first is None:
            first = nxt
        elif cur == start and nxt == first:
            break
        out.append(nxt)
        cur = nxt
    if len(out) > 1 and out[-1] == start:
        out.pop()
    return np.array(out) - 1


def resample_closed(points: np.ndarray, n: int) -> np.ndarray:
    """``n`` points at equal arclength along the closed polygon, starting at ``points[0]``."""
    closed = np.vstack([points, points[:1]]).astype(np.float64)
    seg = np.hypot(*np.diff(closed, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return np.repeat(closed[:1], n, axis=0)
    t = np.arange(n) * s[-1] / n
    return np.column_stack([np.interp(t, s, closed[:, 0]), np.interp(t, s, closed[:, 1])])


def landmarks_from_mask(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    labels, count = morphology.label(mask)
    if count == 0:
        raise ShapeError("cannot extract landmarks from an empty mask")
    if count > 1:
        raise ShapeError(f"mask has {count} components, expected one")
    if mask.sum() < n:
        raise ShapeError(f"mask area {int(mask.sum())} is smaller than n={n}")
    rc = trace_contour(mask)
    xy = resample_closed(rc[:, ::-1], n)
    return xy.ravel()


def as_points(shape) -> np.ndarray:
    return np.asarray(shape, dtype=np.float64).reshape(-1, 2)


def shape_to_mask(shape, image_shape) -> np.ndarray:
    """Rasterise the landmark polygon; pixels on its edges count as inside."""
    pts = as_points(shape)
    out = np.zeros(image_shape, dtype=bool)
    rr, cc = draw.polygon(pts[:, 1], pts[:, 0], shape=image_shape)
    out[rr, cc] = True
    rr, cc = draw.polygon_perimeter(np.round(pts[:, 1]), np.round(pts[:, 0]), shape=image_shape)
    out[rr, cc] = True
    return out


# --- point distribution model -------------------------------------------------

@dataclass
class ShapeModel:
    mean: np.ndarray           # (2n,)
    phi: np.ndarray            # (2n, t)
    lam: np.ndarray            # (t,)
    f_v: float
    q: float
    all_lam: np.ndarray = field(default=None, repr=False)

    @property
    def t(self) -> int:
        return self.phi.shape[1]

    @property
    def limits(self) -> np.ndarray:
        return self.q * np.sqrt(self.lam)


def n_modes(lam: np.ndarray, f_v: float) -> int:
    """Smallest ``t`` with ``sum(lam[:t]) >= f_v * sum(lam)``."""
    total = float(lam.sum())
    if total <= 0:
        return 0
    cum = np.cumsum(lam)
    # relative slack so f_v = 1 is not defeated by round-off
    return int(np.searchsorted(cum, f_v * total * (1 - 1e-12), side="left")) + 1


def build_shape_model(shapes, f_v: float = 0.95, q: float = 3.0) -> ShapeModel:
    x = np.asarray(shapes, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ShapeError("shape model needs at least two shapes of equal length")
    if x.shape[1] % 2:
        raise ShapeError("shape vectors must have even length")
    mean = x.mean(axis=0)
    d = (x - mean) / np.sqrt(len(x) - 1)
    _, sv, vt = np.linalg.svd(d, full_matrices=False)
    lam = sv ** 2
    t = n_modes(lam, f_v)
    phi = vt[:t].T.copy()
    return ShapeModel(mean, phi, lam[:t].copy(), f_v, q, lam)


def project_and_limit(model: ShapeModel, shape) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(shape, dtype=np.float64)
    if x.shape != model.mean.shape:
        raise ShapeError(f"shape length {x.size} does not match model length {model.mean.size}")
    b = model.phi.T @ (x - model.mean)
    lim = model.limits
    b = np.clip(b, -lim, lim)
    return b, model.mean + model.phi @ b


def fit_pose(model: ShapeModel, shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Translate-then-project: returns ``(b, translation, fitted shape)``."""
    pts = as_points(shape)
    trans = pts.mean(axis=0) - as_points(model.mean).mean(axis=0)
    offset = np.tile(trans, len(pts))
    b, limited = project_and_limit(model, np.asarray(shape, dtype=np.float64) - offset)
    return b, trans, limited + offset


# --- features ---------------------------------------------------------------

DERIV_ORDERS = ((0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0))  # (row, col): L Lx Ly Lxx Lxy Lyy
SCALES = (1.0, 2.0, 4.0, 8.0, 16.0)
N_FEATURES = 2 * len(DERIV_ORDERS) * len(SCALES)


def local_std(img: np.ndarray, size: int = 3) -> np.ndarray:
    m = ndimage.uniform_filter(img, size, mode="nearest")
    m2 = ndimage.uniform_filter(img * img, size, mode="nearest")
    return np.sqrt(np.maximum(m2 - m * m, 0.0))


def filter_bank(pixels) -> np.ndarray:
    """``(60, h, w)``: Gaussian derivatives for every scale and order, then their local 3x3 std."""
    img = np.asarray(pixels, dtype=np.float64)
    derivs = [ndimage.gaussian_filter(img, s, order=o, mode="nearest")
              for s in SCALES for o in DERIV_ORDERS]
    return np.stack(derivs + [local_std(d) for d in derivs])


def sample(stack: np.ndarray, points_xy: np.ndarray) -> np.ndarray:
    """Bilinear samples of every feature image at ``(m, 2)`` (x, y) points -> ``(m, F)``."""
    coords = np.vstack([points_xy[:, 1], points_xy[:, 0]])
    return np.stack([ndimage.map_coordinates(f, coords, order=1, mode="nearest")
                     for f in stack], axis=1)


def downsample(img: np.ndarray, level: int) -> np.ndarray:
    """2x2 block means applied ``level`` times (odd edges replicated)."""
    out = np.asarray(img, dtype=np.float64)
    for _ in range(level):
        h, w = out.shape
        out = np.pad(out, ((0, h % 2), (0, w % 2)), mode="edge")
        out = out.reshape(out.shape[0] // 2, 2, out.shape[1] // 2, 2).mean(axis=(1, 3))
    return out


def to_level(points_xy: np.ndarray, level: int) -> np.ndarray:
    return (points_xy + 0.5) / 2 ** level - 0.5


def mann_whitney_scores(x, labels) -> np.ndarray:
    """``|U / (n0 n1) - 0.5|`` per column of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n0 == 0 or n1 == 0:
        raise ValueError("Mann-Whitney selection needs both classes")
    ranks = rankdata(x, axis=0)
    u = ranks[y].sum(axis=0) - n1 * (n1 + 1) / 2.0
    return np.abs(u / (n0 * n1) - 0.5)


def mann_whitney_select(x, labels, n_keep: int) -> np.ndarray:
    scores = mann_whitney_scores(x, labels)
    order = np.argsort(-scores, kind="stable")
    return order[:n_keep]


# --- kNN appearance -------------------------------------------------------------

@dataclass
class LandmarkModel:
    selected: np.ndarray        # feature indices
    vectors: np.ndarray         # (N, len(selected)) raw training features
    labels: np.ndarray          # (N,) in {0, 1}
    k_nn: int = 15
    center: np.ndarray | None = None
    scale: np.ndarray | None = None
    _tree: cKDTree | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        d = len(self.selected)
        if self.center is None:
            self.center = np.zeros(d)
        if self.scale is None:
            self.scale = np.ones(d)

    def _standard(self, v):
        return (np.asarray(v, dtype=np.float64) - self.center) / self.scale

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self._standard(self.vectors))
        return self._tree

    def inside_prob(self, features) -> np.ndarray:
        """Vote weighted by ``exp(-d^2)`` among the ``k_nn`` nearest training vectors.

        ``features`` holds full feature rows; only ``selected`` columns are used.
        """
        q = self._standard(np.atleast_2d(features)[:, self.selected])
        k = min(self.k_nn, len(self.labels))
        d, idx = self.tree.query(q, k=k)
        d = d.reshape(len(q), k)
        idx = idx.reshape(len(q), k)
        d2 = d * d
        # shifting by the nearest distance leaves the ratio unchanged and avoids underflow
        w = np.exp(-(d2 - d2[:, :1]))
        return (w * self.labels[idx]).sum(axis=1) / w.sum(axis=1)


def knn_inside_prob(model: "AppearanceModel", level: int, landmark: int, features) -> np.ndarray:
    return model.landmark(level, landmark).inside_prob(features)


@dataclass
class AppearanceModel:
    """Per resolution level and landmark: selected features plus labelled kNN samples."""

    levels: list[list[LandmarkModel]]

    def landmark(self, level: int, j: int) -> LandmarkModel:
        try:
            return self.levels[level][j]
        except IndexError:
            raise KeyError(f"no appearance model for level {level}, landmark {j}") from None

    def prepare(self, image: np.ndarray, level: int):
        return filter_bank(downsample(image, level))

    def profile_probs(self, level: int, points_xy: np.ndarray, context) -> np.ndarray:
        """``points_xy`` is ``(n_landmarks, m, 2)``; returns ``(n_landmarks, m)`` probabilities."""
        n, m, _ = points_xy.shape
        feats = sample(context, to_level(points_xy.reshape(-1, 2), level)).reshape(n, m, -1)
        return np.stack([self.landmark(level, j).inside_prob(feats[j]) for j in range(n)])


def grid_offsets(n_grid: int, step: float) -> np.ndarray:
    h = n_grid // 2
    g = np.arange(-h, h + 1) * step
    gx, gy = np.meshgrid(g, g)
    return np.column_stack([gx.ravel(), gy.ravel()])


def train_appearance(images, masks, shapes, params: AsmParams) -> AppearanceModel:
    """``images`` normalised slices, ``masks`` their reference masks, ``shapes`` reference landmarks."""
    if not images:
        raise ShapeError("appearance model needs training slices")
    offsets = grid_offsets(params.n_grid, params.grid_step)
    levels = []
    for level in range(params.l_max):
        feats_j = [[] for _ in range(params.n)]
        labels_j = [[] for _ in range(params.n)]
        for img, m, shape in zip(images, masks, shapes):
            stack = filter_bank(downsample(img, level))
            mlev = downsample(np.asarray(m, dtype=np.float64), level)
            pts = to_level(as_points(shape), level)
            grid = (pts[:, None, :] + offsets[None]).reshape(-1, 2)
            f = sample(stack, grid).reshape(params.n, len(offsets), -1)
            inside = ndimage.map_coordinates(mlev, [grid[:, 1], grid[:, 0]], order=1,
                                             mode="nearest") >= 0.5
            inside = inside.reshape(params.n, len(offsets))
            for j in range(params.n):
                feats_j[j].append(f[j])
                labels_j[j].append(inside[j])
        models = []
        for j in range(params.n):
            x = np.concatenate(feats_j[j])
            y = np.concatenate(labels_j[j]).astype(np.float64)
            if 0 < y.sum() < len(y):
                sel = mann_whitney_select(x, y, params.n_keep)
            else:
                sel = np.arange(params.n_keep)
            v = x[:, sel]
            center = v.mean(axis=0)
            scale = v.std(axis=0)
            scale[scale < 1e-12] = 1.0
            models.append(LandmarkModel(sel, v, y, params.k_nn, center, scale))
        levels.append(models)
    return AppearanceModel(levels)


# --- search -------------------------------------------------------------------

def profile_objective(g) -> float:
    """``sum_{i<0} g_i + sum_{i>=0} (1 - g_i)`` over a profile indexed ``-k..k``."""
    g = np.asarray(g, dtype=np.float64)
    k = (len(g) - 1) // 2
    return float(g[:k].sum() + (1.0 - g[k:]).sum())


def inward_normals(pts: np.ndarray) -> np.ndarray:
    """Unit normals perpendicular to the chord between each landmark's neighbours."""
    t = np.roll(pts, -1, axis=0) - np.roll(pts, 1, axis=0)
    x, y = pts[:, 0], pts[:, 1]
    area2 = float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
    nrm = np.column_stack([-t[:, 1], t[:, 0]]) if area2 > 0 else np.column_stack([t[:, 1], -t[:, 0]])
    length = np.hypot(nrm[:, 0], nrm[:, 1])
    length[length == 0] = 1.0
    return nrm / length[:, None]


def best_offset(probs: np.ndarray, n_s: int, k: int) -> int:
    """Candidate shift minimising the profile objective; ties go to the smaller |shift|."""
    best_c, best_f = 0, np.inf
    for c in sorted(range(-n_s, n_s + 1), key=lambda c: (abs(c), c)):
        # probs covers shifts -n_s-k .. n_s+k, so candidate c starts at index c + n_s
        f = profile_objective(probs[c + n_s:c + n_s + 2 * k + 1])
        if f < best_f - 1e-12:
            best_c, best_f = c, f
    return best_c


def asm_search(image, shape_model: ShapeModel, appearance, params: AsmParams,
               init=None, callback=None) -> np.ndarray:
    """Fit the model to ``image`` coarse to fine.

    ``appearance`` needs ``prepare(image, level)`` and
    ``profile_probs(level, points_xy, context)`` taking all landmarks' profile
    points at once; ``callback`` is called as ``callback(level, iteration, b, shape)``
    after each projection.
    """
    img = np.asarray(image, dtype=np.float64)
    x = np.asarray(shape_model.mean if init is None else init, dtype=np.float64).copy()
    span = params.n_s + params.k
    offs = np.arange(-span, span + 1, dtype=np.float64)
    for level in reversed(range(params.l_max)):
        ctx = appearance.prepare(img, level)
        step = 2.0 ** level
        for it in range(params.n_max):
            pts = as_points(x)
            nrm = inward_normals(pts)
            prof = pts[:, None, :] + (offs * step)[None, :, None] * nrm[:, None, :]
            probs = appearance.profile_probs(level, prof, ctx)
            shift = np.array([best_offset(p, params.n_s, params.k) for p in probs])
            moved = pts + (shift * step)[:, None] * nrm
            b, _, x = fit_pose(shape_model, moved.ravel())
            if callback is not None:
                callback(level, it, b, x)
    return x


def initial_shape(model: ShapeModel, center_xy) -> np.ndarray:
    """Mean shape translated so its centroid sits at ``center_xy``."""
    pts = as_points(model.mean)
    return (pts - pts.mean(axis=0) + np.asarray(center_xy, dtype=np.float64)).ravel()


# --- bundle helpers -------------------------------------------------------------

def shape_model_state(m: ShapeModel, prefix: str) -> dict:
    return {f"{prefix}.mean": m.mean, f"{prefix}.phi": m.phi, f"{prefix}.lam": m.lam,
            f"{prefix}.all_lam": m.all_lam, f"{prefix}.f_v": m.f_v, f"{prefix}.q": m.q}


def shape_model_from_state(s: dict, prefix: str) -> ShapeModel:
    return ShapeModel(s[f"{prefix}.mean"], s[f"{prefix}.phi"], s[f"{prefix}.lam"],
                      s[f"{prefix}.f_v"], s[f"{prefix}.q"], s[f"{prefix}.all_lam"])


def appearance_state(a: AppearanceModel, prefix: str) -> dict:
    out = {}
    for l, models in enumerate(a.levels):
        p = f"{prefix}.l{l}"
        out[p + ".selected"] = np.stack([m.selected for m in models]).astype(np.int64)
        out[p + ".vectors"] = np.stack([m.vectors for m in models])
        out[p + ".labels"] = np.stack([m.labels for m in models])
        out[p + ".center"] = np.stack([m.center for m in models])
        out[p + ".scale"] = np.stack([m.scale for m in models])
        out[p + ".k_nn"] = int(models[0].k_nn)
    out[prefix + ".levels"] = len(a.levels)
    return out


def appearance_from_state(s: dict, prefix: str) -> AppearanceModel:
    levels = []
    for l in range(int(s[prefix + ".levels"])):
        p = f"{prefix}.l{l}"
        sel, vec, lab = s[p + ".selected"], s[p + ".vectors"], s[p + ".labels"]
        cen, sca, k = s[p + ".center"], s[p + ".scale"], int(s[p + ".k_nn"])
        levels.append([LandmarkModel(sel[j], vec[j], lab[j], k, cen[j], sca[j])
                       for j in range(len(sel))])
    return AppearanceModel(levels)
