"""Independent oracles shared by unit and acceptance tests."""
import itertools

import numpy as np

from brainstrip import cnn


def reduced_cnn(seed=0):
    cfg = cnn.CnnConfig(conv=(2,), stream_width=1, fc=(8, 2))
    return cnn.init_weights(cfg, seed)


def gradient_check(n_coords=100, seed=0, h=1e-5, batch=4, eta=0.005):
    """Relative errors of analytic gradients against central differences on random coordinates."""
    rng = np.random.default_rng(seed)
    model = reduced_cnn(seed)
    p = model.config.patch
    patches = rng.normal(size=(batch, 3, p, p))
    coords = rng.random((batch, 3))
    labels = rng.integers(0, 2, size=batch)
    _, cache = cnn.forward(model, patches, coords)
    grads = cnn.backward(model, cache, labels, eta)
    names = sorted(model.params)
    sizes = np.array([model.params[k].size for k in names])
    picks = rng.choice(sizes.sum(), size=n_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errs = []
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, j = names[i], int(flat - offsets[i])
        w = model.params[name].reshape(-1)
        old = w[j]
        w[j] = old + h
        up = cnn.loss(model, patches, coords, labels, eta)
        w[j] = old - h
        down = cnn.loss(model, patches, coords, labels, eta)
        w[j] = old
        num = (up - down) / (2 * h)
        ana = grads[name].reshape(-1)[j]
        errs.append(abs(ana - num) / max(abs(ana), abs(num), 1e-12))
    return np.array(errs)


def brute_force_crf(unary, intensities, w1, w2, sa, sb, sg):
    """Exact Gibbs distribution over all labelings of a tiny grid, written from scratch."""
    unary = np.asarray(unary, dtype=np.float64)  # (2, h, w)
    h, w = unary.shape[1:]
    pos = [(r, c) for r in range(h) for c in range(w)]
    inten = np.asarray(intensities, dtype=np.float64).ravel()
    n = len(pos)
    k = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d2 = (pos[i][0] - pos[j][0]) ** 2 + (pos[i][1] - pos[j][1]) ** 2
            di = (inten[i] - inten[j]) ** 2
            k[i, j] = (w1 * np.exp(-d2 / (2 * sa ** 2) - di / (2 * sb ** 2))
                       + w2 * np.exp(-d2 / (2 * sg ** 2)))
    u0, u1 = unary[0].ravel(), unary[1].ravel()
    energies, labelings = [], []
    for lab in itertools.product((0, 1), repeat=n):
        s = np.array(lab)
        e = np.where(s == 1, u1, u0).sum()
        # each unordered pair with different labels pays once
        e += 0.5 * np.sum(k * (s[:, None] != s[None, :]))
        energies.append(e)
        labelings.append(s)
    energies = np.array(energies)
    labelings = np.array(labelings)
    p = np.exp(-(energies - energies.min()))
    p /= p.sum()
    marg = (p[:, None] * labelings).sum(axis=0).reshape(h, w)
    best = int(np.argmin(energies))
    return marg, labelings[best].reshape(h, w), float(energies[best]), energies, labelings


def gp_posterior(x, y, xs, ell, sf2, sn2, mean):
    """Textbook GP regression with an explicit inverse (fine for a handful of points)."""
    x, y, xs = (np.asarray(a, dtype=np.float64) for a in (x, y, xs))
    k = lambda a, b: sf2 * np.exp(-(a[:, None] - b[None, :]) ** 2 / (2 * ell ** 2))
    kinv = np.linalg.inv(k(x, x) + sn2 * np.eye(len(x)))
    ks = k(xs, x)
    mu = mean + ks @ kinv @ (y - mean)
    var = sf2 - np.sum((ks @ kinv) * ks, axis=1)
    return mu, var


def weak_crf_instance(rng, coupling=0.5, margin=0.15, shape=None):
    """Random grid of at most 12 pixels in the weak-coupling regime.

    Kernel weights are scaled so every pixel's summed coupling is at most
    ``coupling``; unary probabilities stay at least ``margin`` from 0.5, since
    near-tied unaries make even exact marginals decode to a non-MAP labelling.
    """
    from dataclasses import replace

    from brainstrip.crf import CrfParams, kernel_matrix
    if shape is None:
        n = int(rng.integers(2, 13))
        h = int(rng.integers(1, 4))
        w = max(1, n // h)
    else:
        h, w = shape
    side = rng.random((h, w)) < 0.5
    d = rng.uniform(margin, 0.45, (h, w))
    prob = np.where(side, 0.5 + d, 0.5 - d)
    inten = rng.random((h, w))
    p = CrfParams(w1=1.0, w2=1.0, sigma_alpha=rng.uniform(1, 5), sigma_beta=rng.uniform(0.1, 1),
                  sigma_gamma=rng.uniform(0.5, 3))
    s = coupling / max(kernel_matrix((h, w), inten, p).sum(axis=1).max(), 1e-12)
    return prob, inten, replace(p, w1=s, w2=s)
