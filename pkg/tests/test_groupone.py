import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brainstrip import groupone
from brainstrip.core import GroupPartition, generate_phantom, group_labels_from_mask
from brainstrip.crf import CrfParams
from brainstrip.groupone import (GP_HI, GP_LO, GpModel, check_area, check_center, check_distance,
                                 centroid_norm, convert_range, estimate_shift, gp_fit, gp_from_state,
                                 gp_predict, gp_state, merge_slice, process_group_one)
from brainstrip.metrics import evaluate


def dice(a, b):
    return evaluate(a, b)["dice"]
from helpers import gp_posterior


def _blob(shape, r0, c0, h, w):
    m = np.zeros(shape, bool)
    m[r0:r0 + h, c0:c0 + w] = True
    return m


# --- convert_range / centroid_norm ------------------------------------------------------

def test_convert_range_examples():
    assert convert_range(0, 1, 0, 100, 0.5) == 50
    assert convert_range(3, 7, -2, 9, 3) == -2
    assert convert_range(3, 7, -2, 9, 7) == 9
    assert convert_range(20, 220, 1, 100, 120) == 50.5
    with pytest.raises(ZeroDivisionError):
        convert_range(4, 4, 0, 1, 2)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3),
       st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_convert_range_is_linear(a, b, c, d, x1, x2):
    if abs(b - a) < 1e-3:
        return
    mid = convert_range(a, b, c, d, (x1 + x2) / 2)
    avg = (convert_range(a, b, c, d, x1) + convert_range(a, b, c, d, x2)) / 2
    assert mid == pytest.approx(avg, rel=1e-9, abs=1e-6)


def test_centroid_norm_examples():
    m = np.zeros((8, 8), bool)
    m[3, 4] = True
    assert centroid_norm(m) == 5.0
    sq = _blob((21, 21), 8, 8, 5, 5)
    assert centroid_norm(sq) == pytest.approx(math.sqrt(200), abs=1e-12)
    L = np.zeros((10, 10), bool)
    L[2:7, 1] = True
    L[6, 1:5] = True
    pix = [(r, c) for r in range(10) for c in range(10) if L[r, c]]
    rbar = sum(p[0] for p in pix) / len(pix)
    cbar = sum(p[1] for p in pix) / len(pix)
    assert centroid_norm(L) == pytest.approx(math.hypot(rbar, cbar), abs=1e-12)
    with pytest.raises(ValueError):
        centroid_norm(np.zeros((3, 3), bool))


# --- Gaussian process ------------------------------------------------------------------

def test_gp_constant_targets():
    pos = np.arange(10.0)
    m = gp_fit([(pos, np.full(10, 7.0))])
    mu, _ = gp_predict(m, np.linspace(1, 100, 25))
    assert np.all(np.abs(mu - 7.0) <= math.sqrt(m.sn2))


def test_gp_three_point_hand_oracle():
    x = np.array([1.0, 50.0, 100.0])
    y = np.array([3.0, 5.0, 4.0])
    hyper = (30.0, 2.0, 0.1)
    m = gp_fit([(x, y, (1, 100))], hyper=hyper)
    xs = np.array([1.0, 20.0, 75.0, 99.0])
    mu, var = gp_predict(m, xs)
    emu, evar = gp_posterior(x, y, xs, *hyper, mean=y.mean())
    np.testing.assert_allclose(mu, emu, atol=1e-9)
    np.testing.assert_allclose(var, evar, atol=1e-9)


def test_gp_three_point_closed_form():
    # ell=10 with inputs 10 apart: k(1)=sf2*e^-1/2, k(2)=sf2*e^-2; mean 0
    x = np.array([1.0, 11.0, 21.0])
    y = np.array([1.0, -1.0, 2.0])
    sf2, sn2 = 1.0, 0.5
    a, b = math.exp(-0.5), math.exp(-2)
    K = [[1 + sn2, a, b], [a, 1 + sn2, a], [b, a, 1 + sn2]]
    # adjugate / determinant, written out by hand
    det = (K[0][0] * (K[1][1] * K[2][2] - K[1][2] * K[2][1])
           - K[0][1] * (K[1][0] * K[2][2] - K[1][2] * K[2][0])
           + K[0][2] * (K[1][0] * K[2][1] - K[1][1] * K[2][0]))
    cof = [[(K[(i + 1) % 3][(j + 1) % 3] * K[(i + 2) % 3][(j + 2) % 3]
             - K[(i + 1) % 3][(j + 2) % 3] * K[(i + 2) % 3][(j + 1) % 3]) for j in range(3)]
           for i in range(3)]
    inv = [[cof[j][i] / det for j in range(3)] for i in range(3)]
    alpha = [sum(inv[i][j] * y[j] for j in range(3)) for i in range(3)]
    ks = [a, 1.0, a]  # query at 11
    expected = sum(ks[i] * alpha[i] for i in range(3))
    m = GpModel(x, y, 10.0, sf2, sn2, 0.0)
    assert gp_predict(m, 11.0)[0] == pytest.approx(expected, abs=1e-9)


def test_gp_noiseless_interpolation():
    rng = np.random.default_rng(3)
    x = np.sort(rng.choice(np.arange(1, 101), size=8, replace=False)).astype(float)
    y = rng.normal(20, 3, size=8)
    m = gp_fit([(x, y, (1, 100))], hyper=(10.0, 9.0, 1e-10))
    mu, _ = gp_predict(m, x)
    assert np.abs(mu - y).max() < 1e-6


def test_gp_errors_and_state():
    with pytest.raises(ValueError):
        gp_fit([(np.arange(2.0), np.ones(2))])
    with pytest.raises(ValueError):
        gp_fit([(np.array([0.0, 2.0, 1.0]), np.ones(3))])
    with pytest.raises(RuntimeError):
        gp_predict(None, 3.0)
    with pytest.raises(ValueError):
        GpModel(np.arange(3.0), np.ones(3), 0.0, 1.0, 1.0, 0.0)
    m = gp_fit([(np.arange(6.0), np.array([1, 3, 2, 5, 4, 6.0]))])
    m2 = gp_from_state(gp_state(m))
    assert gp_predict(m, 42.0) == gp_predict(m2, 42.0)


def test_gp_positions_normalised_per_subject():
    # two subjects of different length tracing the same curve on [1, 100]
    f = lambda t: 30 + 10 * np.sin(t / 30)  # noqa: E731
    a = np.arange(20.0)
    b = np.arange(50.0)
    m = gp_fit([(a, f(convert_range(0, 19, 1, 100, a))), (b, f(convert_range(0, 49, 1, 100, b)))])
    np.testing.assert_allclose(np.sort(m.x)[[0, -1]], [GP_LO, GP_HI])
    q = np.linspace(1, 100, 30)
    assert np.abs(gp_predict(m, q)[0] - f(q)).max() < 3 * math.sqrt(m.sn2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 15))
def test_gp_mean_within_three_sigma_of_targets(seed, n):
    rng = np.random.default_rng(seed)
    y = rng.normal(rng.uniform(-50, 50), rng.uniform(0.1, 10), size=n)
    m = gp_fit([(np.arange(float(n)), y)])
    mu, var = gp_predict(m, np.linspace(-20, 120, 60))
    s = y.std()
    assert np.all(mu >= y.min() - 3 * s - 1e-9) and np.all(mu <= y.max() + 3 * s + 1e-9)
    assert np.all(var >= 0) and np.all(var <= m.sf2 + 1e-12)


def test_gp_grid_choice_maximises_likelihood():
    rng = np.random.default_rng(1)
    x = np.arange(30.0)
    y = 5 * np.sin(x / 4) + rng.normal(0, 0.3, 30)
    best = gp_fit([(x, y)])
    var = y.var()
    xs = convert_range(0, 29, 1, 100, x)
    for ell in groupone.ELL_GRID:
        for sf in groupone.SF2_GRID:
            for sn in groupone.SN2_GRID:
                other = GpModel(xs, y, ell, sf * var, sn * var, float(y.mean()))
                assert other.log_marginal_likelihood() <= best.log_marginal_likelihood() + 1e-12


# --- estimate_shift ---------------------------------------------------------------------

def _pixel_at_norm(c, shape=(8, 32)):
    m = np.zeros(shape, bool)
    m[0, c] = True
    return m


def test_estimate_shift_examples():
    # constant targets: the posterior mean is 10 everywhere
    m = gp_fit([(np.arange(5.0), np.full(5, 10.0))], hyper=(20.0, 1.0, 0.01))
    pos = [5.0, 40.0, 90.0]
    assert np.allclose([gp_predict(m, p)[0] for p in pos], 10.0, atol=1e-12)
    assert estimate_shift([(p, _pixel_at_norm(10)) for p in pos], m) == pytest.approx(0.0, abs=1e-12)
    assert estimate_shift([(p, _pixel_at_norm(13)) for p in pos], m) == pytest.approx(3.0, abs=1e-12)
    mixed = [(5.0, _pixel_at_norm(12)), (40.0, _pixel_at_norm(14))]
    assert estimate_shift(mixed, m) == pytest.approx(3.0, abs=1e-12)
    # empty masks are skipped; none usable is an error
    assert estimate_shift(mixed + [(90.0, np.zeros((8, 32), bool))], m) == pytest.approx(3.0, abs=1e-12)
    with pytest.raises(ValueError):
        estimate_shift([(10.0, np.zeros((4, 4), bool))], m)


# --- component rules ----------------------------------------------------------------------

def test_check_center_examples():
    y = _blob((40, 40), 10, 10, 11, 11)  # closed box rows/cols 10..20
    inside = _blob((40, 40), 14, 14, 3, 3)
    outside = _blob((40, 40), 30, 30, 3, 3)
    edge = _blob((40, 40), 19, 14, 3, 3)  # centroid row 20, on the box edge
    np.testing.assert_array_equal(check_center(inside | outside, y), inside)
    np.testing.assert_array_equal(check_center(edge, y), edge)
    just_out = _blob((40, 40), 20, 14, 3, 3)  # centroid row 21
    assert not check_center(just_out, y).any()
    x = inside | outside
    np.testing.assert_array_equal(check_center(x, np.zeros_like(y)), x)


def test_check_center_box_spans_all_components_of_reference():
    y = _blob((40, 40), 2, 2, 3, 3) | _blob((40, 40), 30, 30, 3, 3)
    x = _blob((40, 40), 16, 16, 4, 4)
    np.testing.assert_array_equal(check_center(x, y), x)


def test_check_area_examples():
    big = _blob((40, 40), 0, 0, 10, 10)
    small39 = _blob((40, 40), 20, 0, 3, 13)
    small40 = _blob((40, 40), 20, 0, 4, 10)
    np.testing.assert_array_equal(check_area(big | small39, 0.4), big)
    np.testing.assert_array_equal(check_area(big | small40, 0.4), big | small40)
    np.testing.assert_array_equal(check_area(small39, 1.0), small39)
    assert not check_area(np.zeros((5, 5), bool), 0.4).any()


def _row_run(c0, c1, shape=(3, 60)):
    m = np.zeros(shape, bool)
    m[0, c0:c1 + 1] = True
    return m


def test_check_distance_examples():
    a = _row_run(18, 22)  # centroid (0, 20)
    far = _row_run(30, 34)  # centroid (0, 32)
    tie = _row_run(24, 27)  # centroid (0, 25.5)
    np.testing.assert_array_equal(check_distance(a, 22.0, 1.75), a)
    np.testing.assert_array_equal(check_distance(a | far, 22.0, 1.75), a)  # difs 2, 10
    np.testing.assert_array_equal(check_distance(a | tie, 22.0, 1.75), a | tie)  # difs 2, 3.5
    assert not check_distance(np.zeros((3, 3), bool), 5.0, 1.75).any()


def test_rules_use_eight_connectivity():
    m = np.zeros((6, 6), bool)
    m[1, 1] = m[2, 2] = True  # diagonal neighbours form one component
    np.testing.assert_array_equal(check_area(m | _blob((6, 6), 4, 4, 1, 1), 0.6), m)


@st.composite
def _masks(draw):
    h, w = draw(st.integers(4, 16)), draw(st.integers(4, 16))
    bits = draw(st.lists(st.booleans(), min_size=h * w, max_size=h * w))
    return np.array(bits, bool).reshape(h, w)


@settings(max_examples=80, deadline=None)
@given(_masks(), st.floats(0.05, 1.0), st.floats(0, 30), st.floats(1.0, 3.0))
def test_area_and_distance_rules_idempotent(x, alpha, d, beta):
    once = check_area(x, alpha)
    np.testing.assert_array_equal(check_area(once, alpha), once)
    once = check_distance(x, d, beta)
    np.testing.assert_array_equal(check_distance(once, d, beta), once)
    assert not (once & ~x).any()


# --- merge_slice ----------------------------------------------------------------------------

def _disk(shape, r0, c0, rad):
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    return (yy - r0) ** 2 + (xx - c0) ** 2 <= rad ** 2


def test_merge_identical_inputs():
    y = _disk((40, 40), 20, 20, 12)
    for a in (0, 2, 5, 20):
        np.testing.assert_array_equal(merge_slice(y, y, a), y)


def test_merge_empty_core_gives_filled_intersection():
    y = _blob((20, 20), 5, 5, 5, 5)  # inradius 3 pixels
    x = y.copy()
    x[7, 7] = False  # interior hole
    x[5, 5] = False  # corner notch
    x[15:18, 15:18] = True  # outside y
    expected = y.copy()
    expected[5, 5] = False
    np.testing.assert_array_equal(merge_slice(x, y, 5), expected)


def test_merge_preserves_core():
    y = _disk((50, 50), 25, 25, 15)
    x = y & ~_disk((50, 50), 25, 25, 6)  # disagreement deep inside y
    x[0:3, 0:3] = True
    z = merge_slice(x, y, 3)
    np.testing.assert_array_equal(z, y)
    # rim disagreement survives
    x2 = y & ~_blob((50, 50), 24, 39, 3, 3)
    z2 = merge_slice(x2, y, 3)
    assert not z2[25, 40] and z2[25, 25]


def test_merge_shape_mismatch():
    with pytest.raises(ValueError):
        merge_slice(np.zeros((4, 4)), np.zeros((4, 5)), 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 6))
def test_merge_is_idempotent(seed, alpha):
    rng = np.random.default_rng(seed)
    y = _disk((32, 32), 16, 16, rng.integers(4, 14))
    x = rng.random((32, 32)) < 0.6
    z = merge_slice(x, y, alpha)
    np.testing.assert_array_equal(merge_slice(z, y, alpha), z)
    assert not (z & ~y).any()


# --- cascade ------------------------------------------------------------------------------

_CRF = CrfParams(w1=5.0, w2=3.0, sigma_alpha=30.0, sigma_beta=0.1, sigma_gamma=3.0)


def _phantom(seed=0, noise=0.0):
    from brainstrip.core import normalize_intensity, random_phantom_spec
    spec = random_phantom_spec(seed, noise_sigma=noise)
    vol, mask = generate_phantom(spec)
    inten = np.stack([normalize_intensity(p) for p in vol.data])
    part = GroupPartition.from_labels(group_labels_from_mask(mask))
    return inten, mask.astype(bool), part


def _gp_for(masks_list):
    entries = []
    for mask in masks_list:
        zs = [z for z in range(mask.shape[0]) if mask[z].any()]
        entries.append((np.array(zs, float), np.array([centroid_norm(mask[z]) for z in zs]),
                        (0, mask.shape[0] - 1)))
    return gp_fit(entries)


def _anchors(mask, part):
    return {z: mask[z] for z in range(part.k1, part.k4)}


def test_cascade_oracle_inputs_reproduce_ground_truth():
    inten, mask, part = _phantom(0)
    prob = np.where(mask, 0.95, 0.05)
    gp = gp_fit([(np.arange(mask.shape[0], dtype=float),
                  np.array([centroid_norm(m) if m.any() else 0.0 for m in mask]),
                  (0, mask.shape[0] - 1))], hyper=(10.0, 100.0, 1e-6))
    out = process_group_one(prob, inten, part.k1, part.k4, _anchors(mask, part), gp, 0.0,
                            crf_params=_CRF)
    assert sorted(out) == list(range(part.k1)) + list(range(part.k4, mask.shape[0]))
    for z, m in out.items():
        np.testing.assert_array_equal(m, mask[z])


def test_cascade_removes_spurious_far_component():
    from scipy import ndimage
    inten, mask, part = _phantom(0)
    z = 8
    gt, ref = mask[z], mask[z + 1]
    prob = np.where(mask, 0.95, 0.05)
    r0, c0 = np.argwhere(ref).min(0)
    r1, c1 = np.argwhere(ref).max(0)
    # an L along the top and left sides of the reference box, kept clear of the true component
    spur = np.zeros_like(gt)
    spur[r0:r0 + 2, c0:c1 + 1] = True
    spur[r0:r1 + 1, c0:c0 + 2] = True
    spur &= ~ndimage.binary_dilation(gt, np.ones((3, 3)), iterations=2)
    assert ndimage.label(spur, np.ones((3, 3)))[1] == 1
    prob[z] = np.where(spur, 0.95, prob[z])
    cand = prob[z] >= 0.5
    # the centre and area rules both keep it
    kept = check_area(check_center(cand, ref), 0.4)
    assert (kept & spur).any() and (kept & gt).any()
    gp = _gp_for([mask])
    d = gp_predict(gp, convert_range(0, mask.shape[0] - 1, GP_LO, GP_HI, z))[0]
    difs = [abs(d - centroid_norm(gt)), abs(d - centroid_norm(spur))]
    assert difs[1] > 1.75 * difs[0]
    out = process_group_one(prob, inten, part.k1, part.k4, _anchors(mask, part), gp, 0.0,
                            crf_params=_CRF)
    assert not (out[z] & spur).any()
    assert dice(out[z], gt) > 0.9


def test_cascade_on_noisy_phantom_end_slices():
    rng = np.random.default_rng(0)
    inten, mask, part = _phantom(7, noise=0.03)
    from scipy import ndimage
    soft = ndimage.gaussian_filter(mask.astype(float), (0, 1.0, 1.0))
    prob = np.clip(0.1 + 0.8 * soft + rng.normal(0, 0.1, mask.shape), 0, 1)
    gp = _gp_for([_phantom(s)[1] for s in range(1, 6)])
    items = [(convert_range(0, mask.shape[0] - 1, GP_LO, GP_HI, z), mask[z]) for z in range(part.k1, part.k4)]
    shift = estimate_shift(items, gp)
    out = process_group_one(prob, inten, part.k1, part.k4, _anchors(mask, part), gp, shift,
                            crf_params=_CRF)
    # slices below the denoise size cannot survive the cascade by construction
    small = [z for z in out if 0 < mask[z].sum() < groupone.GroupOneParams().denoise_min]
    assert all(not out[z].any() for z in small)
    scores = {z: dice(out[z], mask[z]) for z in out if mask[z].sum() >= groupone.GroupOneParams().denoise_min}
    assert len(scores) >= 8 and min(scores.values()) >= 0.85, scores


def test_cascade_sweep_locality():
    inten, mask, part = _phantom(0)
    rng = np.random.default_rng(2)
    prob = np.clip(np.where(mask, 0.9, 0.1) + rng.normal(0, 0.05, mask.shape), 0, 1)
    gp = _gp_for([mask])
    base = process_group_one(prob, inten, part.k1, part.k4, _anchors(mask, part), gp, 0.0, crf_params=_CRF)
    i = part.k1 - 2
    pert = prob.copy()
    pert[:i] = np.roll(prob[:i], 5, axis=2)  # slices beyond i, away from the anchor
    pert[part.k1:part.k4] = 0.0  # group II/III maps are never read
    out = process_group_one(pert, inten, part.k1, part.k4, _anchors(mask, part), gp, 0.0, crf_params=_CRF)
    for z in list(range(i, part.k1)) + list(range(part.k4, mask.shape[0])):
        np.testing.assert_array_equal(out[z], base[z])


def test_cascade_empty_anchor_is_an_error():
    inten, mask, part = _phantom(0)
    gp = _gp_for([mask])
    anchors = _anchors(mask, part)
    anchors[part.k1] = np.zeros_like(mask[0])
    with pytest.raises(ValueError):
        process_group_one(mask.astype(float), inten, part.k1, part.k4, anchors, gp, 0.0)


def test_params_validation():
    with pytest.raises(ValueError):
        groupone.GroupOneParams(alpha_area=0.0)
    with pytest.raises(ValueError):
        groupone.GroupOneParams(beta_dist=0.5)
