import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from brainstrip import morphology as mo


def _two_blobs():
    m = np.zeros((10, 10), bool)
    m[1:3, 1:3] = True      # area 4
    m[5:9, 5:9] = True      # area 16
    return m


def test_diagonal_pixels_are_one_component():
    m = np.eye(4, dtype=bool)
    assert len(mo.components(m)) == 1


def test_areas_centroids_and_largest():
    labels, n = mo.label(_two_blobs())
    assert n == 2
    np.testing.assert_array_equal(mo.areas(labels, n), [4, 16])
    np.testing.assert_allclose(mo.centroids(labels, n), [[1.5, 1.5], [6.5, 6.5]])
    assert mo.largest_component(_two_blobs()).sum() == 16
    assert mo.remove_small(_two_blobs(), 5).sum() == 16
    assert mo.remove_small(_two_blobs(), 4).sum() == 20


def test_fill_small_holes_keeps_border_background():
    m = np.ones((7, 7), bool)
    m[3, 3] = False          # interior hole of area 1
    m[0, 0] = False          # touches border
    out = mo.fill_small_holes(m, 2)
    assert out[3, 3] and not out[0, 0]
    assert not mo.fill_small_holes(m, 1)[3, 3]


def test_bbox():
    assert mo.bbox(np.zeros((3, 3))) is None
    assert mo.bbox(_two_blobs()) == (1, 1, 8, 8)


def test_empty_mask_helpers():
    z = np.zeros((4, 4), bool)
    assert not mo.largest_component(z).any()
    assert mo.centroids(*mo.label(z)).shape == (0, 2)


@settings(max_examples=80, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_components_partition_the_mask(m):
    comps = mo.components(m)
    total = np.zeros_like(m)
    for c in comps:
        assert not (total & c).any()
        total |= c
    np.testing.assert_array_equal(total, m)
    filled = mo.fill_small_holes(m, 1000)
    assert (filled | ~m).all() and filled.sum() >= m.sum()
