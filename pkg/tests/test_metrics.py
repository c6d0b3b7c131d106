import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

import oracles
from cmrfcn import data, metrics
from cmrfcn.errors import ShapeError

SP = (1.8, 1.8, 10.0)
masks = arrays(bool, st.tuples(st.integers(1, 2), st.integers(1, 8), st.integers(1, 8)))


def pair(shape=(2, 8, 8)):
    return st.tuples(arrays(bool, shape), arrays(bool, shape))


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    a[:2, :2] = True
    assert metrics.dice(a, a) == 1.0
    b = np.zeros_like(a)
    b[3, 3] = True
    assert metrics.dice(a, b) == 0.0
    c = np.zeros_like(a)
    c[0, :2] = True
    assert metrics.dice(a, c) == pytest.approx(2 / 3)
    assert metrics.dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ShapeError):
        metrics.dice(a, a[:2])


def test_contour_examples():
    one = np.zeros((5, 5), bool)
    one[2, 3] = True
    np.testing.assert_array_equal(metrics.extract_contour(one, SP), [[3 * 1.8, 2 * 1.8, 0.0]])
    sq = np.zeros((6, 6), bool)
    sq[1:5, 1:5] = True
    assert len(metrics.contour_voxels(sq)) == 12
    # the grid edge counts as background
    assert len(metrics.contour_voxels(np.ones((3, 3), bool))) == 8


def test_parallel_lines():
    a = np.zeros((8, 8), bool)
    b = np.zeros((8, 8), bool)
    a[:, 1] = True
    b[:, 4] = True
    assert metrics.mean_contour_distance(a, b, SP) == pytest.approx(5.4, abs=1e-12)
    assert metrics.hausdorff(a, b, SP) == pytest.approx(5.4, abs=1e-12)


def test_identical_and_empty():
    a = np.zeros((1, 6, 6), bool)
    a[0, 1:4, 2:5] = True
    assert metrics.mean_contour_distance(a, a, SP) == 0 and metrics.hausdorff(a, a, SP) == 0
    empty = np.zeros_like(a)
    assert metrics.mean_contour_distance(a, empty, SP) is None
    assert metrics.hausdorff(empty, a, SP) is None


@given(masks.flatmap(lambda m: st.tuples(st.just(m), arrays(bool, m.shape))))
def test_contour_matches_neighbour_scan(ab):
    a, _ = ab
    got = sorted(map(tuple, metrics.extract_contour(a, SP)))
    assert got == sorted(oracles.contour_points(a, SP))


@given(pair())
def test_distances_match_brute_force(ab):
    a, b = ab
    mcd, hd = metrics.mean_contour_distance(a, b, SP), metrics.hausdorff(a, b, SP)
    bm, bh = oracles.mcd_brute(a, b, SP), oracles.hd_brute(a, b, SP)
    if bm is None:
        assert mcd is None and hd is None
    else:
        assert abs(mcd - bm) <= 1e-9 and abs(hd - bh) <= 1e-9
    assert metrics.dice(a, b) == oracles.dice_brute(a, b)


def test_per_slice_mode():
    a = np.zeros((2, 8, 8), bool)
    b = np.zeros((2, 8, 8), bool)
    a[0, 2:5, 2:5] = True
    b[0, 2:5, 3:6] = True
    a[1, 1:3, 1:3] = True
    b[1, 1:3, 1:3] = True
    hd3 = metrics.hausdorff(a, b, SP)
    hd2 = metrics.hausdorff(a, b, SP, per_slice=True)
    assert hd2 == pytest.approx(1.8) and hd3 == pytest.approx(1.8)
    # per slice, the second slice contributes 0 to the mean
    assert metrics.mean_contour_distance(a, b, SP, per_slice=True) < metrics.mean_contour_distance(a[:1], b[:1], SP)


@given(pair())
def test_metrics_are_symmetric(ab):
    a, b = ab
    assert metrics.dice(a, b) == metrics.dice(b, a)
    assert metrics.mean_contour_distance(a, b, SP) == metrics.mean_contour_distance(b, a, SP)
    assert metrics.hausdorff(a, b, SP) == metrics.hausdorff(b, a, SP)


@given(pair())
def test_dice_range_and_mcd_below_hd(ab):
    a, b = ab
    d = metrics.dice(a, b)
    assert 0 <= d <= 1 and metrics.dice(a, a) == 1
    mcd = metrics.mean_contour_distance(a, b, SP)
    if mcd is not None:
        assert mcd <= metrics.hausdorff(a, b, SP) + 1e-12


@given(pair((1, 4, 4)), st.integers(0, 4), st.integers(0, 4))
def test_translation_invariance(ab, dy, dx):
    # a one-voxel empty margin keeps the grid boundary out of every contour
    a, b = (np.pad(m, ((0, 0), (1, 1), (1, 1))) for m in ab)
    shift = lambda m: np.pad(m, ((0, 0), (dy, 4 - dy), (dx, 4 - dx)))
    base = lambda m: np.pad(m, ((0, 0), (0, 4), (0, 4)))
    for fn in (metrics.dice, lambda u, v: metrics.hausdorff(u, v, SP),
               lambda u, v: metrics.mean_contour_distance(u, v, SP)):
        r0, r1 = fn(base(a), base(b)), fn(shift(a), shift(b))
        assert r0 == r1 or abs(r0 - r1) < 1e-12


@given(st.integers(0, 9))
def test_dice_grows_with_overlap(k):
    a = np.zeros(20, bool)
    a[:10] = True
    b1 = np.zeros(20, bool)
    b1[k:k + 10] = True
    b2 = np.zeros(20, bool)
    b2[max(k - 1, 0):max(k - 1, 0) + 10] = True
    assert metrics.dice(a, b2) >= metrics.dice(a, b1)


def test_evaluate_pair_rules():
    spec = data.clean_spec(data.PhantomSpec(n_frames=4, es_frame=2))
    _, lab = data.generate_phantom(spec)
    m = lab.data[0]
    rep = metrics.evaluate_pair(m, m, (1, 2, 3), SP)
    for c in (1, 2, 3):
        assert (rep[c].dice, rep[c].mcd, rep[c].hd) == (1.0, 0.0, 0.0)
    auto = np.where(m == 3, 0, m)
    rep = metrics.evaluate_pair(auto, m, (1, 2, 3), SP)
    assert rep[3].dice == 0.0 and rep[3].mcd is None and rep[3].hd is None
    with pytest.raises(ShapeError):
        metrics.evaluate_pair(m, m[:2], (1,), SP)


def test_dilation_by_one_pixel():
    spec = data.clean_spec(data.PhantomSpec(n_frames=4, es_frame=2))
    _, lab = data.generate_phantom(spec)
    manual = lab.data[0] == data.LV_CAVITY
    cross = np.zeros((3, 3, 3), bool)
    cross[1] = [[0, 1, 0], [1, 1, 1], [0, 1, 0]]
    auto = ndimage.binary_dilation(manual, structure=cross)
    mcd = metrics.mean_contour_distance(auto, manual, SP)
    assert abs(mcd - 1.8) <= 0.3 * 1.8


def test_metric_csv_blanks(tmp_path):
    metrics.write_metric_csv(tmp_path / "m.csv", [("s1", "RV cavity", metrics.ClassMetrics(0.0, None, None))])
    assert (tmp_path / "m.csv").read_text().splitlines()[1] == "s1,RV cavity,0.0,,"
