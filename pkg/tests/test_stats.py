import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from cmrfcn import stats
from cmrfcn.errors import InsufficientDataError

values = st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=20)


def test_paired_diff_examples():
    d = stats.paired_diff_stats(stats.PairedSample([1, 2, 3], [1, 2, 3]))
    assert (d.mean_abs, d.sd_abs) == (0, 0)
    d = stats.paired_diff_stats(stats.PairedSample([100, 100], [106, 94]))
    assert (d.mean_abs, d.sd_abs) == (6, 0)
    assert d.mean_rel_pct == 6


def test_paired_diff_hand_computed(rng):
    x = rng.uniform(50, 200, 15)
    y = x + rng.normal(0, 5, 15)
    d = stats.paired_diff_stats(stats.PairedSample(x, y))
    absd = [abs(b - a) for a, b in zip(x, y)]
    m = sum(absd) / len(absd)
    sd = math.sqrt(sum((v - m) ** 2 for v in absd) / (len(absd) - 1))
    rel = [100 * v / abs(a) for v, a in zip(absd, x)]
    mr = sum(rel) / len(rel)
    assert abs(d.mean_abs - m) < 1e-9 and abs(d.sd_abs - sd) < 1e-9 and abs(d.mean_rel_pct - mr) < 1e-9


def test_bland_altman_worked_example():
    r = stats.bland_altman(stats.PairedSample([10, 20, 30], [12, 18, 33]))
    assert r.bias == pytest.approx(1.0, abs=1e-12)
    assert r.sd == pytest.approx(math.sqrt(7), abs=1e-12)
    assert abs(r.lower + 4.186) < 1e-3 and abs(r.upper - 6.186) < 1e-3


def test_bland_altman_identity_and_errors():
    r = stats.bland_altman(stats.PairedSample([1, 2, 3], [1, 2, 3]))
    assert (r.bias, r.lower, r.upper) == (0, 0, 0)
    with pytest.raises(InsufficientDataError):
        stats.bland_altman(stats.PairedSample([1], [2]))
    with pytest.raises(ValueError):
        stats.PairedSample([1, 2], [1])


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=2, max_size=20),
       st.floats(-100, 100))
def test_bland_altman_properties(pairs, c):
    x, y = zip(*pairs)
    r = stats.bland_altman(stats.PairedSample(x, y))
    assert r.lower <= r.bias <= r.upper
    assert abs(r.upper - (r.bias + 1.96 * r.sd)) <= 1e-12 * max(1, abs(r.upper))
    shifted = stats.bland_altman(stats.PairedSample(x, [v + c for v in y]))
    assert shifted.bias == pytest.approx(r.bias + c, abs=1e-9)
    assert shifted.sd == pytest.approx(r.sd, abs=1e-7)
    swapped = stats.paired_diff_stats(stats.PairedSample(y, x))
    assert swapped.mean_abs == pytest.approx(stats.paired_diff_stats(stats.PairedSample(x, y)).mean_abs)
    perm = stats.bland_altman(stats.PairedSample(x[::-1], y[::-1]))
    assert perm.bias == pytest.approx(r.bias, abs=1e-9)


def test_bland_altman_files(tmp_path):
    r = stats.bland_altman(stats.PairedSample([10, 20, 30], [12, 18, 33]))
    stats.write_bland_altman(r, tmp_path / "a.csv", tmp_path / "a.svg", title="LVEDV")
    stats.write_bland_altman(r, tmp_path / "b.csv", tmp_path / "b.svg", title="LVEDV")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    rows = (tmp_path / "a.csv").read_text().splitlines()
    assert rows[0] == "kind,mean,diff" and rows[-3].startswith("bias")


def test_betainc_against_scipy_free_values():
    # I_x(1, 1) = x and I_x(a, 1) = x^a
    for x in (0.1, 0.5, 0.93):
        assert stats.betainc_regularized(1, 1, x) == pytest.approx(x, abs=1e-14)
        assert stats.betainc_regularized(2.5, 1, x) == pytest.approx(x ** 2.5, abs=1e-14)
    # t with 1 dof is Cauchy: P(|T| >= t) = 1 - 2 atan(t) / pi
    for t in (0.3, 1.0, 12.0):
        assert stats.t_two_sided_p(t, 1) == pytest.approx(1 - 2 * math.atan(t) / math.pi, abs=1e-13)


def test_welch_against_quadrature(rng):
    for _ in range(20):
        na, nb = rng.integers(2, 15, 2)
        a = rng.normal(rng.uniform(-2, 2), rng.uniform(0.2, 3), na)
        b = rng.normal(rng.uniform(-2, 2), rng.uniform(0.2, 3), nb)
        res = stats.welch_t_test(a, b)
        p, t, nu = oracles.welch_p_quadrature(a, b)
        assert abs(res.p - p) < 1e-6
        assert res.t == pytest.approx(t, rel=1e-12) and res.df == pytest.approx(nu, rel=1e-12)


def test_welch_examples():
    r = stats.welch_t_test([1, 2, 3], [1, 2, 3])
    assert r.t == 0 and r.p == 1
    r = stats.welch_t_test([1, 1.001, 0.999], [11, 11.001, 10.999])
    assert r.p < 0.001
    with pytest.raises(InsufficientDataError):
        stats.welch_t_test([1], [1, 2])
    with pytest.raises(InsufficientDataError):
        stats.welch_t_test([2, 2], [2, 2])


@given(values, values)
def test_welch_swap_symmetry(a, b):
    if np.var(a) == 0 and np.var(b) == 0:
        return
    r1, r2 = stats.welch_t_test(a, b), stats.welch_t_test(b, a)
    assert r1.t == -r2.t and r1.p == pytest.approx(r2.p, abs=1e-15)
    assert 0 <= r1.p <= 1
    r3 = stats.welch_t_test(a[::-1], b[::-1])
    assert r3.p == pytest.approx(r1.p, abs=1e-9)


def test_cohort_table(tmp_path):
    measures = {f"s{i}": {"LVEDV_ml": v, "LVEF_pct": e} for i, (v, e) in
                enumerate([(100, 55), (110, 60), (120, 58), (100, 55), (110, 60), (120, 58)])}
    grouping = {f"s{i}": "a" if i < 3 else "b" for i in range(6)}
    rows = stats.cohort_table(measures, grouping, ["LVEDV_ml", "LVEF_pct"])
    for r in rows:
        assert r.a_mean == r.b_mean and r.p == 1.0 and not r.flagged
    grouping["s5"] = "c"
    with pytest.raises(ValueError):
        stats.cohort_table(measures, grouping, ["LVEDV_ml"])
    lonely = {"s0": "a", "s1": "a", "s2": "b"}
    row, = stats.cohort_table(measures, lonely, ["LVEDV_ml"])
    assert row.flagged and row.p is None and row.b_sd is None
    stats.write_cohort_csv(tmp_path / "c.csv", [row])
    assert (tmp_path / "c.csv").read_text().splitlines()[1].endswith(",,insufficient_data")
