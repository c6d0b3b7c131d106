"""Agreement statistics and group comparisons.

The Student-t tail probability is evaluated here through the regularised
incomplete beta function (modified Lentz continued fraction) rather than
imported, so the p-values can be checked against an independent quadrature.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InsufficientDataError

LOA_Z = 1.96


@dataclass
class PairedSample:
    reference: np.ndarray  # x, manual / reference measurement
    other: np.ndarray  # y, automated measurement
    measure: str = ""
    units: str = ""

    def __post_init__(self):
        self.reference = np.asarray(self.reference, dtype=np.float64)
        self.other = np.asarray(self.other, dtype=np.float64)
        if self.reference.shape != self.other.shape or self.reference.ndim != 1:
            raise ValueError("paired sample needs two equal-length 1-D sequences")
        if len(self.reference) < 1:
            raise InsufficientDataError("paired sample is empty")

    def __len__(self):
        return len(self.reference)


@dataclass
class DiffStats:
    mean_abs: float
    sd_abs: float
    mean_rel_pct: float
    sd_rel_pct: float
    n: int


def paired_diff_stats(sample: PairedSample, floor: float = 1e-9) -> DiffStats:
    """Mean/SD of |y - x| and of 100 |y - x| / max(|x|, floor)."""
    n = len(sample)
    if n < 2:
        raise InsufficientDataError("need at least two pairs for a standard deviation")
    absd = np.abs(sample.other - sample.reference)
    rel = 100.0 * absd / np.maximum(np.abs(sample.reference), floor)
    return DiffStats(float(absd.mean()), float(absd.std(ddof=1)),
                     float(rel.mean()), float(rel.std(ddof=1)), n)


@dataclass
class BlandAltmanResult:
    bias: float
    sd: float
    lower: float
    upper: float
    n: int
    means: np.ndarray
    diffs: np.ndarray


def bland_altman(sample: PairedSample) -> BlandAltmanResult:
    """Bias of y - x and limits of agreement at bias -/+ 1.96 SD."""
    n = len(sample)
    if n < 2:
        raise InsufficientDataError("need at least two pairs for limits of agreement")
    diffs = sample.other - sample.reference
    means = (sample.other + sample.reference) / 2
    bias = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    return BlandAltmanResult(bias, sd, bias - LOA_Z * sd, bias + LOA_Z * sd, n, means, diffs)


def write_bland_altman(result: BlandAltmanResult, csv_path, svg_path=None, title="") -> None:
    """Points and reference lines as CSV, plus an optional SVG plot."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "mean", "diff"])
        for m, d in zip(result.means, result.diffs):
            w.writerow(["point", repr(float(m)), repr(float(d))])
        for kind, y in (("bias", result.bias), ("lower_loa", result.lower), ("upper_loa", result.upper)):
            w.writerow([kind, "", repr(y)])
    if svg_path is None:
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "cmrfcn"
    fig, ax = plt.subplots(figsize=(4, 3.2))
    ax.scatter(result.means, result.diffs, s=8, color="k")
    ax.axhline(result.bias, color="0.2", ls="--", lw=1)
    for y in (result.lower, result.upper):
        ax.axhline(y, color="0.6", ls="--", lw=1)
    ax.set_xlabel("mean of two measurements")
    ax.set_ylabel("difference")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# Student t distribution

_FPMIN = 1e-300
_EPS = 1e-15


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if not (a > 0 and b > 0):
        raise ValueError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the fraction converges fast for x < (a + 1) / (a + b + 2); use symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return min(1.0, betainc_regularized(df / 2.0, 0.5, x))


@dataclass
class TTestResult:
    t: float
    df: float
    p: float


def welch_t_test(group_a: Sequence[float], group_b: Sequence[float]) -> TTestResult:
    """Two-sided unequal-variance t-test of mean(a) - mean(b)."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise InsufficientDataError("each group needs at least two observations")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        raise InsufficientDataError("both groups have zero variance")
    sa, sb = va / len(a), vb / len(b)
    se2 = sa + sb
    t = float((a.mean() - b.mean()) / math.sqrt(se2))
    df = se2 ** 2 / (sa ** 2 / (len(a) - 1) + sb ** 2 / (len(b) - 1))
    return TTestResult(t, float(df), t_two_sided_p(t, df))


# ---------------------------------------------------------------------------
# report tables


@dataclass
class CohortRow:
    measure: str
    a_mean: float | None
    a_sd: float | None
    b_mean: float | None
    b_sd: float | None
    p: float | None
    flagged: bool = False


def _mean_sd(v):
    if len(v) == 0:
        return None, None
    return float(np.mean(v)), (float(np.std(v, ddof=1)) if len(v) > 1 else None)


def cohort_table(measures: Mapping[str, Mapping[str, float | None]], grouping: Mapping[str, str],
                 measure_names: Sequence[str], groups: tuple | None = None) -> list[CohortRow]:
    """Per-measure group means/SDs and Welch p-values.

    ``measures`` maps subject -> {measure: value}; ``grouping`` maps subject
    -> group label. Rows where a group has fewer than two values are flagged
    and carry no p-value.
    """
    if groups is None:
        groups = tuple(sorted(set(grouping.values())))
    if len(groups) != 2:
        raise ValueError(f"cohort comparison needs exactly two groups, got {groups}")
    ga, gb = groups
    rows = []
    for name in measure_names:
        va = [measures[s][name] for s, g in sorted(grouping.items())
              if g == ga and s in measures and measures[s].get(name) is not None]
        vb = [measures[s][name] for s, g in sorted(grouping.items())
              if g == gb and s in measures and measures[s].get(name) is not None]
        (am, asd), (bm, bsd) = _mean_sd(va), _mean_sd(vb)
        p, flagged = None, False
        try:
            p = welch_t_test(va, vb).p
        except InsufficientDataError:
            flagged = True
            if len(va) >= 2 and len(vb) >= 2 and am == bm:
                # both groups constant and equal: no evidence of a difference
                p, flagged = 1.0, False
        rows.append(CohortRow(name, am, asd, bm, bsd, p, flagged))
    return rows


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_cohort_csv(path, rows: Sequence[CohortRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["measure", "group_a_mean", "group_a_sd", "group_b_mean", "group_b_sd", "p_value", "flag"])
        for r in rows:
            w.writerow([r.measure, _fmt(r.a_mean), _fmt(r.a_sd), _fmt(r.b_mean), _fmt(r.b_sd), _fmt(r.p),
                        "insufficient_data" if r.flagged else ""])


def write_agreement_csv(path, rows: Sequence[tuple[str, DiffStats]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["measure", "mean_abs_diff", "sd", "mean_rel_diff_pct", "sd_rel_pct", "n"])
        for name, d in rows:
            w.writerow([name, repr(d.mean_abs), repr(d.sd_abs), repr(d.mean_rel_pct), repr(d.sd_rel_pct), d.n])
