import math
from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddifuse.exceptions import UndefinedMetricError
from ddifuse.metrics import (EvalReport, average_precision_stepwise, binary_prf, bootstrap_ci,
                             confusion_at, exact_mechanism_precision, format_report_table, mean_std,
                             prevalence, relative_fp_reduction, roc_auc, wilson_ci)

Z = 1.96


def wilson_by_quadratic(p_hat, n, z=Z):
    """Roots in p of (p_hat - p)^2 = z^2 p (1 - p) / n."""
    a = 1 + z * z / n
    b = -(2 * p_hat + z * z / n)
    c = p_hat * p_hat
    disc = max(b * b - 4 * a * c, 0.0)
    return (-b - math.sqrt(disc)) / (2 * a), (-b + math.sqrt(disc)) / (2 * a)


# statsmodels proportion_confint(method="wilson"), frozen; it uses the exact normal quantile
Z_EXACT = 1.959963984540054
WILSON_FROZEN = [
    (1, 1, 0.2065493143772374, 1.0),
    (50, 100, 0.4038315303659956, 0.5961684696340044),
    (0, 10, 0.0, 0.27753279986288926),
    (713, 1000, 0.6841895829243534, 0.7401802179608001),
    (9, 10, 0.5958499732047614, 0.982123786904927),
]


@pytest.mark.parametrize("count, n, lo, hi", WILSON_FROZEN)
def test_wilson_frozen(count, n, lo, hi):
    got = wilson_ci(count / n, n, z=Z_EXACT)
    assert got[0] == pytest.approx(lo, abs=1e-12)
    assert got[1] == pytest.approx(hi, abs=1e-12)


def test_wilson_single_success_lower_bound():
    # p_hat = 1, n = 1: lower bound is 1 / (1 + z^2)
    assert wilson_ci(1.0, 1)[0] == pytest.approx(1 / (1 + Z * Z), abs=1e-15)


def test_wilson_matches_quadratic_on_random_inputs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 5000))
        p = int(rng.integers(0, n + 1)) / n
        lo, hi = wilson_ci(p, n)
        qlo, qhi = wilson_by_quadratic(p, n)
        assert abs(lo - max(qlo, 0.0)) < 1e-10 and abs(hi - min(qhi, 1.0)) < 1e-10


@settings(max_examples=200, deadline=None)
@given(p=st.floats(0, 1), n=st.integers(1, 10_000))
def test_wilson_properties(p, n):
    lo, hi = wilson_ci(p, n)
    assert 0.0 <= lo <= p + 1e-12 and p - 1e-12 <= hi <= 1.0
    lo2, hi2 = wilson_ci(p, n + 1)
    assert hi2 - lo2 <= hi - lo + 1e-12


def test_wilson_errors():
    with pytest.raises(UndefinedMetricError):
        wilson_ci(0.5, 0)
    with pytest.raises(ValueError):
        wilson_ci(1.2, 10)


def auc_all_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in product(pos, neg))
    return total / (len(pos) * len(neg))


def test_roc_auc_matches_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, 20, n).astype(float)  # many ties
        assert abs(roc_auc(scores, labels) - auc_all_pairs(scores, labels)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(-1000, 1000), st.booleans()), min_size=2, max_size=60))
def test_roc_auc_invariant_under_monotone_transform(rows):
    scores = np.array([r[0] for r in rows], dtype=float) / 10.0
    labels = np.array([r[1] for r in rows])
    if labels.all() or not labels.any():
        return
    assert roc_auc(scores, labels) == pytest.approx(roc_auc(np.exp(scores / 50.0) * 3 + 1, labels), abs=1e-12)


def test_roc_auc_needs_both_classes():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


# rankings enumerated by hand: labels in descending-score order, tied blocks marked
AP_CASES = [
    ([0.9, 0.8, 0.7, 0.6, 0.5], [1, 0, 1, 0, 0], Fraction(1, 2) * (1 + Fraction(2, 3))),
    ([0.9, 0.8, 0.7], [1, 1, 1], Fraction(1)),
    ([0.9, 0.8, 0.7], [0, 0, 1], Fraction(1, 3)),
    ([0.9, 0.8, 0.7, 0.6], [0, 1, 0, 1], Fraction(1, 2) * (Fraction(1, 2) + Fraction(2, 4))),
    ([0.5, 0.5, 0.5, 0.5], [1, 1, 0, 0], Fraction(1, 2)),                 # one tied block
    ([0.9, 0.9, 0.3, 0.1], [0, 1, 1, 0], Fraction(1, 2) * (Fraction(1, 2) + Fraction(2, 3))),
    ([3, 2, 1], [1, 0, 0], Fraction(1)),
    ([1, 2, 3, 4, 5], [1, 0, 0, 0, 0], Fraction(1, 5)),
    ([0.7, 0.7, 0.2, 0.2, 0.1], [1, 0, 1, 0, 1],                          # two tied blocks
     Fraction(1, 3) * (Fraction(1, 2) + Fraction(2, 4) + Fraction(3, 5))),
    ([0.9, 0.8, 0.8, 0.4, 0.3, 0.2], [1, 1, 0, 0, 1, 0],
     Fraction(1, 3) * (1 + Fraction(2, 3) + Fraction(3, 5))),
]


@pytest.mark.parametrize("scores, labels, expected", AP_CASES)
def test_average_precision_hand_enumerated(scores, labels, expected):
    assert average_precision_stepwise(scores, labels) == pytest.approx(float(expected), abs=1e-15)


def test_average_precision_random_scorer_tends_to_prevalence():
    rng = np.random.default_rng(0)
    labels = rng.random(100_000) < 0.09
    assert abs(average_precision_stepwise(rng.random(100_000), labels) - prevalence(labels)) < 0.02


def test_average_precision_needs_positive():
    with pytest.raises(UndefinedMetricError):
        average_precision_stepwise([0.1], [0])


def test_relative_fp_reduction():
    assert 0.515 <= relative_fp_reduction(0.9008, 0.8133) <= 0.525
    assert relative_fp_reduction(0.7, 0.7) == 0.0
    assert relative_fp_reduction(1.0, 0.6) == 1.0
    with pytest.raises(ZeroDivisionError):
        relative_fp_reduction(0.9, 1.0)
    with pytest.raises(ValueError):
        relative_fp_reduction(0.0, 0.5)


@settings(max_examples=50, deadline=None)
@given(p=st.floats(0.001, 0.999))
def test_relative_fp_reduction_identity(p):
    assert relative_fp_reduction(p, p) == pytest.approx(0.0, abs=1e-12)


def test_binary_prf():
    assert binary_prf(3, 1, 2) == pytest.approx((0.75, 0.6, 2 * 0.75 * 0.6 / 1.35))
    assert binary_prf(0, 5, 5) == (0.0, 0.0, 0.0)
    with pytest.raises(UndefinedMetricError):
        binary_prf(0, 0, 0)


@settings(max_examples=100, deadline=None)
@given(tp=st.integers(1, 100), fp=st.integers(0, 100), fn=st.integers(0, 100))
def test_f1_is_harmonic_mean(tp, fp, fn):
    p, r, f = binary_prf(tp, fp, fn)
    assert f <= (p + r) / 2 + 1e-12
    if math.isclose(p, r):
        assert f == pytest.approx(p)


def test_exact_mechanism_precision():
    assert exact_mechanism_precision([1, 2, 3, 0], [1, 2, 0, 0]) == 0.75
    with pytest.raises(UndefinedMetricError):
        exact_mechanism_precision([], [])


def test_bootstrap_deterministic_and_brackets_mean():
    x = np.random.default_rng(3).random(200) < 0.7
    a = bootstrap_ci(x, 500, seed=1)
    assert a == bootstrap_ci(x, 500, seed=1)
    assert a[0] <= x.mean() <= a[1]
    assert bootstrap_ci(lambda rng: float(rng.random()), 200, seed=0)[1] <= 1.0
    with pytest.raises(ValueError):
        bootstrap_ci(x, 10)


def test_confusion_at_and_mean_std():
    assert confusion_at([0.9, 0.5, 0.5, 0.1], [1, 0, 1, 0], 0.5) == (2, 1, 0, 1)
    assert mean_std([1.0, 2.0, 3.0]) == (2.0, 1.0)
    assert mean_std([4.0]) == (4.0, 0.0)


def test_eval_report_roundtrip_and_table():
    r = EvalReport("student", "node", [0], 0.7, (0.6, 0.8), (0.62, 0.78), 0.3, 0.9, 0.45, 0.85, 0.4,
                   0.09, 1.5, spread={"f1": 0.01})
    r.check()
    assert EvalReport.from_dict(r.to_dict()) == r
    table = format_report_table([r])
    assert "student" in table and "0.4500 ± 0.0100" in table
    r.f1 = 1.5
    with pytest.raises(ValueError):
        r.check()
