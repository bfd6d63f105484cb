import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlci.bounds import (
    InfeasiblePlanError,
    bennett_bound,
    bennett_h,
    bennett_n,
    binomial_log_tail,
    ceil_count,
    exact_binomial_n,
    hoeffding_bound,
    hoeffding_n,
)


def test_hoeffding_closed_form():
    # -ln(0.05) / (2 * 0.1^2) = 149.786...
    assert hoeffding_bound(0.1, 0.05) == pytest.approx(-math.log(0.05) / 0.02)
    assert hoeffding_n(0.1, 0.05) == 150
    assert hoeffding_n(0.1, 0.05, r=2) == math.ceil(4 * -math.log(0.05) / 0.02)


def test_hoeffding_log_delta_matches_delta():
    assert hoeffding_n(0.05, 1e-4) == hoeffding_n(0.05, log_delta=math.log(1e-4))


def test_hoeffding_survives_tiny_delta():
    # delta / 2^32 for delta = 1e-4 is far below float resolution of 1 - delta
    ld = math.log(1e-4) - 32 * math.log(2)
    assert hoeffding_n(0.05, log_delta=ld) == 6279


@pytest.mark.parametrize("kwargs", [dict(eps=0.1, delta=0.0), dict(eps=0.1, delta=1.0), dict(eps=0.0, delta=0.1)])
def test_hoeffding_rejects_bad_input(kwargs):
    with pytest.raises(ValueError):
        hoeffding_n(**kwargs)


def test_delta_or_log_delta_required():
    with pytest.raises(TypeError):
        hoeffding_n(0.1)


def test_ceil_count():
    assert ceil_count(0.2) == 1
    assert ceil_count(10.0) == 10
    assert ceil_count(10.0 + 1e-12) == 10
    assert ceil_count(10.01) == 11
    with pytest.raises(InfeasiblePlanError):
        ceil_count(float("inf"))
    with pytest.raises(InfeasiblePlanError):
        ceil_count(1e30)


def test_bennett_h():
    assert bennett_h(0.0) == 0.0
    assert bennett_h(1.0) == pytest.approx(2 * math.log(2) - 1)
    # small-u expansion h(u) ~ u^2 / 2
    assert bennett_h(1e-4) == pytest.approx(0.5e-8, rel=1e-3)
    with pytest.raises(ValueError):
        bennett_h(-0.1)


def test_bennett_closed_form():
    p, eps, delta = 0.1, 0.01, 1e-4
    expected = -math.log(delta) / (p * ((1 + eps / p) * math.log(1 + eps / p) - eps / p))
    assert bennett_bound(p, eps, delta) == pytest.approx(expected)


def test_bennett_rejects_eps_above_range():
    with pytest.raises(ValueError):
        bennett_bound(0.5, 1.5, 0.1)


def test_bennett_clipped_by_hoeffding():
    # at p = 1 the variance bound is useless and Hoeffding over [-1, 1] wins
    assert bennett_n(1.0, 0.01, 1e-4) == hoeffding_n(0.01, 1e-4, r=2)
    assert bennett_n(1.0, 0.01, 1e-4, clip_range=1.0) == hoeffding_n(0.01, 1e-4, r=1)


@settings(max_examples=200, deadline=None)
@given(
    p=st.floats(0.01, 1.0),
    eps=st.floats(0.001, 0.2),
    delta=st.floats(1e-9, 0.5),
)
def test_bennett_never_worse_than_hoeffding(p, eps, delta):
    assert bennett_n(p, eps, delta) <= hoeffding_n(eps, delta, r=2)


@settings(max_examples=200, deadline=None)
@given(
    eps=st.floats(0.001, 0.5),
    factor=st.floats(1.0, 3.0),
    delta=st.floats(1e-9, 0.5),
    shrink=st.floats(0.01, 1.0),
)
def test_hoeffding_monotone(eps, factor, delta, shrink):
    assert hoeffding_n(eps * factor, delta) <= hoeffding_n(eps, delta)
    assert hoeffding_n(eps, delta) <= hoeffding_n(eps, delta * shrink)


@settings(max_examples=200, deadline=None)
@given(p=st.floats(0.02, 1.0), q=st.floats(0.02, 1.0), eps=st.floats(0.001, 0.02))
def test_bennett_monotone_in_variance(p, q, eps):
    lo, hi = sorted((p, q))
    assert bennett_bound(lo, eps, 1e-4) <= bennett_bound(hi, eps, 1e-4) * (1 + 1e-12)


# --------------------------------------------------------------------------
# Exact binomial
# --------------------------------------------------------------------------


def _tail_oracle(n: int, p: float, eps: float) -> float:
    """Pr[|X/n - p| > eps] by direct summation of the binomial pmf."""
    return sum(
        math.comb(n, k) * p**k * (1 - p) ** (n - k)
        for k in range(n + 1)
        if abs(k / n - p) > eps + 1e-12
    )


def _exact_oracle(c: float, eps: float, delta: float) -> int:
    """Smallest n whose tail is at most delta for every mean on a fine grid around c."""
    grid = np.linspace(max(0.0, c - eps), min(1.0, c + eps), 2001)
    n = 1
    while True:
        if all(_tail_oracle(n, float(p), eps) <= delta for p in grid):
            return n
        n += 1


@pytest.mark.parametrize("c, eps, delta", [(0.5, 0.2, 0.1), (0.9, 0.1, 0.05), (0.3, 0.15, 0.2)])
def test_exact_binomial_matches_dense_grid_oracle(c, eps, delta):
    # the dense oracle only samples the tail, so it can land below the supremum
    # but never above it: the exact count is at least the oracle's
    ours = exact_binomial_n(c, eps, delta)
    oracle = _exact_oracle(c, eps, delta)
    assert oracle <= ours <= oracle + 1


def test_exact_binomial_tail_is_worst_case_over_cell():
    n, eps = 40, 0.1
    # sup over p in a lattice cell is attained approaching the breakpoint
    p = 0.5
    dense = max(_tail_oracle(n, q, eps) for q in np.linspace(p - 0.012, p + 0.012, 241))
    assert math.exp(binomial_log_tail(n, p, eps)) >= dense - 1e-12


def test_exact_binomial_known_values():
    assert exact_binomial_n(0.5, 0.5, 0.5) == 1
    assert exact_binomial_n(0.9, 0.05, 0.001) == 570
    assert exact_binomial_n(0.9, 0.05, 0.001) < hoeffding_n(0.05, 0.0005)


def test_exact_binomial_infeasible_reports_fallback():
    with pytest.raises(InfeasiblePlanError) as err:
        exact_binomial_n(0.5, 0.001, 1e-6, max_n=1000)
    assert err.value.fallback == hoeffding_n(0.001, 1e-6)


@pytest.mark.parametrize("eps", [0.02, 0.05, 0.1])
@pytest.mark.parametrize("delta", [1e-2, 1e-4])
def test_exact_binomial_no_larger_than_two_sided_hoeffding(eps, delta):
    assert exact_binomial_n(0.8, eps, delta) <= hoeffding_n(eps, delta / 2)


def test_exact_binomial_monte_carlo():
    c, eps, delta = 0.9, 0.05, 0.01
    n = exact_binomial_n(c, eps, delta)
    rng = np.random.default_rng(7)
    for p in (c - eps, c, c + eps):
        x = rng.binomial(n, p, size=200_000)
        rate = np.mean(np.abs(x / n - p) > eps)
        assert rate <= delta + 3 * math.sqrt(delta * (1 - delta) / 200_000)


@settings(max_examples=500, deadline=None)
@given(u=st.floats(1e-6, 1e3))
def test_bennett_h_lower_bound(u):
    assert bennett_h(u) >= u * u / (2 + 2 * u / 3) * (1 - 1e-9)


def test_exact_binomial_monte_carlo_over_true_means():
    c, eps, delta = 0.9, 0.05, 0.001
    n = exact_binomial_n(c, eps, delta)
    rng = np.random.default_rng(11)
    draws = 1_000_000
    for p in np.linspace(c - eps, c + eps, 5):
        x = rng.binomial(n, p, size=draws)
        rate = np.mean(np.abs(x / n - p) > eps + 1e-12)
        assert rate <= delta + 3 * math.sqrt(delta * (1 - delta) / draws)
