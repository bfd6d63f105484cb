"""Sample-size bounds for estimating bounded means.

Every function returns the number of i.i.d. samples needed so that an
empirical mean lands within ``eps`` of the true mean except with
probability ``delta``. Failure probabilities can get astronomically small
once they are divided across ``2**H`` adaptive histories, so each bound also
accepts ``log_delta`` (natural log) in place of ``delta``.

Conventions: the Hoeffding and Bennett counts use the one-sided constant,
``exp(-2 n eps^2 / r^2)`` and ``exp(-n p h(eps/p))``; callers that need a
two-sided guarantee halve ``delta`` themselves.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy import stats

MAX_SAMPLES = 2**53
EXACT_MAX_N = 10**7
_CEIL_SLACK = 1e-9


class InfeasiblePlanError(ValueError):
    """Raised when a bound asks for an absurd number of samples."""

    def __init__(self, message: str, fallback: Optional[int] = None):
        super().__init__(message)
        self.fallback = fallback


def _log_delta(delta: Optional[float], log_delta: Optional[float]) -> float:
    if log_delta is None:
        if delta is None:
            raise TypeError("either delta or log_delta is required")
        if not (0 < delta < 1):
            raise ValueError(f"delta must lie in (0, 1), got {delta}")
        return math.log(delta)
    if not log_delta < 0:
        raise ValueError(f"log_delta must be negative, got {log_delta}")
    return log_delta


def ceil_count(x: float) -> int:
    """Ceiling of a real-valued sample bound, at least 1."""
    if not math.isfinite(x) or x > MAX_SAMPLES:
        raise InfeasiblePlanError(f"infeasible plan: bound requires {x:.4g} samples")
    return max(1, math.ceil(x - _CEIL_SLACK))


def hoeffding_bound(
    eps: float, delta: Optional[float] = None, r: float = 1.0, *, log_delta: Optional[float] = None
) -> float:
    """Real-valued Hoeffding count ``-r^2 ln(delta) / (2 eps^2)``."""
    ld = _log_delta(delta, log_delta)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if r <= 0:
        raise ValueError("range must be positive")
    return -(r * r) * ld / (2.0 * eps * eps)


def hoeffding_n(
    eps: float, delta: Optional[float] = None, r: float = 1.0, *, log_delta: Optional[float] = None
) -> int:
    return ceil_count(hoeffding_bound(eps, delta, r, log_delta=log_delta))


def bennett_h(u: float) -> float:
    """``h(u) = (1 + u) ln(1 + u) - u``."""
    if u < 0:
        raise ValueError("h(u) is defined for u >= 0")
    if u == 0:
        return 0.0
    return (1.0 + u) * math.log1p(u) - u


def bennett_bound(
    p: float,
    eps: float,
    delta: Optional[float] = None,
    b: float = 1.0,
    *,
    log_delta: Optional[float] = None,
) -> float:
    """Real-valued Bennett count for variables with ``|X| <= b`` and ``E[X^2] <= p``.

    Inverts ``exp(-(n p / b^2) h(b eps / p))`` for ``n``.
    """
    ld = _log_delta(delta, log_delta)
    if not (0 < p):
        raise ValueError("variance bound p must be positive")
    if eps <= 0 or b <= 0:
        raise ValueError("eps and b must be positive")
    if eps > b:
        raise ValueError("eps cannot exceed the per-sample bound b")
    return -ld * b * b / (p * bennett_h(b * eps / p))


def bennett_n(
    p: float,
    eps: float,
    delta: Optional[float] = None,
    b: float = 1.0,
    *,
    log_delta: Optional[float] = None,
    clip_range: Optional[float] = None,
) -> int:
    """Bennett sample count, never worse than Hoeffding.

    ``clip_range`` is the width of the variable's support used for the
    Hoeffding comparison; it defaults to ``2 b`` (support ``[-b, b]``).
    Pass ``b`` for nonnegative variables.
    """
    ld = _log_delta(delta, log_delta)
    n_bennett = ceil_count(bennett_bound(p, eps, b=b, log_delta=ld))
    n_hoeffding = hoeffding_n(eps, r=clip_range or 2.0 * b, log_delta=ld)
    return min(n_bennett, n_hoeffding)


# --------------------------------------------------------------------------
# Exact binomial
# --------------------------------------------------------------------------


def _mean_grid(c: float, eps: float, step: float = 1e-3) -> np.ndarray:
    lo, hi = max(0.0, c - eps), min(1.0, c + eps)
    grid = np.arange(lo, hi, step)
    return np.unique(np.clip(np.concatenate([grid, [lo, hi, min(max(c, 0.0), 1.0)]]), 0.0, 1.0))


def _one_sided_logs(n, p, eps):
    hi = n * (p + eps)
    lo = n * (p - eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        up_strict = stats.binom.logsf(np.floor(hi + _CEIL_SLACK), n, p)
        up_closed = stats.binom.logsf(np.ceil(hi - _CEIL_SLACK) - 1, n, p)
        low_strict = stats.binom.logcdf(np.ceil(lo - _CEIL_SLACK) - 1, n, p)
        low_closed = stats.binom.logcdf(np.floor(lo + _CEIL_SLACK), n, p)
    left = np.logaddexp(up_closed, low_strict)
    right = np.logaddexp(up_strict, low_closed)
    return left, right


def binomial_log_tail(n: np.ndarray, p: np.ndarray, eps: float) -> np.ndarray:
    """Worst-case ``ln Pr[|X/n - p| > eps]`` for ``X ~ Binomial(n, p)`` around each ``p``.

    The strict tail jumps wherever ``n (p +/- eps)`` crosses an integer, so
    sampling it only at ``p`` can land in a lucky trough. For each ``p`` the
    supremum is taken over the lattice cells touching it: the upper tail
    peaks just left of the next breakpoint ``k/n - eps`` and the lower tail
    just right of the previous one ``k/n + eps``. Broadcasts over n and p.
    """
    n, p = np.broadcast_arrays(np.asarray(n, dtype=float), np.asarray(p, dtype=float))
    left, right = _one_sided_logs(n, p, eps)
    worst = np.maximum(left, right)
    p_up = np.clip(np.ceil(n * (p + eps) - _CEIL_SLACK) / n - eps, 0.0, 1.0)
    worst = np.maximum(worst, _one_sided_logs(n, p_up, eps)[0])
    p_low = np.clip(np.floor(n * (p - eps) + _CEIL_SLACK) / n + eps, 0.0, 1.0)
    worst = np.maximum(worst, _one_sided_logs(n, p_low, eps)[1])
    return worst


def exact_binomial_n(
    c: float,
    eps: float,
    delta: Optional[float] = None,
    *,
    log_delta: Optional[float] = None,
    max_n: int = EXACT_MAX_N,
) -> int:
    """Smallest ``n`` whose worst-case two-sided binomial tail is at most ``delta``.

    The worst case is taken over true means on a 1e-3 grid covering
    ``[c - eps, c + eps]``, the only region where an ``eps``-accurate
    estimate can flip the verdict of a clause with threshold ``c``.
    """
    ld = _log_delta(delta, log_delta)
    if eps <= 0:
        raise ValueError("eps must be positive")
    grid = _mean_grid(c, eps)
    # the highest-variance mean gives a cheap lower bound on the worst case
    pivot = grid[np.argmin(np.abs(grid - 0.5))]
    start, block = 1, 64
    while start <= max_n:
        ns = np.arange(start, min(start + block, max_n + 1))
        candidates = ns[binomial_log_tail(ns, pivot, eps) <= ld]
        if candidates.size:
            worst = binomial_log_tail(candidates[:, None], grid[None, :], eps).max(axis=1)
            ok = np.nonzero(worst <= ld)[0]
            if ok.size:
                return int(candidates[ok[0]])
        start += block
        block = min(block * 2, 8192)
    fallback = hoeffding_n(eps, log_delta=ld)
    raise InfeasiblePlanError(
        f"exact binomial bound exceeds {max_n} samples; Hoeffding fallback is {fallback}",
        fallback=fallback,
    )
