"""Monte Carlo validation of plans against worlds with known ground truth.

A world fixes the accuracy of the old model, the accuracy of the new one
and their disagreement rate. With binary labels these determine a unique
joint distribution over the four (old correct, new correct) cells, so a
testset can be simulated by counts alone: each trial draws how many
examples the old model gets right, and each commit draws the new model's
errors conditionally on that, which keeps the same testset in play across
all commits of a trial.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Protocol, Sequence, Union

import numpy as np

from mlci.dsl import Adaptivity, CiScript, Formula, Mode, PatternKind, Variable, parse_condition
from mlci.estimator import (
    ReliabilitySpec,
    SamplePlan,
    active_label_schedule,
    bennett_n,
    estimate_formula,
    estimate_script,
    resolve_deferred,
)
from mlci.evaluator import (
    PredictionSet,
    StatEstimates,
    TriBool,
    Verdict,
    collapse,
    eval_formula,
    resize_allocation,
    true_value,
)

_FEAS_TOL = 1e-12


class InfeasibleWorld(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticWorld:
    n: float
    o: float
    d: float
    size: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("n", "o", "d"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InfeasibleWorld(f"{name}={v} is not a probability")
        lo = abs(self.n - self.o)
        hi = min(self.n + self.o, 2.0 - self.n - self.o)
        if not (lo - _FEAS_TOL <= self.d <= hi + _FEAS_TOL):
            raise InfeasibleWorld(
                f"d={self.d} is incompatible with n={self.n}, o={self.o}: need {lo:.6g} <= d <= {hi:.6g}"
            )

    @property
    def cells(self) -> np.ndarray:
        """Probabilities of (both right, only old right, only new right, both wrong)."""
        n, o, d = self.n, self.o, self.d
        p = np.array([(n + o - d) / 2, (d - n + o) / 2, (d + n - o) / 2, 1 - (n + o + d) / 2])
        p = np.clip(p, 0.0, 1.0)
        return p / p.sum()

    def truth(self, formula: Formula) -> bool:
        return true_value(formula, self.n, self.o, self.d)


def sample_world(
    world: SyntheticWorld, rng: Optional[np.random.Generator] = None, size: Optional[int] = None
) -> tuple[PredictionSet, PredictionSet, dict[str, str]]:
    """Per-example binary labels and predictions realizing the world's four cells."""
    rng = rng if rng is not None else np.random.default_rng(world.seed)
    size = size or world.size
    if size < 1:
        raise ValueError("testset size must be positive")
    cell = rng.choice(4, size=size, p=world.cells)
    y = rng.integers(0, 2, size=size)
    old_right = (cell == 0) | (cell == 1)
    new_right = (cell == 0) | (cell == 2)
    ids = [f"x{i:07d}" for i in range(size)]
    old = {i: str(int(t if r else 1 - t)) for i, t, r in zip(ids, y, old_right)}
    new = {i: str(int(t if r else 1 - t)) for i, t, r in zip(ids, y, new_right)}
    labels = {i: str(int(t)) for i, t in zip(ids, y)}
    return PredictionSet("old", old), PredictionSet("new", new), labels


def sample_counts(world: SyntheticWorld, size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.multinomial(size, world.cells)


# --------------------------------------------------------------------------
# Developers
# --------------------------------------------------------------------------


class Developer(Protocol):
    def next_world(self, step: int, last_signal: Optional[str]) -> SyntheticWorld: ...


@dataclass
class FixedDeveloper:
    """Non-adaptive: commits a predetermined sequence of models."""

    worlds: Sequence[SyntheticWorld]

    def next_world(self, step: int, last_signal: Optional[str]) -> SyntheticWorld:
        return self.worlds[step % len(self.worlds)]


@dataclass
class ThresholdChaser:
    """Adaptive developer that walks the new model's accuracy toward the pass boundary.

    After a Pass it lowers ``n`` by ``step``; after a Fail it raises it,
    moving ``d`` along so the world stays feasible. Signals other than
    pass/fail (e.g. an unconditional accept) carry no information and
    leave the world unchanged.
    """

    start: SyntheticWorld
    step: float
    _current: Optional[SyntheticWorld] = field(default=None, repr=False)

    def reset(self) -> None:
        self._current = None

    def next_world(self, step: int, last_signal: Optional[str]) -> SyntheticWorld:
        if self._current is None or step == 0:
            self._current = self.start
            return self._current
        w = self._current
        if last_signal == "pass":
            n = w.n - self.step
        elif last_signal == "fail":
            n = w.n + self.step
        else:
            return w
        n = min(max(n, 0.0), 1.0)
        lo, hi = abs(n - w.o), min(n + w.o, 2.0 - n - w.o)
        self._current = replace(w, n=n, d=min(max(w.d, lo), hi))
        return self._current


# --------------------------------------------------------------------------
# Simulated testset layout
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _Layout:
    """Consecutive manifest blocks and how the plan routes them."""

    sizes: tuple[int, ...]
    kind: str  # generic | pattern1 | deferred


def _layout(plan: SamplePlan) -> _Layout:
    if plan.deferred:
        rest = plan.testset_size - plan.secondary_testset_size
        cuts = sorted({r.samples for r in plan.deferred_table if r.samples <= rest})
        sizes = [plan.secondary_testset_size]
        prev = 0
        for c in cuts:
            sizes.append(c - prev)
            prev = c
        if rest > prev:
            sizes.append(rest - prev)
        return _Layout(tuple(s for s in sizes), "deferred")
    if plan.pattern.kind is PatternKind.PATTERN1 and plan.fallback is not None:
        extra = plan.unlabeled_size - plan.testset_size
        sizes = (plan.testset_size,) + ((extra,) if extra > 0 else ())
        return _Layout(sizes, "pattern1")
    return _Layout((plan.testset_size,), "generic")


def _stats(blocks: np.ndarray) -> StatEstimates:
    """Full-label estimates from summed (a, b, c, dd) counts."""
    a, b, c, dd = (int(x) for x in blocks)
    total = a + b + c + dd
    return StatEstimates(
        d_hat=(b + c) / total,
        total=total,
        differing=b + c,
        labeled=total,
        n_hat=(a + c) / total,
        o_hat=(a + b) / total,
        diff_accuracy=(c - b) / total,
    )


def _commit_counts(old_right: np.ndarray, sizes: np.ndarray, world: SyntheticWorld, rng) -> np.ndarray:
    """Per-block (a, b, c, dd) for a new model, given the old model's per-block right counts."""
    p = world.cells
    p_b = p[1] / world.o if world.o > 0 else 0.0
    p_c = p[2] / (1.0 - world.o) if world.o < 1 else 0.0
    b = rng.binomial(old_right, min(max(p_b, 0.0), 1.0))
    c = rng.binomial(sizes - old_right, min(max(p_c, 0.0), 1.0))
    return np.stack([old_right - b, b, c, sizes - old_right - c], axis=1)


def _evaluate_counts(formula, plan, layout, counts, mode):
    """Mirror of the evaluator's plan routing over simulated block counts."""
    if layout.kind == "generic":
        return eval_formula(formula, _stats(counts[0]), plan.allocation, mode)
    if layout.kind == "pattern1":
        test = _stats(counts[0])
        pool = _stats(counts.sum(axis=0))
        stats = [pool if c.expr.is_single(Variable.DIFF) else test for c in formula.clauses]
        return eval_formula(formula, stats, plan.allocation, mode)
    secondary = _stats(counts[0])
    if plan.pattern.kind is PatternKind.PATTERN2_DIFF:
        observed = secondary.d_hat
    else:
        observed = secondary.n_hat
    row = resolve_deferred(plan, observed)
    rest = plan.testset_size - plan.secondary_testset_size
    if row is None or row.samples > rest:
        return eval_formula(formula, _stats(counts.sum(axis=0)), plan.fallback.allocation, mode)
    cum = np.cumsum(np.asarray(_block_sizes(counts[1:])))
    k = int(np.searchsorted(cum, row.samples)) + 1
    main = _stats(counts[1 : k + 1].sum(axis=0))
    allocation = tuple(resize_allocation(a, row.samples) for a in plan.allocation)
    return eval_formula(formula, main, allocation, mode)


def _block_sizes(counts: np.ndarray) -> list[int]:
    return [int(x) for x in counts.sum(axis=1)]


# --------------------------------------------------------------------------
# Coverage
# --------------------------------------------------------------------------


class CoverageVerdict(str, Enum):
    COVERED = "covered"
    VIOLATED = "violated"


@dataclass(frozen=True)
class CoverageReport:
    trials: int
    violations: int
    empirical_rate: float
    delta: float
    verdict: CoverageVerdict
    testset_size: int
    commits: int
    unknown_rate: float = 0.0
    quantile_gap: Optional[float] = None
    label: str = ""

    @property
    def sigma(self) -> float:
        return math.sqrt(self.delta * (1 - self.delta) / self.trials)

    @property
    def limit(self) -> float:
        return self.delta + 3 * self.sigma

    def to_row(self) -> dict:
        return {
            "label": self.label,
            "trials": self.trials,
            "violations": self.violations,
            "empirical_rate": f"{self.empirical_rate:.6f}",
            "delta": f"{self.delta:g}",
            "limit": f"{self.limit:.6f}",
            "verdict": self.verdict.value,
            "testset_size": self.testset_size,
            "commits": self.commits,
            "unknown_rate": f"{self.unknown_rate:.6f}",
            "quantile_gap": "" if self.quantile_gap is None else f"{self.quantile_gap:.6f}",
        }


def _is_violation(value: TriBool, truth: bool, mode: Mode) -> bool:
    verdict = collapse(value, mode)
    if mode is Mode.FP_FREE:
        return verdict is Verdict.PASS and not truth
    return verdict is Verdict.FAIL and truth


def _last_clause_estimate(formula: Formula, stats: StatEstimates) -> float:
    clause = formula.clauses[-1]
    if clause.expr.is_difference() and stats.diff_accuracy is not None:
        return stats.diff_accuracy
    point = {Variable.NEW: stats.n_hat, Variable.OLD: stats.o_hat, Variable.DIFF: stats.d_hat}
    return sum(float(t.coefficient) * point[t.variable] for t in clause.expr.terms)


def run_coverage(
    script: CiScript,
    developer: Union[Developer, SyntheticWorld],
    trials: int = 10_000,
    seed: int = 0,
    plan: Optional[SamplePlan] = None,
    label: str = "",
    quantile_gap: bool = False,
) -> CoverageReport:
    """Empirical rate of sessions with at least one wrong released verdict.

    Each trial is one session on a fresh testset of the planned layout,
    serving up to ``H`` commits under the script's adaptivity rule. A
    commit is wrong when its collapsed verdict contradicts the truth in the
    direction the mode guarantees against: a false Pass under fp-free or a
    false Fail under fn-free.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    if isinstance(developer, SyntheticWorld):
        developer = FixedDeveloper([developer])
    plan = plan or estimate_script(script)
    layout = _layout(plan)
    sizes = np.asarray(layout.sizes, dtype=np.int64)
    formula, mode = script.condition, script.mode
    delta = script.delta
    stop_on = script.first_change_on if script.adaptivity is Adaptivity.FIRST_CHANGE else None

    streams = np.random.SeedSequence(seed).spawn(trials)
    violations = unknown = evaluated = 0
    first_estimates = []
    for t in range(trials):
        rng = np.random.default_rng(streams[t])
        if hasattr(developer, "reset"):
            developer.reset()
        old_o = None
        old_right = None
        signal: Optional[str] = None
        bad = False
        for step in range(script.steps):
            world = developer.next_world(step, signal)
            if old_right is None:
                old_o = world.o
                old_right = rng.binomial(sizes, world.o)
            elif world.o != old_o:
                raise ValueError("the old model must stay fixed within a session")
            counts = _commit_counts(old_right, sizes, world, rng)
            ev = _evaluate_counts(formula, plan, layout, counts, mode)
            evaluated += 1
            unknown += ev.value is TriBool.UNKNOWN
            if quantile_gap and step == 0:
                first_estimates.append(_last_clause_estimate(formula, _stats(counts[0])))
            bad = bad or _is_violation(ev.value, world.truth(formula), mode)
            verdict = ev.verdict.value
            signal = "accept" if script.adaptivity is Adaptivity.NONE else verdict
            if stop_on is not None and verdict == stop_on:
                break
        violations += bad

    rate = violations / trials
    sigma = math.sqrt(delta * (1 - delta) / trials)
    gap = None
    if quantile_gap and first_estimates:
        q_lo, q_hi = np.quantile(first_estimates, [delta, 1 - delta])
        gap = float(q_hi - q_lo) / 2
    return CoverageReport(
        trials=trials,
        violations=violations,
        empirical_rate=rate,
        delta=delta,
        verdict=CoverageVerdict.COVERED if rate <= delta + 3 * sigma else CoverageVerdict.VIOLATED,
        testset_size=plan.required_manifest_size(),
        commits=evaluated,
        unknown_rate=unknown / max(evaluated, 1),
        quantile_gap=gap,
        label=label,
    )


def coverage_csv(reports: Sequence[CoverageReport]) -> str:
    buf = io.StringIO()
    fields = list(CoverageReport.to_row(reports[0]).keys()) if reports else []
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.to_row())
    return buf.getvalue()


# --------------------------------------------------------------------------
# Label savings
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SavingsRow:
    eps: float
    delta: float
    p: float
    n_hoeffding: int
    n_bennett: int
    n_active: int


def run_label_savings(
    eps_grid: Sequence[float],
    delta_grid: Sequence[float],
    p_grid: Sequence[float],
    steps: int = 1,
    adaptivity: Adaptivity = Adaptivity.NONE,
) -> list[SavingsRow]:
    """Labels needed to test ``n - o > 0 +/- eps`` with and without a variance bound ``p``.

    ``n_hoeffding`` is the generic plan, ``n_bennett`` the variance-aware
    testset (never above the generic one) and ``n_active`` the labels it
    needs when only disagreeing examples are labeled.
    """
    if not (eps_grid and delta_grid and p_grid):
        raise ValueError("grids must be non-empty")
    rows = []
    for eps in eps_grid:
        formula = parse_condition(f"n - o > 0 +/- {eps!r}")
        for delta in delta_grid:
            spec = ReliabilitySpec(delta, Mode.FP_FREE, adaptivity, steps)
            n_h = estimate_formula(formula, spec).testset_size
            log_test = math.log(delta / 4) - (
                steps * math.log(2) if adaptivity is Adaptivity.FULL else math.log(steps)
            )
            for p in p_grid:
                n_b = min(bennett_n(p, eps, log_delta=log_test), n_h)
                if steps == 1:
                    active = active_label_schedule(p, eps, delta)
                else:
                    active = math.ceil(p * n_b - 1e-9)
                rows.append(SavingsRow(eps, delta, p, n_h, n_b, min(active, n_b)))
    return rows


def savings_csv(rows: Sequence[SavingsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["eps", "delta", "p", "n_hoeffding", "n_bennett", "n_active"])
    for r in rows:
        w.writerow([f"{r.eps:g}", f"{r.delta:g}", f"{r.p:g}", r.n_hoeffding, r.n_bennett, r.n_active])
    return buf.getvalue()
