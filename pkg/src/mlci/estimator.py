"""Testset sizing: turn a condition plus reliability requirement into a plan.

The generic estimator splits the failure budget evenly, first across the
commits a testset must serve (``H`` for non-adaptive and first-change
sessions, ``2**H`` signal histories for fully adaptive ones), then across
the clauses of the formula, then across the variables of each clause, and
sizes every variable with Hoeffding's bound. Pattern-specific planners
replace Hoeffding with Bennett's bound where the disagreement rate between
two models caps the variance of ``n_i - o_i``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from decimal import Decimal
from enum import Enum
from typing import Optional

from mlci.bounds import (
    InfeasiblePlanError,
    bennett_bound,
    bennett_n,
    ceil_count,
    exact_binomial_n,
    hoeffding_n,
)
from mlci.dsl import (
    PATTERN2_LOWER_MIN_A,
    Adaptivity,
    CiScript,
    Clause,
    Formula,
    Mode,
    PatternKind,
    PatternTag,
    Variable,
    match_pattern,
)

LN2 = math.log(2.0)
DEFERRED_GRID = tuple(round(0.05 * k, 2) for k in range(1, 21))
LOWER_GRID = tuple(round(0.01 * k, 2) for k in range(1, 11))


class Bound(str, Enum):
    HOEFFDING = "hoeffding"
    BENNETT = "bennett"
    EXACT_BINOMIAL = "exact-binomial"


@dataclass(frozen=True)
class ReliabilitySpec:
    delta: float
    mode: Mode = Mode.FP_FREE
    adaptivity: Adaptivity = Adaptivity.NONE
    steps: int = 1

    def __post_init__(self):
        if not (0 < self.delta < 1):
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")

    @classmethod
    def from_script(cls, script: CiScript) -> "ReliabilitySpec":
        return cls(script.delta, script.mode, script.adaptivity, script.steps)


def adjusted_log_delta(spec: ReliabilitySpec, delta: Optional[float] = None) -> float:
    """``ln`` of the per-commit failure budget after the union bound over commits.

    ``delta`` overrides ``spec.delta`` for stages that own only part of it.
    """
    ld = math.log(spec.delta if delta is None else delta)
    if spec.adaptivity is Adaptivity.FULL:
        return ld - spec.steps * LN2
    return ld - math.log(spec.steps)


@dataclass(frozen=True)
class LeafBudget:
    """Tolerance and failure budget for one estimated quantity.

    ``variable`` is None for a jointly estimated clause expression such as
    ``n - o`` measured directly from per-example differences.
    """

    variable: Optional[Variable]
    eps: float
    log_delta: float
    samples: int


@dataclass(frozen=True)
class ClauseAllocation:
    leaves: tuple[LeafBudget, ...] = ()
    joint: Optional[LeafBudget] = None

    @property
    def samples(self) -> int:
        budgets = list(self.leaves) + ([self.joint] if self.joint else [])
        return max(b.samples for b in budgets)

    def leaf(self, var: Variable) -> LeafBudget:
        for b in self.leaves:
            if b.variable is var:
                return b
        raise KeyError(var)


@dataclass(frozen=True)
class DeferredRow:
    p: float
    samples: int
    labels: int


@dataclass(frozen=True)
class SamplePlan:
    testset_size: int
    allocation: tuple[ClauseAllocation, ...]
    bound: Bound
    pattern: PatternTag
    variance_bound: Optional[float] = None
    unlabeled_size: int = 0
    per_commit_labels: int = 0
    secondary_testset_size: int = 0
    deferred: bool = False
    deferred_table: tuple[DeferredRow, ...] = ()
    fallback: Optional["SamplePlan"] = None

    @property
    def uses_active_labeling(self) -> bool:
        return self.bound is Bound.BENNETT and self.pattern.kind in (
            PatternKind.PATTERN1,
            PatternKind.PATTERN2_DIFF,
        )

    def required_manifest_size(self) -> int:
        if self.deferred:
            return self.testset_size
        return max(self.testset_size, self.unlabeled_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bound"] = self.bound.value
        d["pattern"] = {
            "kind": self.pattern.kind.value,
            "constants": {k: str(v) for k, v in self.pattern.constants.items()},
        }
        d["allocation"] = [_clause_alloc_to_dict(c) for c in self.allocation]
        d["fallback"] = self.fallback.to_dict() if self.fallback else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SamplePlan":
        return cls(
            testset_size=d["testset_size"],
            allocation=tuple(_clause_alloc_from_dict(c) for c in d["allocation"]),
            bound=Bound(d["bound"]),
            pattern=PatternTag(
                PatternKind(d["pattern"]["kind"]),
                {k: Decimal(v) for k, v in d["pattern"]["constants"].items()},
            ),
            variance_bound=d.get("variance_bound"),
            unlabeled_size=d.get("unlabeled_size", 0),
            per_commit_labels=d.get("per_commit_labels", 0),
            secondary_testset_size=d.get("secondary_testset_size", 0),
            deferred=d.get("deferred", False),
            deferred_table=tuple(DeferredRow(**r) for r in d.get("deferred_table", ())),
            fallback=cls.from_dict(d["fallback"]) if d.get("fallback") else None,
        )


def _leaf_to_dict(b: Optional[LeafBudget]) -> Optional[dict]:
    if b is None:
        return None
    return {
        "variable": b.variable.value if b.variable else None,
        "eps": b.eps,
        "log_delta": b.log_delta,
        "samples": b.samples,
    }


def _leaf_from_dict(d: Optional[dict]) -> Optional[LeafBudget]:
    if d is None:
        return None
    var = Variable(d["variable"]) if d["variable"] else None
    return LeafBudget(var, d["eps"], d["log_delta"], d["samples"])


def _clause_alloc_to_dict(c: ClauseAllocation) -> dict:
    return {"leaves": [_leaf_to_dict(b) for b in c.leaves], "joint": _leaf_to_dict(c.joint)}


def _clause_alloc_from_dict(d: dict) -> ClauseAllocation:
    return ClauseAllocation(
        tuple(_leaf_from_dict(b) for b in d["leaves"]), _leaf_from_dict(d["joint"])
    )


# --------------------------------------------------------------------------
# Generic (Hoeffding) estimation
# --------------------------------------------------------------------------


def estimate_clause(clause: Clause, log_delta: float) -> tuple[int, ClauseAllocation]:
    """Size one clause whose budget is ``exp(log_delta)``.

    The budget is split evenly over the clause's variables. Term ``c_i v_i``
    gets tolerance ``eps_i``; with equal per-variable budgets the max of
    ``c_i^2 / eps_i^2`` is minimized under ``sum(eps_i) = eps`` by
    ``eps_i`` proportional to ``|c_i|``. Leaves record the tolerance on
    ``v_i`` itself, ``eps_i / |c_i|``, which is what the evaluator widens
    the point estimate by.
    """
    terms = clause.expr.terms
    eps = float(clause.tolerance)
    leaf_ld = log_delta - math.log(len(terms))
    total = sum(abs(float(t.coefficient)) for t in terms)
    leaves = []
    for t in terms:
        c = abs(float(t.coefficient))
        eps_i = eps * c / total
        leaves.append(
            LeafBudget(t.variable, eps_i / c, leaf_ld, hoeffding_n(eps_i, r=c, log_delta=leaf_ld))
        )
    alloc = ClauseAllocation(tuple(leaves))
    return alloc.samples, alloc


def estimate_formula(formula: Formula, spec: ReliabilitySpec) -> SamplePlan:
    """Generic plan: Hoeffding per variable, union bound everywhere."""
    k = len(formula.clauses)
    clause_ld = adjusted_log_delta(spec) - math.log(k)
    allocation = []
    for i, clause in enumerate(formula.clauses):
        try:
            _, alloc = estimate_clause(clause, clause_ld)
        except InfeasiblePlanError as exc:
            raise InfeasiblePlanError(f"clause {i + 1}: {exc}") from exc
        allocation.append(alloc)
    n = max(a.samples for a in allocation)
    return SamplePlan(
        testset_size=n,
        allocation=tuple(allocation),
        bound=Bound.HOEFFDING,
        pattern=PatternTag(PatternKind.GENERIC),
    )


def estimate_exact_binomial(formula: Formula, spec: ReliabilitySpec) -> SamplePlan:
    """Plan for a single clause on a single Bernoulli variable via the exact binomial tail."""
    if len(formula.clauses) != 1 or len(formula.clauses[0].expr.terms) != 1:
        raise ValueError("exact binomial plans need one clause over one variable")
    clause = formula.clauses[0]
    term = clause.expr.terms[0]
    if term.coefficient != 1:
        raise ValueError("exact binomial plans need a unit coefficient")
    eps = float(clause.tolerance)
    ld = adjusted_log_delta(spec)
    n = exact_binomial_n(float(clause.threshold), eps, log_delta=ld)
    leaf = LeafBudget(term.variable, eps, ld, n)
    return SamplePlan(
        testset_size=n,
        allocation=(ClauseAllocation((leaf,)),),
        bound=Bound.EXACT_BINOMIAL,
        pattern=PatternTag(PatternKind.GENERIC),
    )


# --------------------------------------------------------------------------
# Variance-aware estimation
# --------------------------------------------------------------------------


def active_label_schedule(p: float, eps: float, delta: float) -> int:
    """Labels needed per commit when only disagreeing examples get labeled.

    A single commit's Bennett testset, at the two-sided ``delta / 4``
    budget of the test stage, times the disagreement fraction ``p``.
    """
    single = bennett_bound(p, eps, log_delta=math.log(delta / 4))
    return ceil_count(single * p)


def _find_clause(formula: Formula, pred) -> int:
    for i, c in enumerate(formula.clauses):
        if pred(c):
            return i
    raise ValueError("formula does not match the expected pattern")


def estimate_pattern1(formula: Formula, spec: ReliabilitySpec) -> SamplePlan:
    """Two-level plan for ``d < A +/- B /\\ n - o > C +/- D``.

    Filter: estimate ``d`` on unlabeled data to ``B`` with half the budget.
    Test: conditioned on ``d < A + 2B``, each ``n_i - o_i`` has second
    moment below ``p = A + 2B``; Bennett sizes the labeled set with the
    other half, split again for the two-sided deviation.
    """
    tag = match_pattern(formula)
    if tag.kind is not PatternKind.PATTERN1:
        raise ValueError("formula is not of the form d < A +/- B /\\ n - o > C +/- D")
    generic = estimate_formula(formula, spec)
    A, B, D = tag["A"], tag["B"], tag["D"]
    p = float(A + 2 * B)
    if not (0 < p < 1):
        return generic

    filter_ld = adjusted_log_delta(spec, spec.delta / 2)
    test_ld = adjusted_log_delta(spec, spec.delta / 4)
    eps = float(D)
    n_test = bennett_n(p, eps, log_delta=test_ld)
    if n_test >= generic.testset_size:
        return generic
    n_filter = hoeffding_n(float(B), log_delta=filter_ld)

    d_idx = _find_clause(formula, lambda c: c.expr.is_single(Variable.DIFF))
    allocation = []
    for i in range(len(formula.clauses)):
        if i == d_idx:
            allocation.append(
                ClauseAllocation((LeafBudget(Variable.DIFF, float(B), filter_ld, n_filter),))
            )
        else:
            allocation.append(ClauseAllocation(joint=LeafBudget(None, eps, test_ld, n_test)))
    labels = min(active_label_schedule(p, eps, spec.delta), n_test)
    return SamplePlan(
        testset_size=n_test,
        allocation=tuple(allocation),
        bound=Bound.BENNETT,
        pattern=tag,
        variance_bound=p,
        unlabeled_size=n_filter,
        per_commit_labels=labels,
        fallback=generic,
    )


def estimate_pattern2(formula: Formula, spec: ReliabilitySpec) -> SamplePlan:
    """Deferred plan for ``n - o > C +/- D`` with no explicit bound on ``d``.

    A disjoint secondary set measures ``d`` to ``2D``; the main labeled set
    size depends on what it observes, so the plan carries a table of sizes
    by variance bound and the Hoeffding size as an upper bound.
    """
    tag = match_pattern(formula)
    if tag.kind is not PatternKind.PATTERN2_DIFF:
        raise ValueError("formula is not of the form n - o > C +/- D")
    generic = estimate_formula(formula, spec)
    D = float(tag["D"])
    secondary_ld = adjusted_log_delta(spec, spec.delta / 2)
    test_ld = adjusted_log_delta(spec, spec.delta / 4)
    n_secondary = hoeffding_n(2 * D, log_delta=secondary_ld)
    rows = []
    for p in DEFERRED_GRID:
        n = bennett_n(p, D, log_delta=test_ld)
        if n < generic.testset_size:
            rows.append(DeferredRow(p, n, min(active_label_schedule(p, D, spec.delta), n)))
    joint = LeafBudget(None, D, test_ld, generic.testset_size)
    return SamplePlan(
        testset_size=generic.testset_size,
        allocation=(ClauseAllocation(joint=joint),),
        bound=Bound.BENNETT,
        pattern=tag,
        secondary_testset_size=n_secondary,
        deferred=True,
        deferred_table=tuple(rows),
        fallback=generic,
    )


def estimate_pattern2_lower(formula: Formula, spec: ReliabilitySpec) -> SamplePlan:
    """Deferred plan for ``n > A +/- B`` with large ``A``.

    A coarse labeled set bounds ``n`` from below to ``2B``; the fine stage
    then bounds ``E[(1 - n_i)^2] = 1 - n`` by ``p = 1 - (n_hat - 2B)`` and
    takes the smaller of Bennett and the exact binomial size.
    """
    tag = match_pattern(formula)
    if tag.kind is not PatternKind.PATTERN2_LOWER:
        raise ValueError(f"formula is not of the form n > A +/- B with A >= {PATTERN2_LOWER_MIN_A}")
    generic = estimate_formula(formula, spec)
    A, B = float(tag["A"]), float(tag["B"])
    coarse_ld = adjusted_log_delta(spec, spec.delta / 2)
    fine_ld = adjusted_log_delta(spec, spec.delta / 4)
    n_coarse = hoeffding_n(2 * B, log_delta=coarse_ld)
    try:
        # the exact tail is already two-sided: it gets the whole fine-stage half
        n_exact = exact_binomial_n(A, B, log_delta=adjusted_log_delta(spec, spec.delta / 2))
    except InfeasiblePlanError:
        n_exact = generic.testset_size
    rows = []
    for p in LOWER_GRID:
        n = min(bennett_n(p, B, log_delta=fine_ld, clip_range=1.0), n_exact)
        if n < generic.testset_size:
            rows.append(DeferredRow(p, n, n))
    leaf = LeafBudget(Variable.NEW, B, fine_ld, generic.testset_size)
    return SamplePlan(
        testset_size=generic.testset_size,
        allocation=(ClauseAllocation((leaf,)),),
        bound=Bound.BENNETT,
        pattern=tag,
        secondary_testset_size=n_coarse,
        deferred=True,
        deferred_table=tuple(rows),
        fallback=generic,
    )


def observed_variance_bound(plan: SamplePlan, observed: float) -> Optional[float]:
    """Variance bound implied by the secondary-set observation, or None if unusable.

    ``observed`` is ``d_hat`` for difference plans and ``n_hat`` for
    lower-bound plans.
    """
    kind = plan.pattern.kind
    if kind is PatternKind.PATTERN2_DIFF:
        return observed + 4 * float(plan.pattern["D"])
    if kind is PatternKind.PATTERN2_LOWER:
        B = float(plan.pattern["B"])
        if observed - 2 * B < float(PATTERN2_LOWER_MIN_A):
            return None
        return 1.0 - observed + 2 * B
    raise ValueError("only deferred plans have an observed variance bound")


def resolve_deferred(plan: SamplePlan, observed: float) -> Optional[DeferredRow]:
    """Pick the main-set size for an observation; None means use the fallback plan."""
    p = observed_variance_bound(plan, observed)
    if p is None:
        return None
    for row in plan.deferred_table:
        if row.p >= p - 1e-12:
            return row
    return None


def estimate(formula: Formula, spec: ReliabilitySpec, optimize: bool = True) -> SamplePlan:
    """Best available plan for ``formula``."""
    if not optimize:
        return estimate_formula(formula, spec)
    kind = match_pattern(formula).kind
    if kind is PatternKind.PATTERN1:
        return estimate_pattern1(formula, spec)
    if kind is PatternKind.PATTERN2_DIFF:
        return estimate_pattern2(formula, spec)
    if kind is PatternKind.PATTERN2_LOWER:
        return estimate_pattern2_lower(formula, spec)
    return estimate_formula(formula, spec)


def estimate_script(script: CiScript, optimize: bool = True) -> SamplePlan:
    return estimate(script.condition, ReliabilitySpec.from_script(script), optimize)
