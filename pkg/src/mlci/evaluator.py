"""Evaluate a committed model's predictions against a condition.

Point estimates of ``n``, ``o`` and ``d`` are widened to intervals using the
tolerances fixed by the sample plan, each clause is decided in three-valued
logic, and the conjunction is collapsed to pass/fail according to the mode.
"""

from __future__ import annotations

import csv
import math
import io
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from mlci.dsl import Clause, Comparator, Expr, Formula, Mode, PatternKind, Variable
from mlci.estimator import ClauseAllocation, SamplePlan, resolve_deferred


class EvaluationError(ValueError):
    pass


class UniverseMismatch(EvaluationError):
    pass


class MissingLabels(EvaluationError):
    pass


# --------------------------------------------------------------------------
# Prediction and label files
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionSet:
    model_id: str
    predictions: Mapping[str, str]

    def __post_init__(self):
        if not self.predictions:
            raise EvaluationError(f"prediction set {self.model_id!r} is empty")

    @property
    def ids(self) -> list[str]:
        return list(self.predictions)


LabelSet = Mapping[str, str]
PathLike = Union[str, Path]


def _read_pairs(path: PathLike) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["example_id", "label"]:
            raise EvaluationError(f"{path}: expected header 'example_id,label'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise EvaluationError(f"{path}:{lineno}: expected two columns")
            key = row[0].strip()
            if key in out:
                raise EvaluationError(f"{path}:{lineno}: duplicate example_id {key!r}")
            out[key] = row[1].strip()
    return out


def read_predictions(path: PathLike, model_id: Optional[str] = None) -> PredictionSet:
    return PredictionSet(model_id or Path(path).stem, _read_pairs(path))


def read_labels(path: PathLike) -> dict[str, str]:
    return {k: v for k, v in _read_pairs(path).items() if v != ""}


def write_pairs(pairs: Iterable[tuple[str, str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["example_id", "label"])
    for k, v in pairs:
        w.writerow([k, v])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Statistics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StatEstimates:
    """Point estimates over one evaluation set.

    ``n_hat`` and ``o_hat`` are over the labeled examples and are None when
    nothing is labeled. ``diff_accuracy`` is the exact ``n_hat - o_hat`` over
    the whole set, available whenever every disagreeing example is labeled.
    """

    d_hat: float
    total: int
    differing: int
    labeled: int
    n_hat: Optional[float] = None
    o_hat: Optional[float] = None
    diff_accuracy: Optional[float] = None

    @property
    def fully_labeled(self) -> bool:
        return self.labeled == self.total


def compute_stats(
    old: PredictionSet,
    new: PredictionSet,
    labels: LabelSet,
    ids: Optional[Sequence[str]] = None,
) -> StatEstimates:
    """Estimates over ``ids`` (default: the shared example universe)."""
    if set(old.predictions) != set(new.predictions):
        raise UniverseMismatch(
            f"models {old.model_id!r} and {new.model_id!r} cover different examples"
        )
    if ids is None:
        ids = old.ids
    else:
        missing = [i for i in ids if i not in old.predictions]
        if missing:
            raise UniverseMismatch(f"{len(missing)} example(s) have no prediction, e.g. {missing[0]!r}")
    total = len(ids)
    if total == 0:
        raise EvaluationError("empty evaluation set")

    differing = labeled = new_right = old_right = 0
    diff_sum = 0
    diff_unlabeled = 0
    for i in ids:
        p_new, p_old = new.predictions[i], old.predictions[i]
        differs = p_new != p_old
        differing += differs
        y = labels.get(i)
        if y is None:
            diff_unlabeled += differs
            continue
        labeled += 1
        nr, orr = p_new == y, p_old == y
        new_right += nr
        old_right += orr
        if differs:
            diff_sum += nr - orr

    return StatEstimates(
        d_hat=differing / total,
        total=total,
        differing=differing,
        labeled=labeled,
        n_hat=new_right / labeled if labeled else None,
        o_hat=old_right / labeled if labeled else None,
        diff_accuracy=diff_sum / total if diff_unlabeled == 0 else None,
    )


# --------------------------------------------------------------------------
# Interval arithmetic and three-valued logic
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    @classmethod
    def around(cls, center: float, radius: float) -> "Interval":
        return cls(center - radius, center + radius)

    def __add__(self, other: "Interval") -> "Interval":
        return Interval(self.lo + other.lo, self.hi + other.hi)

    def __sub__(self, other: "Interval") -> "Interval":
        return Interval(self.lo - other.hi, self.hi - other.lo)

    def __mul__(self, c: float) -> "Interval":
        if c >= 0:
            return Interval(c * self.lo, c * self.hi)
        return Interval(c * self.hi, c * self.lo)

    __rmul__ = __mul__


class TriBool(str, Enum):
    TRUE = "true"
    FALSE = "false"
    UNKNOWN = "unknown"

    @staticmethod
    def all_of(values: Iterable["TriBool"]) -> "TriBool":
        values = list(values)
        if TriBool.FALSE in values:
            return TriBool.FALSE
        if TriBool.UNKNOWN in values:
            return TriBool.UNKNOWN
        return TriBool.TRUE


class Verdict(str, Enum):
    PASS = "pass"
    FAIL = "fail"


def interval_eval(expr: Expr, intervals: Mapping[Variable, Interval]) -> Interval:
    acc: Optional[Interval] = None
    for t in expr.terms:
        if t.variable not in intervals:
            raise EvaluationError(f"no estimate for variable {t.variable.value!r}")
        part = float(t.coefficient) * intervals[t.variable]
        acc = part if acc is None else acc + part
    return acc


def compare(iv: Interval, cmp: Comparator, c: float) -> TriBool:
    """Decide ``x cmp c`` for every ``x`` in ``iv``; touching ``c`` is Unknown."""
    if cmp is Comparator.GT:
        if iv.lo > c:
            return TriBool.TRUE
        if iv.hi < c:
            return TriBool.FALSE
        return TriBool.UNKNOWN
    if iv.hi < c:
        return TriBool.TRUE
    if iv.lo > c:
        return TriBool.FALSE
    return TriBool.UNKNOWN


def _point(stats: StatEstimates, var: Variable) -> float:
    value = {Variable.NEW: stats.n_hat, Variable.OLD: stats.o_hat, Variable.DIFF: stats.d_hat}[var]
    if value is None:
        raise MissingLabels(f"variable {var.value!r} needs labeled examples")
    return value


def clause_interval(clause: Clause, stats: StatEstimates, alloc: ClauseAllocation) -> Interval:
    if alloc.joint is not None:
        if clause.expr.is_difference() and stats.diff_accuracy is not None:
            center = stats.diff_accuracy
        else:
            center = sum(float(t.coefficient) * _point(stats, t.variable) for t in clause.expr.terms)
        return Interval.around(center, alloc.joint.eps)
    intervals = {
        b.variable: Interval.around(_point(stats, b.variable), b.eps) for b in alloc.leaves
    }
    return interval_eval(clause.expr, intervals)


def eval_clause(clause: Clause, stats: StatEstimates, alloc: ClauseAllocation) -> TriBool:
    return compare(clause_interval(clause, stats, alloc), clause.cmp, float(clause.threshold))


def collapse(value: TriBool, mode: Mode) -> Verdict:
    if value is TriBool.TRUE:
        return Verdict.PASS
    if value is TriBool.FALSE:
        return Verdict.FAIL
    return Verdict.FAIL if mode is Mode.FP_FREE else Verdict.PASS


@dataclass(frozen=True)
class Evaluation:
    verdict: Verdict
    value: TriBool
    trace: tuple[TriBool, ...]

    @property
    def collapsed(self) -> bool:
        return self.value is TriBool.UNKNOWN


def eval_formula(
    formula: Formula,
    stats: Union[StatEstimates, Sequence[StatEstimates]],
    allocation: Sequence[ClauseAllocation],
    mode: Mode,
) -> Evaluation:
    """Evaluate every clause, conjoin in three-valued logic, then collapse.

    ``stats`` may be one estimate shared by all clauses or one per clause
    (staged plans measure ``d`` and ``n - o`` on different sets).
    """
    if len(allocation) != len(formula.clauses):
        raise EvaluationError("allocation does not match the formula")
    if isinstance(stats, StatEstimates):
        stats = [stats] * len(formula.clauses)
    trace = tuple(eval_clause(c, s, a) for c, s, a in zip(formula.clauses, stats, allocation))
    value = TriBool.all_of(trace)
    return Evaluation(collapse(value, mode), value, trace)


def true_value(formula: Formula, n: float, o: float, d: float) -> bool:
    """The formula's truth on known parameters (no estimation error)."""
    point = {Variable.NEW: n, Variable.OLD: o, Variable.DIFF: d}
    for c in formula.clauses:
        x = sum(float(t.coefficient) * point[t.variable] for t in c.expr.terms)
        ok = x > float(c.threshold) if c.cmp is Comparator.GT else x < float(c.threshold)
        if not ok:
            return False
    return True


# --------------------------------------------------------------------------
# Plan routing: which examples feed which clause
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Route:
    """How a plan consumes a testset manifest for one commit.

    ``clause_ids[i]`` are the examples clause ``i`` is estimated on and
    ``label_ids`` the examples whose labels the evaluation depends on.
    A ``pending`` route still waits for labels on its coarse stage before
    the main stage can be chosen.
    """

    name: str
    clause_ids: tuple[tuple[str, ...], ...]
    allocation: tuple[ClauseAllocation, ...]
    label_ids: tuple[str, ...]
    label_cap: Optional[int] = None
    observed: Optional[float] = None
    pending: bool = False


def _needs_labels(clause: Clause, alloc: ClauseAllocation) -> str:
    """'none', 'differing' or 'all'."""
    if clause.expr.is_single(Variable.DIFF):
        return "none"
    if alloc.joint is not None and clause.expr.is_difference():
        return "differing"
    return "all"


def _label_ids(formula, allocation, clause_ids, old, new) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for clause, alloc, ids in zip(formula.clauses, allocation, clause_ids):
        need = _needs_labels(clause, alloc)
        if need == "all":
            seen.update(dict.fromkeys(ids))
        elif need == "differing":
            seen.update(dict.fromkeys(i for i in ids if old.predictions[i] != new.predictions[i]))
    return tuple(seen)


def resize_allocation(alloc: ClauseAllocation, samples: int) -> ClauseAllocation:
    if alloc.joint is not None:
        return ClauseAllocation(alloc.leaves, replace(alloc.joint, samples=samples))
    return ClauseAllocation(tuple(replace(b, samples=samples) for b in alloc.leaves))


def _simple_route(name, formula, plan, ids, old, new, label_cap=None, observed=None) -> Route:
    clause_ids = tuple(tuple(ids) for _ in formula.clauses)
    return Route(
        name,
        clause_ids,
        plan.allocation,
        _label_ids(formula, plan.allocation, clause_ids, old, new),
        label_cap,
        observed,
    )


def plan_route(
    formula: Formula,
    plan: SamplePlan,
    old: PredictionSet,
    new: PredictionSet,
    labels: LabelSet,
    ids: Sequence[str],
) -> Route:
    """Split the manifest ``ids`` between the stages of ``plan``.

    Generic plans use the first ``testset_size`` examples for every clause.
    Hierarchical plans measure ``d`` on the whole unlabeled pool and
    ``n - o`` on the first ``testset_size`` examples. Deferred plans take a
    leading secondary slice, pick the main-stage size from what it shows,
    and estimate on the examples that follow; when the observation is
    unusable or the remaining examples are too few they fall back to the
    generic plan over the whole manifest.
    """
    if set(old.predictions) != set(new.predictions):
        raise UniverseMismatch(
            f"models {old.model_id!r} and {new.model_id!r} cover different examples"
        )
    missing = [i for i in ids if i not in old.predictions]
    if missing:
        raise UniverseMismatch(f"{len(missing)} testset example(s) have no prediction, e.g. {missing[0]!r}")
    ids = list(ids)
    kind = plan.pattern.kind

    if not plan.deferred and kind is PatternKind.PATTERN1 and plan.fallback is not None:
        test_ids = tuple(ids[: plan.testset_size])
        clause_ids = tuple(
            tuple(ids) if c.expr.is_single(Variable.DIFF) else test_ids for c in formula.clauses
        )
        cap = plan.per_commit_labels
        if plan.variance_bound is not None:
            cap = max(cap, math.ceil(plan.variance_bound * plan.testset_size - 1e-9))
        return Route(
            "pattern1",
            clause_ids,
            plan.allocation,
            _label_ids(formula, plan.allocation, clause_ids, old, new),
            cap,
        )

    if not plan.deferred:
        return _simple_route("generic", formula, plan, ids[: plan.testset_size], old, new)

    fallback = plan.fallback
    secondary = ids[: plan.secondary_testset_size]
    rest = ids[plan.secondary_testset_size:]

    def use_fallback(observed):
        return _simple_route("fallback", formula, fallback, ids[: fallback.testset_size], old, new, observed=observed)

    if kind is PatternKind.PATTERN2_DIFF:
        observed = compute_stats(old, new, {}, secondary).d_hat
    else:
        unlabeled = tuple(i for i in secondary if i not in labels)
        if unlabeled:
            return Route("coarse", (), (), unlabeled, pending=True)
        observed = compute_stats(old, new, labels, secondary).n_hat

    row = resolve_deferred(plan, observed)
    if row is None or len(rest) < row.samples:
        return use_fallback(observed)
    main = tuple(rest[: row.samples])
    allocation = tuple(resize_allocation(a, row.samples) for a in plan.allocation)
    clause_ids = tuple(main for _ in formula.clauses)
    cap = max(row.labels, math.ceil(row.p * row.samples - 1e-9)) if kind is PatternKind.PATTERN2_DIFF else None
    return Route(
        "deferred",
        clause_ids,
        allocation,
        _label_ids(formula, allocation, clause_ids, old, new),
        cap,
        observed,
    )


def evaluate_route(
    formula: Formula,
    route: Route,
    old: PredictionSet,
    new: PredictionSet,
    labels: LabelSet,
    mode: Mode,
) -> Evaluation:
    if route.pending:
        raise MissingLabels(f"{len(route.label_ids)} coarse-stage example(s) still need labels")
    unlabeled = [i for i in route.label_ids if i not in labels]
    if unlabeled:
        raise MissingLabels(f"{len(unlabeled)} example(s) still need labels, e.g. {unlabeled[0]!r}")
    stats = [compute_stats(old, new, labels, ids) for ids in route.clause_ids]
    return eval_formula(formula, stats, route.allocation, mode)
