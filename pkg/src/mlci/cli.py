"""Command-line interface: ``mlci estimate|init|commit|labels|release|simulate``.

Exit codes: 0 pass/ok, 1 fail, 2 unknown verdict collapsed by the mode,
3 usage, configuration or I/O error, 4 new testset required.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from contextlib import contextmanager
from enum import IntEnum
from pathlib import Path
from typing import Optional, Sequence

from filelock import FileLock, Timeout

from mlci.bounds import InfeasiblePlanError
from mlci.dsl import DSLError, format_condition, parse_script
from mlci.estimator import ReliabilitySpec, SamplePlan, estimate_exact_binomial, estimate_script
from mlci.evaluator import EvaluationError, TriBool, read_labels, read_predictions
from mlci.session import (
    AlarmNotFired,
    BudgetExhausted,
    FileSink,
    Session,
    SessionError,
    StdoutSink,
    TestsetTooSmall,
    open_session,
    read_manifest,
)
from mlci import simharness as sim


class Exit(IntEnum):
    OK = 0
    FAIL = 1
    UNKNOWN = 2
    ERROR = 3
    ALARM = 4


class CliError(Exception):
    pass


def _die(msg: str) -> int:
    print(f"mlci: error: {msg}", file=sys.stderr)
    return Exit.ERROR


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def _load_script(path: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_script(text)


def _plan_for(script, bound: str, optimize: bool) -> SamplePlan:
    if bound == "exact":
        return estimate_exact_binomial(script.condition, ReliabilitySpec.from_script(script))
    return estimate_script(script, optimize=optimize)


def _sink_for(session_path: str):
    target = os.environ.get("MLCI_SINK")
    if target == "-":
        return StdoutSink(sys.stderr)
    return FileSink(target or f"{session_path}.events.jsonl")


@contextmanager
def _locked(session_path: str):
    lock = FileLock(f"{session_path}.lock", timeout=10)
    try:
        with lock:
            yield
    except Timeout as exc:
        raise CliError(f"session {session_path} is locked by another process") from exc


PLAN_COLUMNS = (
    "testset_size",
    "required_manifest_size",
    "bound",
    "pattern",
    "variance_bound",
    "unlabeled_size",
    "per_commit_labels",
    "secondary_testset_size",
    "deferred",
    "fallback_testset_size",
)


def _plan_row(plan: SamplePlan) -> dict:
    return {
        "testset_size": plan.testset_size,
        "required_manifest_size": plan.required_manifest_size(),
        "bound": plan.bound.value,
        "pattern": plan.pattern.kind.value,
        "variance_bound": "" if plan.variance_bound is None else f"{plan.variance_bound:g}",
        "unlabeled_size": plan.unlabeled_size,
        "per_commit_labels": plan.per_commit_labels,
        "secondary_testset_size": plan.secondary_testset_size,
        "deferred": str(plan.deferred).lower(),
        "fallback_testset_size": plan.fallback.testset_size if plan.fallback else "",
    }


def _render_plan(script, plan: SamplePlan, fmt: str) -> str:
    if fmt == "json":
        doc = plan.to_dict()
        doc["condition"] = format_condition(script.condition)
        doc["required_manifest_size"] = plan.required_manifest_size()
        return json.dumps(doc, indent=2, sort_keys=True)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=PLAN_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerow(_plan_row(plan))
        return buf.getvalue().rstrip("\n")
    lines = [
        f"condition:       {format_condition(script.condition)}",
        f"reliability:     {script.reliability} ({script.adaptivity.value}, H={script.steps}, {script.mode.value})",
        f"testset size:    {plan.testset_size}",
        f"bound:           {plan.bound.value}",
        f"pattern:         {plan.pattern.kind.value}",
    ]
    for i, alloc in enumerate(plan.allocation, start=1):
        budgets = ([alloc.joint] if alloc.joint else []) + list(alloc.leaves)
        for b in budgets:
            name = b.variable.value if b.variable else "joint"
            lines.append(f"  clause {i} {name}: eps={b.eps:.6g} samples={b.samples}")
    if plan.unlabeled_size:
        lines.append(f"unlabeled pool:  {plan.unlabeled_size}")
    if plan.per_commit_labels:
        lines.append(f"labels/commit:   {plan.per_commit_labels}")
    if plan.deferred:
        lines.append(f"secondary set:   {plan.secondary_testset_size}")
        for row in plan.deferred_table:
            lines.append(f"  p <= {row.p:<5g} -> {row.samples} samples, {row.labels} labels")
    if plan.fallback:
        lines.append(f"fallback size:   {plan.fallback.testset_size}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_estimate(args) -> int:
    script = _load_script(args.config)
    plan = _plan_for(script, args.bound, not args.no_optimize)
    print(_render_plan(script, plan, args.format))
    return Exit.OK


def cmd_init(args) -> int:
    script = _load_script(args.config)
    manifest = read_manifest(args.manifest)
    if os.path.exists(args.session) and not args.force:
        raise CliError(f"session {args.session} already exists (use --force to replace it)")
    plan = _plan_for(script, args.bound, not args.no_optimize)
    with _locked(args.session):
        try:
            session = open_session(script, manifest, plan=plan)
        except TestsetTooSmall as exc:
            print(f"mlci: error: {exc}", file=sys.stderr)
            print(f"required: {exc.required}")
            return Exit.ERROR
        session.save(args.session)
    print(f"opened session {args.session}: testset {session.state.testset_id[:12]}, "
          f"{len(manifest)} examples, budget {script.steps} commit(s)")
    return Exit.OK


def cmd_commit(args) -> int:
    with _locked(args.session):
        session = Session.load(args.session, _sink_for(args.session))
        old = read_predictions(args.old, "old")
        new = read_predictions(args.new, "new")
        labels = read_labels(args.labels) if args.labels else None
        try:
            result = session.submit(args.id, old, new, labels)
        except BudgetExhausted as exc:
            print(f"mlci: {exc}", file=sys.stderr)
            return Exit.ALARM
        session.save(args.session)
    dev = result.developer.value.value
    ev = result.evaluation
    doc = {
        "commit_id": args.id,
        "signal": dev,
        "alarm": str(result.alarm),
        "commits_used": session.state.commits_used,
        "budget": session.state.script.steps,
    }
    if result.developer.value.value != "accept":
        doc["value"] = ev.value.value
        doc["trace"] = [t.value for t in ev.trace]
    if args.format == "json":
        print(json.dumps(doc, sort_keys=True))
    else:
        line = f"{args.id}: {dev}"
        if "value" in doc and ev.value is TriBool.UNKNOWN:
            line += f" (unknown, collapsed under {session.state.script.mode.value})"
        print(line)
        print(f"commits: {doc['commits_used']}/{doc['budget']}  alarm: {doc['alarm']}")
    if dev == "accept":
        return Exit.OK
    if ev.value is TriBool.UNKNOWN:
        return Exit.UNKNOWN
    return Exit.OK if dev == "pass" else Exit.FAIL


def cmd_labels(args) -> int:
    with _locked(args.session):
        session = Session.load(args.session, _sink_for(args.session))
        old = read_predictions(args.old, "old")
        new = read_predictions(args.new, "new")
        was_fired = session.state.alarm_fired
        needed = session.labels_needed(old, new)
        session.save(args.session)
    if args.format == "json":
        print(json.dumps({"labels_needed": needed}))
    else:
        if args.format == "csv":
            print("example_id")
        for i in needed:
            print(i)
    if session.state.alarm_fired and not was_fired:
        print(f"mlci: {session.check_alarm()}", file=sys.stderr)
        return Exit.ALARM
    return Exit.OK


def cmd_release(args) -> int:
    with _locked(args.session):
        session = Session.load(args.session, _sink_for(args.session))
        try:
            text = session.release()
        except AlarmNotFired as exc:
            raise CliError(str(exc)) from exc
        session.save(args.session)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return Exit.OK


# --------------------------------------------------------------------------
# Simulation presets
# --------------------------------------------------------------------------

SAVINGS_GRID = {
    "eps": (0.01, 0.02, 0.05),
    "delta": (0.01, 0.001, 0.0001),
    "p": (0.05, 0.1, 0.2, 0.5, 1.0),
}


def _parse_grid(text: str) -> dict[str, tuple[float, ...]]:
    grid = dict(SAVINGS_GRID)
    for part in filter(None, (s.strip() for s in text.split(";"))):
        key, sep, values = part.partition("=")
        key = key.strip()
        if not sep or key not in grid:
            raise CliError(f"bad grid entry {part!r}; expected eps=..;delta=..;p=..")
        try:
            vals = tuple(float(v) for v in values.split(",") if v.strip())
        except ValueError as exc:
            raise CliError(f"bad grid values in {part!r}") from exc
        if not vals:
            raise CliError(f"empty grid for {key}")
        if key in ("delta", "p") and not all(0 < v < 1 or (key == "p" and v == 1) for v in vals):
            raise CliError(f"{key} values must lie in (0, 1)")
        if key == "eps" and not all(0 < v <= 1 for v in vals):
            raise CliError("eps values must lie in (0, 1]")
        grid[key] = vals
    return grid


def _script(condition: str, reliability: float, adaptivity: str, steps: int, mode: str = "fp-free"):
    adapt = "none -> simulation" if adaptivity == "none" else adaptivity
    return parse_script(
        "ml:\n"
        "  - script : simulate\n"
        f"  - condition : {condition}\n"
        f"  - reliability : {reliability!r}\n"
        f"  - mode : {mode}\n"
        f"  - adaptivity : {adapt}\n"
        f"  - steps : {steps}\n"
    )


def _coverage_runs(args) -> list[sim.CoverageReport]:
    eps = args.eps
    reports = []
    if args.preset == "smoke":
        script = _script(f"n - o > 0.02 +/- {eps!r}", args.reliability, "none", 4)
        world = sim.SyntheticWorld(0.82, 0.8, 0.1)
        return [sim.run_coverage(script, world, args.trials, args.seed, label="smoke", quantile_gap=True)]
    conditions = {
        "F1": (f"n > 0.8 +/- {eps!r}", sim.SyntheticWorld(0.8, 0.78, 0.1)),
        "F2": (f"n - o > 0.02 +/- {eps!r}", sim.SyntheticWorld(0.82, 0.8, 0.1)),
    }
    for name, (cond, world) in conditions.items():
        for adaptivity in ("none", "full"):
            script = _script(cond, args.reliability, adaptivity, args.steps)
            reports.append(
                sim.run_coverage(script, world, args.trials, args.seed, label=f"{name}/{adaptivity}")
            )
    return reports


def cmd_simulate(args) -> int:
    if args.trials < 1:
        raise CliError("--trials must be positive")
    if args.preset == "savings":
        grid = _parse_grid(args.grid or "")
        rows = sim.run_label_savings(grid["eps"], grid["delta"], grid["p"])
        if args.format == "json":
            print(json.dumps([r.__dict__ for r in rows], indent=2))
        elif args.format == "csv":
            sys.stdout.write(sim.savings_csv(rows))
        else:
            print(f"{'eps':>6} {'delta':>8} {'p':>5} {'hoeffding':>10} {'bennett':>10} {'active':>10}")
            for r in rows:
                print(f"{r.eps:>6g} {r.delta:>8g} {r.p:>5g} {r.n_hoeffding:>10} {r.n_bennett:>10} {r.n_active:>10}")
        return Exit.OK
    if args.grid:
        raise CliError("--grid applies to the savings preset only")
    reports = _coverage_runs(args)
    if args.format == "json":
        print(json.dumps([r.to_row() for r in reports], indent=2))
    elif args.format == "csv":
        sys.stdout.write(sim.coverage_csv(reports))
    else:
        for r in reports:
            print(
                f"{r.label:<10} N={r.testset_size:<8} violations={r.violations}/{r.trials} "
                f"rate={r.empirical_rate:.4f} limit={r.limit:.4f} {r.verdict.value}"
            )
    return Exit.OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlci", description="Statistically sound CI for ML models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def fmt(p):
        p.add_argument("--format", choices=("text", "csv", "json"), default="text")

    def planning(p):
        p.add_argument("--no-optimize", action="store_true", help="always use the generic Hoeffding plan")
        p.add_argument("--bound", choices=("auto", "exact"), default="auto",
                       help="'exact' sizes single-variable conditions with the exact binomial tail")

    p = sub.add_parser("estimate", help="compute the testset size for a config")
    p.add_argument("config")
    fmt(p)
    planning(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("init", help="open a session on a testset manifest")
    p.add_argument("config")
    p.add_argument("manifest")
    p.add_argument("--session", required=True)
    p.add_argument("--force", action="store_true")
    planning(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("commit", help="test a commit against the session's condition")
    p.add_argument("session")
    p.add_argument("--id", required=True, help="commit identifier")
    p.add_argument("--old", required=True, help="old model predictions (CSV)")
    p.add_argument("--new", required=True, help="new model predictions (CSV)")
    p.add_argument("--labels", help="additional labels (CSV)")
    fmt(p)
    p.set_defaults(func=cmd_commit)

    p = sub.add_parser("labels", help="list examples that need labels for a commit")
    p.add_argument("session")
    p.add_argument("--old", required=True)
    p.add_argument("--new", required=True)
    fmt(p)
    p.set_defaults(func=cmd_labels)

    p = sub.add_parser("release", help="export a retired testset")
    p.add_argument("session")
    p.add_argument("--output")
    p.set_defaults(func=cmd_release)

    p = sub.add_parser("simulate", help="Monte Carlo coverage and label-savings experiments")
    p.add_argument("--preset", choices=("coverage", "savings", "smoke"), default="smoke")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", help="savings grid, e.g. 'eps=0.01,0.02;delta=0.0001;p=0.1,0.5'")
    p.add_argument("--reliability", type=float, default=0.95)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--steps", type=int, default=32)
    fmt(p)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return Exit.OK if exc.code == 0 else Exit.ERROR
    try:
        return int(args.func(args))
    except (CliError, DSLError, EvaluationError, SessionError, InfeasiblePlanError, ValueError, KeyError) as exc:
        return _die(str(exc))
    except OSError as exc:
        return _die(f"{exc.filename or ''}: {exc.strerror or exc}")


if __name__ == "__main__":
    sys.exit(main())
