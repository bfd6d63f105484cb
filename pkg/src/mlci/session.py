"""CI session lifecycle: budget counting, signal release and the new-testset alarm."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import sys
import tempfile
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence, TextIO, Union

from mlci.dsl import Adaptivity, CiScript, format_script, parse_script
from mlci.estimator import SamplePlan, estimate_script
from mlci.evaluator import (
    Evaluation,
    EvaluationError,
    PredictionSet,
    TriBool,
    Verdict,
    evaluate_route,
    plan_route,
    write_pairs,
)

STATE_VERSION = 1


class SessionError(RuntimeError):
    pass


class TestsetTooSmall(SessionError):
    def __init__(self, required: int, given: int):
        super().__init__(f"testset has {given} examples; the plan requires {required}")
        self.required = required
        self.given = given


class BudgetExhausted(SessionError):
    pass


class AlarmNotFired(SessionError):
    pass


class Audience(str, Enum):
    DEVELOPER = "developer"
    SINK = "sink"


class SignalValue(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    ACCEPT = "accept"


class AlarmReason(str, Enum):
    BUDGET = "budget"
    PASSED = "passed"
    FAILED = "failed"
    LABEL_BUDGET = "label-budget"


@dataclass(frozen=True)
class Signal:
    audience: Audience
    value: SignalValue
    commit_id: str
    address: Optional[str] = None


@dataclass(frozen=True)
class AlarmStatus:
    """``Quiet`` when ``reason`` is None, otherwise a request for a new testset."""

    reason: Optional[AlarmReason] = None

    @property
    def fired(self) -> bool:
        return self.reason is not None

    def __str__(self) -> str:
        return "quiet" if self.reason is None else f"request-new-testset({self.reason.value})"


QUIET = AlarmStatus()


@dataclass(frozen=True)
class LogEntry:
    commit_id: str
    verdict: Verdict
    signal_released: bool
    value: TriBool
    route: str


@dataclass(frozen=True)
class CommitResult:
    developer: Signal
    sink: Optional[Signal]
    evaluation: Evaluation
    alarm: AlarmStatus


# --------------------------------------------------------------------------
# Sinks
# --------------------------------------------------------------------------


class Sink(Protocol):
    def deliver(self, event: dict) -> None: ...


class FileSink:
    """Appends one JSON object per line."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def deliver(self, event: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")


class StdoutSink:
    def __init__(self, stream: Optional[TextIO] = None):
        self.stream = stream

    def deliver(self, event: dict) -> None:
        print(json.dumps(event, sort_keys=True), file=self.stream or sys.stdout)


class MemorySink:
    def __init__(self):
        self.events: list[dict] = []

    def deliver(self, event: dict) -> None:
        self.events.append(event)


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------

Manifest = Sequence[tuple[str, Optional[str]]]


def read_manifest(path: Union[str, Path]) -> list[tuple[str, Optional[str]]]:
    """CSV of ``example_id`` with an optional ``label`` column."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if not header or header[0] != "example_id" or header[1:2] not in ([], ["label"]):
            raise EvaluationError(f"{path}: expected header 'example_id[,label]'")
        rows = []
        for row in reader:
            if not row:
                continue
            label = row[1].strip() if len(row) > 1 and row[1].strip() else None
            rows.append((row[0].strip(), label))
    return rows


def testset_identity(ids: Iterable[str]) -> str:
    h = hashlib.sha256()
    for i in ids:
        h.update(i.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


# --------------------------------------------------------------------------
# State
# --------------------------------------------------------------------------


@dataclass
class SessionState:
    script: CiScript
    plan: SamplePlan
    testset_id: str
    manifest: tuple[str, ...]
    labels: dict[str, str] = field(default_factory=dict)
    commits_used: int = 0
    outcome_log: list[LogEntry] = field(default_factory=list)
    alarm_fired: bool = False
    alarm_reason: Optional[AlarmReason] = None
    labels_consumed: int = 0
    closed: bool = False

    @property
    def remaining(self) -> int:
        return self.script.steps - self.commits_used

    def to_dict(self) -> dict:
        return {
            "version": STATE_VERSION,
            "script": self.script.source or format_script(self.script),
            "plan": self.plan.to_dict(),
            "testset_id": self.testset_id,
            "manifest": list(self.manifest),
            "labels": dict(sorted(self.labels.items())),
            "commits_used": self.commits_used,
            "outcome_log": [
                {
                    "commit_id": e.commit_id,
                    "verdict": e.verdict.value,
                    "signal_released": e.signal_released,
                    "value": e.value.value,
                    "route": e.route,
                }
                for e in self.outcome_log
            ],
            "alarm_fired": self.alarm_fired,
            "alarm_reason": self.alarm_reason.value if self.alarm_reason else None,
            "labels_consumed": self.labels_consumed,
            "closed": self.closed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SessionState":
        if d.get("version") != STATE_VERSION:
            raise SessionError(f"unsupported session state version {d.get('version')!r}")
        manifest = tuple(d["manifest"])
        if testset_identity(manifest) != d["testset_id"]:
            raise SessionError("session state is corrupt: testset identity mismatch")
        return cls(
            script=parse_script(d["script"]),
            plan=SamplePlan.from_dict(d["plan"]),
            testset_id=d["testset_id"],
            manifest=manifest,
            labels=dict(d["labels"]),
            commits_used=d["commits_used"],
            outcome_log=[
                LogEntry(
                    e["commit_id"],
                    Verdict(e["verdict"]),
                    e["signal_released"],
                    TriBool(e["value"]),
                    e["route"],
                )
                for e in d["outcome_log"]
            ],
            alarm_fired=d["alarm_fired"],
            alarm_reason=AlarmReason(d["alarm_reason"]) if d["alarm_reason"] else None,
            labels_consumed=d["labels_consumed"],
            closed=d["closed"],
        )


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# Session
# --------------------------------------------------------------------------


class Session:
    """One testset serving up to ``H`` commits.

    All mutating calls hold an internal lock, so the commit counter is a
    linearization point even when commits arrive from several threads.
    """

    def __init__(self, state: SessionState, sink: Optional[Sink] = None):
        self.state = state
        self.sink = sink
        self._lock = threading.Lock()

    # -- inspection ------------------------------------------------------

    def check_alarm(self) -> AlarmStatus:
        return AlarmStatus(self.state.alarm_reason) if self.state.alarm_fired else QUIET

    # -- labels ----------------------------------------------------------

    def add_labels(self, labels: Mapping[str, str]) -> int:
        """Record labels for testset examples; returns how many were new."""
        with self._lock:
            return self._add_labels(labels)

    def _add_labels(self, labels: Mapping[str, str]) -> int:
        universe = set(self.state.manifest)
        outside = [i for i in labels if i not in universe]
        if outside:
            raise EvaluationError(f"{len(outside)} label(s) are for examples outside the testset, e.g. {outside[0]!r}")
        added = 0
        for i, y in labels.items():
            if i not in self.state.labels:
                added += 1
            self.state.labels[i] = y
        self.state.labels_consumed += added
        return added

    def labels_needed(self, old: PredictionSet, new: PredictionSet) -> list[str]:
        """Unlabeled examples this commit's evaluation depends on.

        For active-labeling plans these are the disagreeing examples, capped
        at the per-commit label budget; exceeding the budget means the
        disagreement assumption behind the plan broke and fires the alarm.
        """
        with self._lock:
            st = self.state
            route = plan_route(st.script.condition, st.plan, old, new, st.labels, st.manifest)
            needed = [i for i in route.label_ids if i not in st.labels]
            if route.label_cap is not None and len(route.label_ids) > route.label_cap:
                self._fire(AlarmReason.LABEL_BUDGET, None)
                return needed[: route.label_cap]
            return needed

    # -- commits ---------------------------------------------------------

    def submit(
        self,
        commit_id: str,
        old: PredictionSet,
        new: PredictionSet,
        labels: Optional[Mapping[str, str]] = None,
    ) -> CommitResult:
        with self._lock:
            st = self.state
            if st.closed:
                raise BudgetExhausted("session is closed; open a new testset")
            if st.alarm_fired or st.commits_used >= st.script.steps:
                raise BudgetExhausted(
                    f"testset budget exhausted ({st.commits_used}/{st.script.steps} commits, "
                    f"alarm: {self.check_alarm()})"
                )
            if labels:
                self._add_labels(labels)
            route = plan_route(st.script.condition, st.plan, old, new, st.labels, st.manifest)
            evaluation = evaluate_route(
                st.script.condition, route, old, new, st.labels, st.script.mode
            )

            verdict_signal = SignalValue(evaluation.verdict.value)
            sink_signal = None
            if st.script.adaptivity is Adaptivity.NONE:
                developer = Signal(Audience.DEVELOPER, SignalValue.ACCEPT, commit_id)
                sink_signal = Signal(Audience.SINK, verdict_signal, commit_id, st.script.sink_address)
                released = False
            else:
                developer = Signal(Audience.DEVELOPER, verdict_signal, commit_id)
                released = True

            st.commits_used += 1
            st.outcome_log.append(
                LogEntry(commit_id, evaluation.verdict, released, evaluation.value, route.name)
            )
            if sink_signal is not None:
                self._emit(
                    {
                        "event": "verdict",
                        "commit_id": commit_id,
                        "verdict": evaluation.verdict.value,
                        "value": evaluation.value.value,
                        "address": st.script.sink_address,
                        "testset_id": st.testset_id,
                    }
                )

            if st.script.adaptivity is Adaptivity.FIRST_CHANGE:
                if evaluation.verdict.value == st.script.first_change_on:
                    reason = AlarmReason.PASSED if evaluation.verdict is Verdict.PASS else AlarmReason.FAILED
                    self._fire(reason, commit_id)
            if not st.alarm_fired and st.commits_used >= st.script.steps:
                self._fire(AlarmReason.BUDGET, commit_id)
            return CommitResult(developer, sink_signal, evaluation, self.check_alarm())

    def _fire(self, reason: AlarmReason, commit_id: Optional[str]) -> None:
        st = self.state
        if st.alarm_fired:
            return
        st.alarm_fired = True
        st.alarm_reason = reason
        self._emit(
            {
                "event": "alarm",
                "reason": reason.value,
                "commit_id": commit_id,
                "commits_used": st.commits_used,
                "address": st.script.sink_address,
                "testset_id": st.testset_id,
            }
        )

    def _emit(self, event: dict) -> None:
        if self.sink is not None:
            self.sink.deliver(event)

    # -- release ---------------------------------------------------------

    def release(self) -> str:
        """Export the retired testset (ids and known labels) as CSV."""
        with self._lock:
            st = self.state
            if not st.alarm_fired:
                raise AlarmNotFired("the testset can only be released after the new-testset alarm")
            st.closed = True
            return write_pairs((i, st.labels.get(i, "")) for i in st.manifest)

    # -- persistence -----------------------------------------------------

    def dumps(self) -> str:
        return json.dumps(self.state.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: Union[str, Path]) -> None:
        with self._lock:
            _atomic_write(Path(path), self.dumps())

    @classmethod
    def loads(cls, text: str, sink: Optional[Sink] = None) -> "Session":
        return cls(SessionState.from_dict(json.loads(text)), sink)

    @classmethod
    def load(cls, path: Union[str, Path], sink: Optional[Sink] = None) -> "Session":
        return cls.loads(Path(path).read_text(encoding="utf-8"), sink)


def open_session(
    script: CiScript,
    manifest: Manifest,
    sink: Optional[Sink] = None,
    plan: Optional[SamplePlan] = None,
    optimize: bool = True,
) -> Session:
    """Size the plan for ``script`` and bind it to ``manifest``."""
    ids = [i for i, _ in manifest]
    if len(set(ids)) != len(ids):
        raise EvaluationError("testset manifest has duplicate example ids")
    if plan is None:
        plan = estimate_script(script, optimize=optimize)
    required = plan.required_manifest_size()
    if len(ids) < required:
        raise TestsetTooSmall(required, len(ids))
    labels = {i: y for i, y in manifest if y is not None}
    state = SessionState(script, plan, testset_identity(ids), tuple(ids), labels)
    return Session(state, sink)
