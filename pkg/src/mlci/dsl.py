"""Condition language and ``ml:`` script parsing.

A condition is a conjunction of clauses joined by ``/\\``. Each clause
compares a linear expression over the variables ``n`` (new accuracy),
``o`` (old accuracy) and ``d`` (prediction disagreement rate) against a
constant, with an error tolerance after ``+/-``::

    n - 1.1 * o > 0.01 +/- 0.01 /\\ d < 0.1 +/- 0.01

Expressions follow ordinary arithmetic: ``+``/``-`` are left-associative
and ``*`` binds a constant to a single variable (``1.1 * o`` or ``o * 1.1``).
Numbers are kept as :class:`~decimal.Decimal` so that printing and
re-parsing a formula is lossless.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from enum import Enum
from typing import Optional


class DSLError(ValueError):
    """Base class for condition and script errors."""


class ConditionSyntaxError(DSLError):
    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        super().__init__(f"{message} (at position {position})")


class ScriptError(DSLError):
    pass


class Variable(str, Enum):
    NEW = "n"
    OLD = "o"
    DIFF = "d"


class Comparator(str, Enum):
    GT = ">"
    LT = "<"


class Mode(str, Enum):
    FP_FREE = "fp-free"
    FN_FREE = "fn-free"


class Adaptivity(str, Enum):
    FULL = "full"
    NONE = "none"
    FIRST_CHANGE = "firstChange"


@dataclass(frozen=True)
class Term:
    coefficient: Decimal
    variable: Variable


@dataclass(frozen=True)
class Expr:
    terms: tuple[Term, ...]

    def coefficient(self, var: Variable) -> Decimal:
        for t in self.terms:
            if t.variable is var:
                return t.coefficient
        return Decimal(0)

    @property
    def variables(self) -> tuple[Variable, ...]:
        return tuple(t.variable for t in self.terms)

    def is_difference(self) -> bool:
        """True for exactly ``n - o``."""
        return (
            len(self.terms) == 2
            and self.coefficient(Variable.NEW) == 1
            and self.coefficient(Variable.OLD) == -1
        )

    def is_single(self, var: Variable) -> bool:
        return len(self.terms) == 1 and self.terms[0] == Term(Decimal(1), var)


@dataclass(frozen=True)
class Clause:
    expr: Expr
    cmp: Comparator
    threshold: Decimal
    tolerance: Decimal


@dataclass(frozen=True)
class Formula:
    clauses: tuple[Clause, ...]


# --------------------------------------------------------------------------
# Tokenizer
# --------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<pm>\+/-)
  | (?P<and>/\\)
  | (?P<num>[0-9]+(?:\.[0-9]*)?(?:[eE][+-]?[0-9]+)?|\.[0-9]+(?:[eE][+-]?[0-9]+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*<>])
    """,
    re.VERBOSE,
)


@dataclass
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ConditionSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(_Token("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def error(self, message: str, tok: Optional[_Token] = None) -> ConditionSyntaxError:
        tok = tok or self.tok
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        return ConditionSyntaxError(f"{message}, found {found}", tok.pos, self.text)

    def accept(self, kind: str, text: Optional[str] = None) -> Optional[_Token]:
        tok = self.tok
        if tok.kind == kind and (text is None or tok.text == text):
            self.i += 1
            return tok
        return None

    def expect(self, kind: str, text: Optional[str] = None, what: str = "") -> _Token:
        tok = self.accept(kind, text)
        if tok is None:
            raise self.error(f"expected {what or text or kind}")
        return tok

    def number(self, signed: bool = False) -> Decimal:
        sign = 1
        if signed:
            if self.accept("op", "-"):
                sign = -1
            else:
                self.accept("op", "+")
        tok = self.expect("num", what="a number")
        try:
            return sign * Decimal(tok.text)
        except InvalidOperation:  # pragma: no cover - regex guarantees digits
            raise self.error("malformed number", tok)

    def variable(self) -> Variable:
        tok = self.tok
        if tok.kind != "name":
            raise self.error("expected a variable (n, o or d)")
        try:
            var = Variable(tok.text)
        except ValueError:
            raise ConditionSyntaxError(
                f"unknown variable {tok.text!r}; expected one of n, o, d", tok.pos, self.text
            ) from None
        self.i += 1
        return var

    def term(self) -> tuple[Decimal, Variable, int]:
        start = self.tok.pos
        coef = Decimal(1)
        nxt = self.tokens[min(self.i + 1, len(self.tokens) - 1)]
        if self.tok.kind == "num" or (self.tok.text == "-" and nxt.kind == "num"):
            coef = self.number(signed=True)
            self.expect("op", "*")
        var = self.variable()
        while self.accept("op", "*"):
            coef *= self.number(signed=True)
        return coef, var, start

    def expr(self) -> Expr:
        raw = [self.term()]
        signs = [1]
        while self.tok.kind == "op" and self.tok.text in "+-":
            signs.append(1 if self.tok.text == "+" else -1)
            self.i += 1
            raw.append(self.term())
        seen: set[Variable] = set()
        terms = []
        for sign, (coef, var, pos) in zip(signs, raw):
            if var in seen:
                raise ConditionSyntaxError(
                    f"variable {var.value!r} appears more than once in one expression",
                    pos,
                    self.text,
                )
            if coef == 0:
                raise ConditionSyntaxError("zero coefficient", pos, self.text)
            seen.add(var)
            terms.append(Term(sign * coef, var))
        return Expr(tuple(terms))

    def clause(self) -> Clause:
        lhs = self.expr()
        tok = self.tok
        if tok.kind == "op" and tok.text in "<>":
            self.i += 1
        else:
            raise self.error("expected '>' or '<'")
        threshold = self.number(signed=True)
        self.expect("pm", what="'+/-'")
        tol_tok = self.tok
        tolerance = self.number(signed=True)
        if tolerance <= 0:
            raise ConditionSyntaxError("tolerance must be positive", tol_tok.pos, self.text)
        return Clause(lhs, Comparator(tok.text), threshold, tolerance)

    def formula(self) -> Formula:
        clauses = [self.clause()]
        while self.accept("and"):
            clauses.append(self.clause())
        if self.tok.kind != "eof":
            raise self.error("expected '/\\' or end of condition")
        return Formula(tuple(clauses))


def parse_condition(text: str) -> Formula:
    """Parse a condition string into a :class:`Formula`."""
    return _Parser(text).formula()


# --------------------------------------------------------------------------
# Pretty printing
# --------------------------------------------------------------------------


def _fmt_num(x: Decimal) -> str:
    s = format(x, "f")
    if "." in s:
        s = s.rstrip("0").rstrip(".")
    return s or "0"


def format_expr(expr: Expr) -> str:
    parts = []
    for i, t in enumerate(expr.terms):
        if i == 0:
            if t.coefficient == 1:
                parts.append(t.variable.value)
            else:
                parts.append(f"{_fmt_num(t.coefficient)} * {t.variable.value}")
            continue
        mag = abs(t.coefficient)
        body = t.variable.value if mag == 1 else f"{_fmt_num(mag)} * {t.variable.value}"
        parts.append(("- " if t.coefficient < 0 else "+ ") + body)
    return " ".join(parts)


def format_clause(clause: Clause) -> str:
    return (
        f"{format_expr(clause.expr)} {clause.cmp.value} "
        f"{_fmt_num(clause.threshold)} +/- {_fmt_num(clause.tolerance)}"
    )


def format_condition(formula: Formula) -> str:
    return " /\\ ".join(format_clause(c) for c in formula.clauses)


# --------------------------------------------------------------------------
# Scripts
# --------------------------------------------------------------------------

REQUIRED_KEYS = ("script", "condition", "reliability", "mode", "adaptivity", "steps")
OPTIONAL_KEYS = ("firstChange_on",)


@dataclass(frozen=True)
class CiScript:
    script_path: str
    condition: Formula
    reliability: Decimal
    mode: Mode
    adaptivity: Adaptivity
    steps: int
    sink_address: Optional[str] = None
    first_change_on: str = "pass"
    source: str = field(default="", compare=False, repr=False)

    @property
    def delta(self) -> float:
        return float(Decimal(1) - self.reliability)


_ENTRY_RE = re.compile(r"^-\s*(?P<key>[A-Za-z_]+)\s*:\s*(?P<value>.*?)\s*$")


def _ml_entries(text: str) -> list[tuple[int, str, str]]:
    lines = text.splitlines()
    start = None
    for i, line in enumerate(lines):
        if line.strip() == "ml:":
            start = i
            break
    if start is None:
        raise ScriptError("no 'ml:' section found")
    base_indent = len(lines[start]) - len(lines[start].lstrip())
    entries = []
    for lineno, line in enumerate(lines[start + 1 :], start=start + 2):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        indent = len(line) - len(line.lstrip())
        if indent <= base_indent:
            break  # next top-level section
        m = _ENTRY_RE.match(stripped)
        if m is None:
            raise ScriptError(f"line {lineno}: expected '- key : value', got {stripped!r}")
        entries.append((lineno, m["key"], m["value"]))
    return entries


def parse_script(text: str) -> CiScript:
    """Parse the ``ml:`` section of a CI configuration file."""
    values: dict[str, tuple[int, str]] = {}
    for lineno, key, value in _ml_entries(text):
        if key not in REQUIRED_KEYS and key not in OPTIONAL_KEYS:
            raise ScriptError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ScriptError(f"line {lineno}: duplicate key {key!r}")
        values[key] = (lineno, value)
    missing = [k for k in REQUIRED_KEYS if k not in values]
    if missing:
        raise ScriptError(f"missing key(s): {', '.join(missing)}")

    def bad(key: str, why: str) -> ScriptError:
        return ScriptError(f"line {values[key][0]}: {key}: {why}")

    script_path = values["script"][1]
    if not script_path:
        raise bad("script", "empty value")

    try:
        condition = parse_condition(values["condition"][1])
    except ConditionSyntaxError as exc:
        raise bad("condition", str(exc)) from exc

    try:
        reliability = Decimal(values["reliability"][1])
    except InvalidOperation:
        raise bad("reliability", "not a number") from None
    if not (0 < reliability < 1):
        raise bad("reliability", "must lie strictly between 0 and 1")

    try:
        mode = Mode(values["mode"][1])
    except ValueError:
        raise bad("mode", "expected fp-free or fn-free") from None

    raw_adapt = values["adaptivity"][1]
    sink = None
    m = re.fullmatch(r"none\s*->\s*(\S+)", raw_adapt)
    if m:
        adaptivity, sink = Adaptivity.NONE, m.group(1)
    else:
        try:
            adaptivity = Adaptivity(raw_adapt)
        except ValueError:
            raise bad("adaptivity", "expected full, none -> ADDRESS or firstChange") from None
        if adaptivity is Adaptivity.NONE:
            raise bad("adaptivity", "'none' requires a sink address: none -> ADDRESS")

    try:
        steps = int(values["steps"][1])
    except ValueError:
        raise bad("steps", "not an integer") from None
    if steps < 1:
        raise bad("steps", "must be at least 1")

    first_change_on = "pass"
    if "firstChange_on" in values:
        first_change_on = values["firstChange_on"][1]
        if first_change_on not in ("pass", "fail"):
            raise bad("firstChange_on", "expected pass or fail")

    return CiScript(
        script_path=script_path,
        condition=condition,
        reliability=reliability,
        mode=mode,
        adaptivity=adaptivity,
        steps=steps,
        sink_address=sink,
        first_change_on=first_change_on,
        source=text,
    )


def format_script(script: CiScript) -> str:
    adapt = script.adaptivity.value
    if script.adaptivity is Adaptivity.NONE:
        adapt = f"none -> {script.sink_address}"
    lines = [
        "ml:",
        f"  - script     : {script.script_path}",
        f"  - condition  : {format_condition(script.condition)}",
        f"  - reliability: {script.reliability}",
        f"  - mode       : {script.mode.value}",
        f"  - adaptivity : {adapt}",
        f"  - steps      : {script.steps}",
    ]
    if script.first_change_on != "pass":
        lines.append(f"  - firstChange_on: {script.first_change_on}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Optimization patterns
# --------------------------------------------------------------------------


class PatternKind(str, Enum):
    PATTERN1 = "pattern1"
    PATTERN2_DIFF = "pattern2-diff"
    PATTERN2_LOWER = "pattern2-lower"
    GENERIC = "generic"


# lower-bound pattern only pays off when the accuracy bound is high
PATTERN2_LOWER_MIN_A = Decimal("0.9")


@dataclass(frozen=True)
class PatternTag:
    kind: PatternKind
    constants: dict = field(default_factory=dict)

    def __getitem__(self, key: str) -> Decimal:
        return self.constants[key]


def match_pattern(formula: Formula) -> PatternTag:
    """Recognize the condition shapes that have a cheaper estimator."""
    clauses = formula.clauses
    if len(clauses) == 2:
        diff = [c for c in clauses if c.cmp is Comparator.LT and c.expr.is_single(Variable.DIFF)]
        gain = [c for c in clauses if c.cmp is Comparator.GT and c.expr.is_difference()]
        if len(diff) == 1 and len(gain) == 1:
            d, g = diff[0], gain[0]
            return PatternTag(
                PatternKind.PATTERN1,
                {"A": d.threshold, "B": d.tolerance, "C": g.threshold, "D": g.tolerance},
            )
    if len(clauses) == 1:
        c = clauses[0]
        if c.cmp is Comparator.GT and c.expr.is_difference():
            return PatternTag(PatternKind.PATTERN2_DIFF, {"C": c.threshold, "D": c.tolerance})
        if (
            c.cmp is Comparator.GT
            and c.expr.is_single(Variable.NEW)
            and c.threshold >= PATTERN2_LOWER_MIN_A
        ):
            return PatternTag(PatternKind.PATTERN2_LOWER, {"A": c.threshold, "B": c.tolerance})
    return PatternTag(PatternKind.GENERIC)
