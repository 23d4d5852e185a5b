"""Contradicting-scenario rules over binary traffic contexts.

A context is a d-bit vector (default d=3: leftmost lane, rightmost lane,
near intersection). A rule pairs a maneuver with a ternary pattern over
{0, 1, *}; the rule fires for a context when every non-wildcard symbol
equals the corresponding bit, marking that maneuver as implausible there
(e.g. a left lane change from the leftmost lane).

Rule files are UTF-8 and line-oriented::

    # comment
    left_lane_change : 1**

One rule per line, duplicates rejected, order preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from itertools import product
from typing import Iterable, Sequence

from .errors import ContractError, RuleParseError

CLASS_NAMES = (
    "go_straight",
    "left_lane_change",
    "left_turn",
    "right_lane_change",
    "right_turn",
)
CONTEXT_NAMES = ("leftmost_lane", "rightmost_lane", "near_intersection")
DEFAULT_CONTEXT_DIM = len(CONTEXT_NAMES)

ContextVector = tuple[int, ...]

_PATTERN_SYMBOLS = frozenset("01*")


def validate_context(c: Sequence[int], dim: int) -> ContextVector:
    bits = tuple(int(b) for b in c)
    if len(bits) != dim or any(b not in (0, 1) for b in bits):
        raise ContractError(f"context {c!r} is not a {dim}-bit vector")
    return bits


def validate_pattern(pattern: str, dim: int) -> str:
    if len(pattern) != dim:
        raise ContractError(
            f"pattern {pattern!r} has length {len(pattern)}, expected {dim}"
        )
    bad = set(pattern) - _PATTERN_SYMBOLS
    if bad:
        raise ContractError(f"pattern {pattern!r} uses illegal symbols {sorted(bad)}")
    return pattern


def matches(pattern: str, context: Sequence[int]) -> bool:
    """True iff every non-wildcard symbol equals the matching context bit."""
    if len(pattern) != len(context):
        raise ContractError(
            f"pattern length {len(pattern)} vs context length {len(context)}"
        )
    return all(s == "*" or int(s) == int(b) for s, b in zip(pattern, context))


@dataclass(frozen=True)
class ScenarioRule:
    maneuver: str
    class_index: int
    pattern: str


@dataclass(frozen=True)
class ScenarioSet:
    """An ordered, duplicate-free collection of contradiction rules."""

    rules: tuple[ScenarioRule, ...]
    class_names: tuple[str, ...]
    context_dim: int

    def matched_rules(self, context: Sequence[int]) -> list[ScenarioRule]:
        c = validate_context(context, self.context_dim)
        return [r for r in self.rules if matches(r.pattern, c)]

    def contradicts(self, class_index: int, context: Sequence[int]) -> bool:
        return any(r.class_index == class_index for r in self.matched_rules(context))

    def consistent_contexts(self, class_index: int) -> list[ContextVector]:
        """All contexts in which this maneuver is not contradicted."""
        return [
            c for c in all_contexts(self.context_dim)
            if not self.contradicts(class_index, c)
        ]

    def __len__(self) -> int:
        return len(self.rules)


def all_contexts(dim: int) -> list[ContextVector]:
    return [c for c in product((0, 1), repeat=dim)]


def empty_ruleset(
    class_names: Sequence[str] = CLASS_NAMES, context_dim: int = DEFAULT_CONTEXT_DIM
) -> ScenarioSet:
    return ScenarioSet((), tuple(class_names), context_dim)


def parse_rules(
    text: str,
    class_names: Sequence[str] = CLASS_NAMES,
    context_dim: int = DEFAULT_CONTEXT_DIM,
) -> ScenarioSet:
    """Parse rule lines, resolving maneuver names against the class list.

    Raises :class:`RuleParseError` with the 1-based line number on an
    unknown maneuver, wrong pattern length, illegal symbol, malformed
    line, or duplicate rule.
    """
    names = tuple(class_names)
    index = {name: i for i, name in enumerate(names)}
    rules: list[ScenarioRule] = []
    seen: set[tuple[str, str]] = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise RuleParseError(f"expected '<maneuver> : <pattern>', got {raw!r}",
                                 line_no)
        name_part, pattern_part = (s.strip() for s in line.split(":", 1))
        if name_part not in index:
            raise RuleParseError(f"unknown maneuver {name_part!r}", line_no)
        try:
            pattern = validate_pattern(pattern_part, context_dim)
        except ContractError as exc:
            raise RuleParseError(str(exc), line_no) from None
        key = (name_part, pattern)
        if key in seen:
            raise RuleParseError(f"duplicate rule {name_part} : {pattern}", line_no)
        seen.add(key)
        rules.append(ScenarioRule(name_part, index[name_part], pattern))
    return ScenarioSet(tuple(rules), names, context_dim)


def serialize_rules(ruleset: ScenarioSet) -> str:
    return "".join(f"{r.maneuver} : {r.pattern}\n" for r in ruleset.rules)


def load_rules_file(
    path,
    class_names: Sequence[str] = CLASS_NAMES,
    context_dim: int = DEFAULT_CONTEXT_DIM,
) -> ScenarioSet:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_rules(fh.read(), class_names, context_dim)


def default_rules_path():
    """Filesystem path of the shipped contradiction ruleset."""
    return resources.files("driverintent").joinpath("assets/brain4cars_rules.txt")


def load_default_rules() -> ScenarioSet:
    return parse_rules(default_rules_path().read_text(encoding="utf-8"))


@dataclass
class RulesetReport:
    """Per-class contradiction coverage, by exhaustive context enumeration."""

    contradicted_contexts: dict[str, list[ContextVector]] = field(default_factory=dict)
    unsatisfiable: list[str] = field(default_factory=list)

    def __str__(self) -> str:
        lines = []
        for name, contexts in self.contradicted_contexts.items():
            flag = "  UNSATISFIABLE" if name in self.unsatisfiable else ""
            lines.append(f"{name}: contradicted in {len(contexts)} contexts{flag}")
        return "\n".join(lines)


def validate_ruleset(
    ruleset: ScenarioSet,
    class_names: Iterable[str] | None = None,
    context_dim: int | None = None,
) -> RulesetReport:
    """Enumerate every context per class; flag classes contradicted everywhere."""
    names = tuple(class_names) if class_names is not None else ruleset.class_names
    dim = context_dim if context_dim is not None else ruleset.context_dim
    for rule in ruleset.rules:
        if rule.maneuver not in names:
            raise ContractError(f"rule maneuver {rule.maneuver!r} not in class list")
        validate_pattern(rule.pattern, dim)
    report = RulesetReport()
    contexts = all_contexts(dim)
    for idx, name in enumerate(names):
        hit = [c for c in contexts if ruleset.contradicts(idx, c)]
        if hit:
            report.contradicted_contexts[name] = hit
        if len(hit) == len(contexts):
            report.unsatisfiable.append(name)
    return report
