"""Rules, the persistent pool, the firing cache, and decision composition.

A decision set is an unordered collection of stand-alone rules. Each rule
either fires (predicting its target label) or abstains on an input; the set's
prediction is the fired label with the highest priority rank, falling back to
the default label when everything abstains.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

from .errors import FileFormatError, IncompleteCacheError, InvalidInputError
from .labels import Example, LabelSpace
from .metrics import balanced_accuracy, macro_f1

ORIGIN_NEW_SYNTHESIS = "new_synthesis"
ORIGIN_REVISION = "revision"
ORIGIN_RL_MINED = "rl_mined"
_ORIGINS = (ORIGIN_NEW_SYNTHESIS, ORIGIN_REVISION, ORIGIN_RL_MINED)


@dataclass(frozen=True)
class Provenance:
    origin: str
    iteration: int = 0
    parent_rule_id: Optional[str] = None

    def __post_init__(self):
        if self.origin not in _ORIGINS:
            raise InvalidInputError(f"unknown provenance origin {self.origin!r}")
        if self.origin == ORIGIN_REVISION and not self.parent_rule_id:
            raise InvalidInputError("a revision must name its parent rule")


@dataclass(frozen=True)
class Rule:
    """One stand-alone natural-language decision rule.

    Rules never target the default label: the default is reached only by
    abstention, so a rule firing for it would be inert under priority argmax.
    """

    rule_id: str
    name: str
    target_label: str
    body: str
    provenance: Optional[Provenance] = None

    def __post_init__(self):
        if not self.rule_id or any(c.isspace() for c in self.rule_id):
            raise InvalidInputError(f"rule_id {self.rule_id!r} must be non-empty without whitespace")
        if not self.name or "\n" in self.name:
            raise InvalidInputError("rule name must be a non-empty single line")
        if not self.body.strip():
            raise InvalidInputError(f"rule {self.rule_id}: body is empty")

    def validate_against(self, space: LabelSpace) -> "Rule":
        space.rank(self.target_label)
        if self.target_label == space.default_label:
            raise InvalidInputError(
                f"rule {self.rule_id} targets the default label {self.target_label!r}"
            )
        return self

    def prompt_text(self) -> str:
        """The rule as shown to classifier/gradient prompts."""
        return f"Rule Name: {self.name}\n{self.body}"


class RulePool:
    """Append-only collection of rules keyed by rule_id.

    Rules are never removed or mutated once inserted, so later subset
    searches can always revisit candidates generated early.
    """

    def __init__(self, rules: Iterable[Rule] = ()):
        self._rules: dict[str, Rule] = {}
        self._created_at: dict[str, int] = {}
        for rule in rules:
            self.add(rule, iteration=rule.provenance.iteration if rule.provenance else 0)

    def add(self, rule: Rule, iteration: int = 0) -> Rule:
        if rule.rule_id in self._rules:
            raise InvalidInputError(f"rule id {rule.rule_id!r} already in pool")
        self._rules[rule.rule_id] = rule
        self._created_at[rule.rule_id] = iteration
        return rule

    def __len__(self) -> int:
        return len(self._rules)

    def __iter__(self) -> Iterator[Rule]:
        return iter(self._rules.values())

    def __contains__(self, rule_id: str) -> bool:
        return rule_id in self._rules

    def get(self, rule_id: str) -> Rule:
        try:
            return self._rules[rule_id]
        except KeyError:
            raise InvalidInputError(f"unknown rule id {rule_id!r}") from None

    def created_at(self, rule_id: str) -> int:
        self.get(rule_id)
        return self._created_at[rule_id]

    @property
    def rule_ids(self) -> list[str]:
        return list(self._rules)

    def next_rule_id(self) -> str:
        n = len(self._rules) + 1
        while f"r{n:04d}" in self._rules:
            n += 1
        return f"r{n:04d}"

    def copy(self) -> "RulePool":
        clone = RulePool()
        clone._rules = dict(self._rules)
        clone._created_at = dict(self._created_at)
        return clone


class FiringTable:
    """Write-once cache of per-(example, rule) firing verdicts.

    This cache is the substrate that makes subset search model-free: once a
    rule's verdict on an example is recorded, every subset containing that
    rule composes from the cache. Re-inserting an equal value is a no-op;
    inserting a conflicting value is an error. Distinct keys may be inserted
    concurrently.
    """

    def __init__(self):
        self._entries: dict[tuple[str, str], bool] = {}
        self._reasoning: dict[tuple[str, str], str] = {}
        self._lock = threading.Lock()

    def put(self, example_id: str, rule_id: str, fired: bool, reasoning: Optional[str] = None) -> None:
        key = (example_id, rule_id)
        with self._lock:
            if key in self._entries:
                if self._entries[key] != fired:
                    raise InvalidInputError(
                        f"conflicting firing for example={example_id!r} rule={rule_id!r}"
                    )
                return
            self._entries[key] = fired
            if reasoning is not None:
                self._reasoning[key] = reasoning

    def has(self, example_id: str, rule_id: str) -> bool:
        return (example_id, rule_id) in self._entries

    def fired(self, example_id: str, rule_id: str) -> bool:
        try:
            return self._entries[(example_id, rule_id)]
        except KeyError:
            raise IncompleteCacheError(example_id, rule_id) from None

    def reasoning(self, example_id: str, rule_id: str) -> Optional[str]:
        return self._reasoning.get((example_id, rule_id))

    def __len__(self) -> int:
        return len(self._entries)

    def require_complete(self, example_ids: Iterable[str], rule_ids: Iterable[str]) -> None:
        rule_ids = list(rule_ids)
        for ex_id in example_ids:
            for r_id in rule_ids:
                if (ex_id, r_id) not in self._entries:
                    raise IncompleteCacheError(ex_id, r_id)

    def items(self) -> list[tuple[str, str, bool]]:
        return [(ex, r, fired) for (ex, r), fired in self._entries.items()]

    def copy(self) -> "FiringTable":
        clone = FiringTable()
        with self._lock:
            clone._entries = dict(self._entries)
            clone._reasoning = dict(self._reasoning)
        return clone


@dataclass(frozen=True)
class ActiveSet:
    """The currently selected rule subset and its validation score."""

    rule_ids: tuple[str, ...]
    score: float
    iteration: int = 0

    def __post_init__(self):
        ids = tuple(self.rule_ids)
        if len(set(ids)) != len(ids):
            raise InvalidInputError("active set contains duplicate rule ids")
        object.__setattr__(self, "rule_ids", ids)


def compose(firings: Sequence[tuple[str, bool]], space: LabelSpace) -> str:
    """Priority-argmax composition of per-rule verdicts.

    Returns the fired target label with the highest priority rank, or the
    default label when nothing fired. Order-independent and deterministic;
    for a binary space this is the standard max-pool.
    """
    best_rank = 0
    best_label = space.default_label
    for target_label, fired in firings:
        rank = space.rank(target_label)
        if fired and rank > best_rank:
            best_rank = rank
            best_label = target_label
    return best_label


def evaluate_subset(
    subset: Sequence[str],
    table: FiringTable,
    examples: Sequence[Example],
    space: LabelSpace,
    pool: Optional[RulePool] = None,
    base: Sequence[str] = (),
    target_of: Optional[dict[str, str]] = None,
) -> tuple[list[str], float, float]:
    """Compose cached firings for a rule subset over a set of examples.

    Performs zero model calls: every (example, rule) verdict must already be
    in the table. ``base`` rules (if any) are always composed in but are not
    part of the searched subset. Returns per-example predictions, macro-F1,
    and balanced accuracy.
    """
    if target_of is None:
        if pool is None:
            raise InvalidInputError("evaluate_subset needs a pool or a target_of map")
        target_of = {r.rule_id: r.target_label for r in pool}
    all_ids = list(base) + [r for r in subset if r not in base]
    preds = []
    for ex in examples:
        firings = [(target_of[r_id], table.fired(ex.id, r_id)) for r_id in all_ids]
        preds.append(compose(firings, space))
    golds = [ex.gold for ex in examples]
    return preds, macro_f1(preds, golds, space), balanced_accuracy(preds, golds, space)


# ---------------------------------------------------------------------------
# SOP file format: one block per rule, body reproduced byte-identically.
#
#   RULE <rule_id> LABEL <target_label> NAME <name>
#   <body lines>
#   END RULE

_END_MARKER = "END RULE"


def serialize_sop(rules: Sequence[Rule]) -> str:
    blocks = []
    for rule in rules:
        if any(c.isspace() for c in rule.target_label):
            raise FileFormatError(f"rule {rule.rule_id}: label contains whitespace")
        for line in rule.body.split("\n"):
            if line.strip() == _END_MARKER:
                raise FileFormatError(
                    f"rule {rule.rule_id}: body contains the terminator line {_END_MARKER!r}"
                )
        header = f"RULE {rule.rule_id} LABEL {rule.target_label} NAME {rule.name}"
        blocks.append(f"{header}\n{rule.body}\n{_END_MARKER}\n")
    return "\n".join(blocks)


def parse_sop(text: str) -> list[Rule]:
    rules = []
    lines = text.split("\n")
    i = 0
    while i < len(lines):
        line = lines[i]
        if not line.strip():
            i += 1
            continue
        if not line.startswith("RULE "):
            raise FileFormatError(f"SOP line {i + 1}: expected a RULE header, got {line!r}")
        parts = line.split(" ", 5)
        if len(parts) < 6 or parts[0] != "RULE" or parts[2] != "LABEL" or parts[4] != "NAME":
            raise FileFormatError(f"SOP line {i + 1}: malformed header {line!r}")
        rule_id, target_label, name = parts[1], parts[3], parts[5]
        body_lines = []
        i += 1
        while i < len(lines) and lines[i].strip() != _END_MARKER:
            body_lines.append(lines[i])
            i += 1
        if i >= len(lines):
            raise FileFormatError(f"SOP rule {rule_id}: missing {_END_MARKER!r} terminator")
        i += 1
        rules.append(Rule(rule_id=rule_id, name=name, target_label=target_label, body="\n".join(body_lines)))
    return rules


def save_sop(rules: Sequence[Rule], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(serialize_sop(rules), encoding="utf-8")
    os.replace(tmp, path)


def load_sop(path: str | Path, space: Optional[LabelSpace] = None) -> list[Rule]:
    rules = parse_sop(Path(path).read_text(encoding="utf-8"))
    if space is not None:
        for rule in rules:
            rule.validate_against(space)
    seen = set()
    for rule in rules:
        if rule.rule_id in seen:
            raise FileFormatError(f"SOP contains duplicate rule id {rule.rule_id!r}")
        seen.add(rule.rule_id)
    return rules


def sop_prompt_text(rules: Sequence[Rule]) -> str:
    """Rulebook rendering used inside the <RULES> prompt block."""
    return "\n\n".join(rule.prompt_text() for rule in rules)
