"""Label space, examples, and the line-delimited dataset file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

from .errors import FileFormatError, InvalidInputError

SPLITS = ("train", "val", "test")
DIFFICULTIES = ("hard", "easy")


@dataclass(frozen=True)
class LabelSpace:
    """Ordered label set with a priority rank per label.

    The label with the lowest rank is the default: it is predicted when no
    rule fires. Ranks must form a bijection onto 1..C. ``aliases`` optionally
    maps each label to an integer alias accepted by the output parsers
    (prompt corpora mix "entailment" and "label 1" style answers).
    """

    labels: tuple[str, ...]
    priority: dict[str, int] = field(default_factory=dict)
    aliases: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) < 2:
            raise InvalidInputError("a label space needs at least two labels")
        if len(set(labels)) != len(labels):
            raise InvalidInputError("labels must be distinct")
        priority = dict(self.priority)
        if not priority:
            priority = {lab: i + 1 for i, lab in enumerate(labels)}
        if set(priority) != set(labels):
            raise InvalidInputError("priority must cover exactly the label set")
        if sorted(priority.values()) != list(range(1, len(labels) + 1)):
            raise InvalidInputError("priority ranks must be a bijection onto 1..C")
        object.__setattr__(self, "priority", priority)
        aliases = dict(self.aliases)
        if aliases and set(aliases) - set(labels):
            raise InvalidInputError("aliases reference unknown labels")
        if aliases and len(set(aliases.values())) != len(aliases):
            raise InvalidInputError("integer aliases must be distinct")
        object.__setattr__(self, "aliases", aliases)

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def default_label(self) -> str:
        return min(self.labels, key=lambda lab: self.priority[lab])

    def rank(self, label: str) -> int:
        try:
            return self.priority[label]
        except KeyError:
            raise InvalidInputError(f"unknown label {label!r}") from None

    def by_rank(self, rank: int) -> str:
        for lab, r in self.priority.items():
            if r == rank:
                return lab
        raise InvalidInputError(f"no label with rank {rank}")

    def display(self, label: str) -> str:
        """Prompt-facing token for a label: its integer alias when defined."""
        self.rank(label)
        if label in self.aliases:
            return str(self.aliases[label])
        return label

    def match(self, token: str) -> Optional[str]:
        """Resolve a raw answer token to a label, or None.

        Accepts the label name case-insensitively or its integer alias.
        """
        token = token.strip()
        lowered = token.lower()
        for lab in self.labels:
            if lab.lower() == lowered:
                return lab
        if token.lstrip("+-").isdigit():
            value = int(token)
            for lab, alias in self.aliases.items():
                if alias == value:
                    return lab
        return None

    @property
    def labels_display(self) -> str:
        return " / ".join(self.labels)


@dataclass(frozen=True)
class Example:
    """One labeled document."""

    id: str
    text: str
    gold: str
    evidence: Optional[str] = None
    split: str = "train"
    difficulty: Optional[str] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidInputError(f"unknown split {self.split!r}")
        if self.difficulty is not None and self.difficulty not in DIFFICULTIES:
            raise InvalidInputError(f"unknown difficulty {self.difficulty!r}")

    def with_difficulty(self, difficulty: str) -> "Example":
        return replace(self, difficulty=difficulty)


def validate_examples(examples: Iterable[Example], space: LabelSpace) -> list[Example]:
    out = []
    seen = set()
    for ex in examples:
        if ex.id in seen:
            raise InvalidInputError(f"duplicate example id {ex.id!r}")
        seen.add(ex.id)
        space.rank(ex.gold)
        out.append(ex)
    return out


# Dataset file: UTF-8 JSON lines with a fixed field order. JSON escaping is
# the record grammar for the text field.
_FIELDS = ("id", "text", "label", "evidence", "split")


def example_to_record(ex: Example) -> str:
    rec = {"id": ex.id, "text": ex.text, "label": ex.gold, "split": ex.split}
    if ex.evidence is not None:
        rec = {"id": ex.id, "text": ex.text, "label": ex.gold, "evidence": ex.evidence, "split": ex.split}
    return json.dumps(rec, ensure_ascii=False)


def record_to_example(line: str, lineno: int = 0) -> Example:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"dataset line {lineno}: not a valid record ({exc})") from exc
    missing = [f for f in ("id", "text", "label", "split") if f not in rec]
    if missing:
        raise FileFormatError(f"dataset line {lineno}: missing fields {missing}")
    return Example(
        id=str(rec["id"]),
        text=str(rec["text"]),
        gold=str(rec["label"]),
        evidence=rec.get("evidence"),
        split=str(rec["split"]),
    )


def save_dataset(examples: Iterable[Example], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(example_to_record(ex) + "\n")


def load_dataset(path: str | Path, space: Optional[LabelSpace] = None) -> list[Example]:
    path = Path(path)
    examples = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            examples.append(record_to_example(line, lineno))
    if space is not None:
        validate_examples(examples, space)
    return examples
