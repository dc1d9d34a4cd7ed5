"""Teacher trace collection with rejection sampling, and the R-SFT export.

The teacher sees the learned rulebook in-context and is sampled up to M times
per example; the first trace whose predicted label matches the gold label is
accepted. Examples failing all M attempts are tagged hard and excluded from
the distillation set (they seed the RL stage instead). The exported records
pair a rules-free prompt with the accepted reasoning, because the student is
meant to internalize the rulebook rather than read it.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from random import Random
from typing import Optional, Sequence, Union

from .errors import FileFormatError, InvalidInputError, UnbalanceableError
from .gateway import Gateway
from .labels import Example, LabelSpace
from .parsing import ParseFailure, parse_reasoning_label
from .task import TaskProfile

logger = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    M: int = 4
    teacher_model: str = "teacher"
    temperature: float = 0.7

    def validate(self) -> "DistillConfig":
        if self.M < 1:
            raise InvalidInputError("M must be >= 1")
        if self.temperature < 0:
            raise InvalidInputError("temperature must be >= 0")
        return self


@dataclass(frozen=True)
class TeacherTrace:
    example_id: str
    attempt_index: int
    reasoning: str
    predicted: Union[str, ParseFailure]
    accepted: bool


@dataclass(frozen=True)
class TraceResult:
    """All attempts for one example; accepted is None when the example is hard."""

    example_id: str
    accepted: Optional[TeacherTrace]
    attempts: tuple[TeacherTrace, ...]

    @property
    def hard(self) -> bool:
        return self.accepted is None

    @property
    def attempts_used(self) -> int:
        return len(self.attempts)


@dataclass
class DistillationSet:
    accepted: list[tuple[str, TeacherTrace]]
    hard_ids: set[str]
    easy_ids: set[str]
    # audit log: every attempt per example, kept so the revision stage can
    # pair teacher-incorrect traces with later RL successes
    attempts: dict[str, list[TeacherTrace]] = field(default_factory=dict)


class TeacherSampler:
    """Draws up to M rulebook-grounded traces per example with early stop."""

    def __init__(self, config: DistillConfig, gateway: Gateway, space: LabelSpace, task: TaskProfile):
        self.config = config.validate()
        self.gateway = gateway
        self.space = space
        self.task = task

    def sample(self, example: Example, sop_text: str) -> TraceResult:
        if not sop_text.strip():
            raise InvalidInputError("the rulebook text is empty")
        attempts: list[TeacherTrace] = []
        bindings = self.task.reasoning_bindings(self.space, example.text, example.id)
        bindings["rulebook"] = sop_text
        for attempt in range(1, self.config.M + 1):
            response = self.gateway.call(
                "reasoning_with_rules",
                bindings,
                model=self.config.teacher_model,
                temperature=self.config.temperature,
                seed_tag=f"attempt-{attempt}",
            )
            parsed = parse_reasoning_label(response.content, self.space)
            if isinstance(parsed, ParseFailure):
                self.gateway.note_parse_failure()
                trace = TeacherTrace(example.id, attempt, "", parsed, accepted=False)
            else:
                ok = parsed.label == example.gold
                trace = TeacherTrace(example.id, attempt, parsed.reasoning, parsed.label, accepted=ok)
            attempts.append(trace)
            if trace.accepted:
                return TraceResult(example.id, accepted=trace, attempts=tuple(attempts))
        return TraceResult(example.id, accepted=None, attempts=tuple(attempts))


def build_distillation_set(results: Sequence[TraceResult]) -> DistillationSet:
    """Partition processed examples into hard/easy and collect accepted traces."""
    dset = DistillationSet(accepted=[], hard_ids=set(), easy_ids=set())
    for result in results:
        dset.attempts[result.example_id] = list(result.attempts)
        if result.hard:
            dset.hard_ids.add(result.example_id)
        else:
            dset.easy_ids.add(result.example_id)
            dset.accepted.append((result.example_id, result.accepted))
    return dset


def apply_difficulty(examples: Sequence[Example], dset: DistillationSet) -> list[Example]:
    out = []
    for ex in examples:
        if ex.id in dset.hard_ids:
            out.append(ex.with_difficulty("hard"))
        elif ex.id in dset.easy_ids:
            out.append(ex.with_difficulty("easy"))
        else:
            out.append(ex)
    return out


def balance_upsample(
    dset: DistillationSet,
    examples_by_id: dict[str, Example],
    space: LabelSpace,
    rng: Random,
) -> list[tuple[str, TeacherTrace]]:
    """One class-balanced epoch over the accepted traces.

    Every class contributes exactly the majority-class count: majority items
    appear exactly once, minority classes get one full pass plus uniform
    draws with replacement, and the whole sequence is shuffled.
    """
    by_class: dict[str, list[tuple[str, TeacherTrace]]] = {lab: [] for lab in space.labels}
    for example_id, trace in dset.accepted:
        gold = examples_by_id[example_id].gold
        by_class[gold].append((example_id, trace))
    for label in space.labels:
        if not by_class[label]:
            raise UnbalanceableError(label)
    majority = max(len(items) for items in by_class.values())
    epoch: list[tuple[str, TeacherTrace]] = []
    for label in space.labels:
        items = by_class[label]
        epoch.extend(items)
        extra = majority - len(items)
        if extra > 0:
            epoch.extend(rng.choices(items, k=extra))
    rng.shuffle(epoch)
    return epoch


def completion_text(trace: TeacherTrace) -> str:
    if not isinstance(trace.predicted, str):
        raise InvalidInputError("cannot export a trace without a parsed label")
    return f"REASONING:\n{trace.reasoning}\n\nLABEL: {trace.predicted}"


def export_rsft(
    epoch: Sequence[tuple[str, TeacherTrace]],
    examples_by_id: dict[str, Example],
    space: LabelSpace,
    task: TaskProfile,
    path: str | Path,
) -> None:
    """Write line-delimited {prompt, completion} records.

    The prompt uses the rules-free reasoning template; the completion is
    formatted exactly as the reasoning parser expects, so every record
    round-trips.
    """
    if not epoch:
        raise InvalidInputError("refusing to export an empty epoch")
    from .templates import render

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for example_id, trace in epoch:
            example = examples_by_id[example_id]
            messages = render("reasoning_without_rules", task.reasoning_bindings(space, example.text, example.id))
            prompt = "\n\n".join(content for _, content in messages)
            record = {"prompt": prompt, "completion": completion_text(trace)}
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def write_manifest(results: Sequence[TraceResult], path: str | Path) -> None:
    """Line-delimited {example_id, difficulty, attempts_used} records."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for result in results:
            record = {
                "example_id": result.example_id,
                "difficulty": "hard" if result.hard else "easy",
                "attempts_used": result.attempts_used,
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def load_manifest(path: str | Path) -> dict[str, dict]:
    out = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                out[record["example_id"]] = record
            except (json.JSONDecodeError, KeyError) as exc:
                raise FileFormatError(f"manifest line {lineno}: {exc}") from exc
    return out


def write_audit(results: Sequence[TraceResult], path: str | Path) -> None:
    """Full attempt log, one record per teacher attempt."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for result in results:
            for trace in result.attempts:
                record = {
                    "example_id": trace.example_id,
                    "attempt_index": trace.attempt_index,
                    "reasoning": trace.reasoning,
                    "predicted": trace.predicted if isinstance(trace.predicted, str) else None,
                    "accepted": trace.accepted,
                }
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def load_audit(path: str | Path) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                out.setdefault(record["example_id"], []).append(record)
            except (json.JSONDecodeError, KeyError) as exc:
                raise FileFormatError(f"audit line {lineno}: {exc}") from exc
    return out
