"""Iterative rulebook optimization over model-generated candidates.

Each iteration classifies a fresh training batch against the active rule set,
routes every error down exactly one of two paths (false coverage: a rule fired
with the wrong label, so it gains exceptions and a revised candidate; blind
spot: everything abstained and the default label is wrong, so error patterns
are mined and new rules synthesized per missed label), grows the append-only
candidate pool, classifies the validation set against the new candidates only,
and re-selects the active subset by seeded beam search. Because the previous
active set is always injected into the beam, the validation trajectory is
non-decreasing by construction.
"""

from __future__ import annotations

import json
import logging
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .classify import RuleClassifier
from .errors import EmptyGradientError, FileFormatError, InvalidInputError
from .gateway import Gateway
from .labels import Example, LabelSpace
from .metrics import macro_f1
from .parsing import ParseFailure, parse_field_bullets, parse_rule_candidates
from .rules import (
    ORIGIN_NEW_SYNTHESIS,
    ORIGIN_REVISION,
    ActiveSet,
    FiringTable,
    Provenance,
    Rule,
    RulePool,
    sop_prompt_text,
)
from .search import beam_select
from .task import TaskProfile

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT = "rulebook-snapshot"
SNAPSHOT_VERSION = 1


@dataclass
class OptimizerConfig:
    T: int = 6
    batch_size: int = 30
    K: int = 8
    sparsity: float = 1.0
    beam_width: int = 15
    max_new_rules_per_label: int = 2
    classifier_model: str = "classifier"
    gradient_model: str = "gradient"
    update_model: str = "update"
    classifier_temperature: float = 0.0
    gradient_temperature: float = 1.0
    update_temperature: float = 1.0
    in_flight: int = 1

    def validate(self) -> "OptimizerConfig":
        if self.T < 0:
            raise InvalidInputError("T must be >= 0")
        if self.K < 1 or self.beam_width < 1:
            raise InvalidInputError("K and beam_width must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.max_new_rules_per_label < 1:
            raise InvalidInputError("max_new_rules_per_label must be >= 1")
        if self.in_flight < 1:
            raise InvalidInputError("in_flight must be >= 1")
        return self


@dataclass(frozen=True)
class ExceptionNotes:
    """Gradient output for one false-covered example of one rule."""

    rule_id: str
    bullets: tuple[str, ...]
    source_example_id: str


@dataclass(frozen=True)
class ErrorPattern:
    """Gradient output for one blind-spot example."""

    example_id: str
    gold: str
    pattern: str


@dataclass(frozen=True)
class CandidateRule:
    """A parsed candidate before it receives a pool id."""

    name: str
    body: str
    target_label: str
    provenance: Provenance


@dataclass
class OptimizerState:
    iteration: int
    pool: RulePool
    active: ActiveSet
    table: FiringTable
    trajectory: list[tuple[int, float]]
    rng_state: tuple


@dataclass
class IterationReport:
    iteration: int
    batch_ids: list[str]
    false_coverage: dict[str, int]
    blind_spots: int
    new_rule_ids: list[str]
    batch_classifier_calls: int
    val_classifier_calls: int
    objective: float


@dataclass
class RunResult:
    rules: list[Rule]
    trajectory: list[tuple[int, float]]
    state: OptimizerState
    reports: list[IterationReport] = field(default_factory=list)


class SpoOptimizer:
    """Drives the whole per-iteration loop against a gateway."""

    def __init__(self, config: OptimizerConfig, gateway: Gateway, space: LabelSpace, task: TaskProfile):
        self.config = config.validate()
        self.gateway = gateway
        self.space = space
        self.task = task
        self.classifier = RuleClassifier(
            gateway,
            space,
            task,
            model=config.classifier_model,
            temperature=config.classifier_temperature,
            in_flight=config.in_flight,
        )

    # -- individual model calls ---------------------------------------------

    def classify_rule(self, example: Example, rule: Rule, table: FiringTable) -> bool:
        return self.classifier.classify(example, rule, table)

    def gradient_exceptions(self, example: Example, rule: Rule, table: FiringTable) -> ExceptionNotes:
        """Ask for exception bullets on a false-covered example."""
        if not table.fired(example.id, rule.rule_id):
            raise InvalidInputError(
                f"rule {rule.rule_id} abstained on {example.id}; not a false coverage"
            )
        if rule.target_label == example.gold:
            raise InvalidInputError(
                f"rule {rule.rule_id} agrees with the gold label on {example.id}"
            )
        bindings = {
            "CLASSIFICATION_TASK": self.task.classification_task,
            "RULE": rule.prompt_text(),
            "REPORT": example.text,
            "PREDICTION": self.space.display(rule.target_label),
            "LABEL": self.space.display(example.gold),
            "example_id": example.id,
            "rule_id": rule.rule_id,
        }
        response = self.gateway.call(
            "gradient_exceptions",
            bindings,
            model=self.config.gradient_model,
            temperature=self.config.gradient_temperature,
        )
        _, bullets = parse_field_bullets(response.content, "analysis", "exceptions")
        if not bullets:
            raise EmptyGradientError(f"no exception bullets for example {example.id}")
        return ExceptionNotes(rule_id=rule.rule_id, bullets=tuple(bullets), source_example_id=example.id)

    def gradient_error_pattern(self, example: Example, gold_rules: Sequence[Rule]) -> ErrorPattern:
        """Ask for the error pattern behind a blind-spot example."""
        bindings = {
            "CLASSIFICATION_TASK": self.task.classification_task,
            "REPORT": example.text,
            "MATCHING_RULES": sop_prompt_text(gold_rules),
            "PREDICTION": self.space.display(self.space.default_label),
            "LABEL": self.space.display(example.gold),
            "example_id": example.id,
        }
        response = self.gateway.call(
            "gradient_error_pattern",
            bindings,
            model=self.config.gradient_model,
            temperature=self.config.gradient_temperature,
        )
        summary, points = parse_field_bullets(response.content, "summary", "points")
        if not summary and not points:
            raise EmptyGradientError(f"empty error pattern for example {example.id}")
        pattern = summary
        if points:
            pattern = (pattern + "\n" if pattern else "") + "\n".join(f"- {p}" for p in points)
        return ErrorPattern(example_id=example.id, gold=example.gold, pattern=pattern)

    def update_rule(self, rule: Rule, notes: Sequence[ExceptionNotes]) -> Optional[CandidateRule]:
        """Revise one rule from its accumulated exception notes.

        The revision keeps the target label and never replaces the original
        in the pool; a response that fails to parse is dropped.
        """
        if not notes:
            raise InvalidInputError("update_rule needs at least one exception note")
        if any(n.rule_id != rule.rule_id for n in notes):
            raise InvalidInputError("exception notes reference a different rule")
        bullets = [b for n in notes for b in n.bullets]
        bindings = {
            "RULE": rule.prompt_text(),
            "EXCEPTIONS": "\n".join(f"- {b}" for b in bullets),
            "RULE_LABEL": self.space.display(rule.target_label),
            "rule_id": rule.rule_id,
        }
        response = self.gateway.call(
            "rule_update",
            bindings,
            model=self.config.update_model,
            temperature=self.config.update_temperature,
        )
        drafts = parse_rule_candidates(response.content)
        if isinstance(drafts, ParseFailure):
            self.gateway.note_parse_failure()
            logger.warning("rule update for %s failed to parse; candidate dropped", rule.rule_id)
            return None
        draft = drafts[0]
        return CandidateRule(
            name=draft.name,
            body=draft.body,
            target_label=rule.target_label,
            provenance=Provenance(ORIGIN_REVISION, parent_rule_id=rule.rule_id),
        )

    def synthesize_rules(
        self,
        patterns: Sequence[ErrorPattern],
        existing_rules: Sequence[Rule],
        max_new: int,
        label: str,
    ) -> list[CandidateRule]:
        """Synthesize up to max_new rules for one missed label."""
        if not patterns:
            raise InvalidInputError("synthesize_rules needs at least one error pattern")
        if any(p.gold != label for p in patterns):
            raise InvalidInputError("error patterns carry mixed gold labels")
        if label == self.space.default_label:
            raise InvalidInputError("cannot synthesize rules for the default label")
        bindings = {
            "CLASSIFICATION_TASK": self.task.classification_task,
            "TARGET_LABEL": self.space.display(label),
            "MAX_NEW_RULES": str(max_new),
            "RULES": sop_prompt_text(existing_rules),
            "ERROR_PATTERNS": "\n\n".join(p.pattern for p in patterns),
        }
        response = self.gateway.call(
            "rule_synthesis",
            bindings,
            model=self.config.update_model,
            temperature=self.config.update_temperature,
        )
        drafts = parse_rule_candidates(response.content)
        if isinstance(drafts, ParseFailure):
            logger.info("no parseable rule blocks for label %s", label)
            return []
        # overflow keeps document order
        return [
            CandidateRule(
                name=d.name,
                body=d.body,
                target_label=label,
                provenance=Provenance(ORIGIN_NEW_SYNTHESIS),
            )
            for d in drafts[:max_new]
        ]

    # -- the iteration -------------------------------------------------------

    def initial_state(self, val: Sequence[Example], seed: int = 0) -> OptimizerState:
        preds = [self.space.default_label] * len(val)
        score = macro_f1(preds, [ex.gold for ex in val], self.space)
        return OptimizerState(
            iteration=0,
            pool=RulePool(),
            active=ActiveSet(rule_ids=(), score=score, iteration=0),
            table=FiringTable(),
            trajectory=[(0, score)],
            rng_state=random.Random(seed).getstate(),
        )

    def run_iteration(
        self,
        state: OptimizerState,
        batch: Sequence[Example],
        val: Sequence[Example],
        next_rng_state: Optional[tuple] = None,
    ) -> tuple[OptimizerState, IterationReport]:
        """Execute one full iteration, atomically.

        Works on copies of the pool and firing table; any backend error
        propagates before the new state exists, leaving the input state
        untouched.
        """
        t = state.iteration + 1
        pool = state.pool.copy()
        table = state.table.copy()
        active_rules = [pool.get(rid) for rid in state.active.rule_ids]

        calls_before = self.gateway.stats.calls_by_template.get("rule_classifier", 0)
        self.classifier.fill(batch, active_rules, table)
        batch_calls = self.gateway.stats.calls_by_template.get("rule_classifier", 0) - calls_before

        false_coverage: dict[str, list[Example]] = {r.rule_id: [] for r in active_rules}
        blind: list[Example] = []
        for ex in batch:
            fired_any = False
            for rule in active_rules:
                if table.fired(ex.id, rule.rule_id):
                    fired_any = True
                    if rule.target_label != ex.gold:
                        false_coverage[rule.rule_id].append(ex)
            if not fired_any and ex.gold != self.space.default_label:
                blind.append(ex)

        candidates: list[CandidateRule] = []
        for rule in active_rules:
            offenders = false_coverage[rule.rule_id]
            if not offenders:
                continue
            notes = []
            for ex in offenders:
                try:
                    notes.append(self.gradient_exceptions(ex, rule, table))
                except EmptyGradientError as exc:
                    logger.warning("skipping sample: %s", exc)
            if not notes:
                continue
            candidate = self.update_rule(rule, notes)
            if candidate is not None:
                candidates.append(candidate)

        patterns_by_label: dict[str, list[ErrorPattern]] = {}
        for ex in blind:
            gold_rules = [r for r in active_rules if r.target_label == ex.gold]
            try:
                pattern = self.gradient_error_pattern(ex, gold_rules)
            except EmptyGradientError as exc:
                logger.warning("skipping sample: %s", exc)
                continue
            patterns_by_label.setdefault(ex.gold, []).append(pattern)
        for label in self.space.labels:
            patterns = patterns_by_label.get(label)
            if not patterns:
                continue
            candidates.extend(
                self.synthesize_rules(patterns, active_rules, self.config.max_new_rules_per_label, label)
            )

        # a candidate whose (label, body) already exists adds nothing to the
        # search space and would double-classify identical text on val
        seen_contents = {(r.target_label, r.body) for r in pool}
        new_rules: list[Rule] = []
        for cand in candidates:
            content = (cand.target_label, cand.body)
            if content in seen_contents:
                logger.info("candidate %r duplicates an existing rule body; skipped", cand.name)
                continue
            seen_contents.add(content)
            rule = Rule(
                rule_id=pool.next_rule_id(),
                name=cand.name,
                target_label=cand.target_label,
                body=cand.body,
                provenance=Provenance(
                    cand.provenance.origin, iteration=t, parent_rule_id=cand.provenance.parent_rule_id
                ),
            ).validate_against(self.space)
            pool.add(rule, iteration=t)
            new_rules.append(rule)

        calls_before = self.gateway.stats.calls_by_template.get("rule_classifier", 0)
        self.classifier.fill(val, new_rules, table)
        val_calls = self.gateway.stats.calls_by_template.get("rule_classifier", 0) - calls_before

        selected = beam_select(
            pool,
            table,
            val,
            K=self.config.K,
            sparsity=self.config.sparsity,
            beam_width=self.config.beam_width,
            space=self.space,
            seed=state.active.rule_ids,
        )
        active = ActiveSet(rule_ids=selected.rule_ids, score=selected.score, iteration=t)
        new_state = OptimizerState(
            iteration=t,
            pool=pool,
            active=active,
            table=table,
            trajectory=state.trajectory + [(t, active.score)],
            rng_state=next_rng_state if next_rng_state is not None else state.rng_state,
        )
        report = IterationReport(
            iteration=t,
            batch_ids=[ex.id for ex in batch],
            false_coverage={rid: len(exs) for rid, exs in false_coverage.items() if exs},
            blind_spots=len(blind),
            new_rule_ids=[r.rule_id for r in new_rules],
            batch_classifier_calls=batch_calls,
            val_classifier_calls=val_calls,
            objective=active.score,
        )
        return new_state, report

    def run(
        self,
        train: Sequence[Example],
        val: Sequence[Example],
        seed: int = 0,
        snapshot_path: Optional[str | Path] = None,
        resume_state: Optional[OptimizerState] = None,
    ) -> RunResult:
        """Run T iterations with a fresh uniform batch draw per iteration.

        The state snapshot (when a path is given) is written after every
        completed iteration, so an aborted run resumes from the last one.
        """
        state = resume_state if resume_state is not None else self.initial_state(val, seed)
        reports: list[IterationReport] = []
        while state.iteration < self.config.T:
            rng = random.Random()
            rng.setstate(state.rng_state)
            k = min(self.config.batch_size, len(train))
            batch = rng.sample(list(train), k)
            state, report = self.run_iteration(state, batch, val, next_rng_state=rng.getstate())
            reports.append(report)
            if snapshot_path is not None:
                save_snapshot(state, snapshot_path)
        rules = [state.pool.get(rid) for rid in state.active.rule_ids]
        return RunResult(rules=rules, trajectory=list(state.trajectory), state=state, reports=reports)


# ---------------------------------------------------------------------------
# Snapshot serialization


def _provenance_payload(prov: Optional[Provenance]) -> Optional[dict]:
    if prov is None:
        return None
    return {"origin": prov.origin, "iteration": prov.iteration, "parent_rule_id": prov.parent_rule_id}


def state_to_payload(state: OptimizerState) -> dict:
    pool_payload = []
    for rule in state.pool:
        pool_payload.append(
            {
                "rule_id": rule.rule_id,
                "name": rule.name,
                "target_label": rule.target_label,
                "body": rule.body,
                "provenance": _provenance_payload(rule.provenance),
                "created_at": state.pool.created_at(rule.rule_id),
            }
        )
    rng_state = [state.rng_state[0], list(state.rng_state[1]), state.rng_state[2]]
    return {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "iteration": state.iteration,
        "pool": pool_payload,
        "active": {
            "rule_ids": list(state.active.rule_ids),
            "score": state.active.score,
            "iteration": state.active.iteration,
        },
        "table": [[ex, rid, fired] for ex, rid, fired in sorted(state.table.items())],
        "trajectory": [[t, score] for t, score in state.trajectory],
        "rng_state": rng_state,
    }


def state_from_payload(payload: dict) -> OptimizerState:
    if payload.get("format") != SNAPSHOT_FORMAT or payload.get("version") != SNAPSHOT_VERSION:
        raise FileFormatError("not a recognized optimizer snapshot")
    pool = RulePool()
    for item in payload["pool"]:
        prov = item.get("provenance")
        rule = Rule(
            rule_id=item["rule_id"],
            name=item["name"],
            target_label=item["target_label"],
            body=item["body"],
            provenance=Provenance(**prov) if prov else None,
        )
        pool.add(rule, iteration=item.get("created_at", 0))
    table = FiringTable()
    for ex, rid, fired in payload["table"]:
        table.put(ex, rid, fired)
    active = ActiveSet(
        rule_ids=tuple(payload["active"]["rule_ids"]),
        score=payload["active"]["score"],
        iteration=payload["active"]["iteration"],
    )
    raw_rng = payload["rng_state"]
    rng_state = (raw_rng[0], tuple(raw_rng[1]), raw_rng[2])
    return OptimizerState(
        iteration=payload["iteration"],
        pool=pool,
        active=active,
        table=table,
        trajectory=[(t, score) for t, score in payload["trajectory"]],
        rng_state=rng_state,
    )


def save_snapshot(state: OptimizerState, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(state_to_payload(state), indent=2, ensure_ascii=False), encoding="utf-8")
    os.replace(tmp, path)


def load_snapshot(path: str | Path) -> OptimizerState:
    return state_from_payload(json.loads(Path(path).read_text(encoding="utf-8")))
