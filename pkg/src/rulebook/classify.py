"""Per-rule firing classification against the gateway, cached in a FiringTable."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

from .gateway import Gateway
from .labels import Example, LabelSpace
from .parsing import FIRED, ParseFailure, parse_firing
from .rules import FiringTable, Rule
from .task import TaskProfile

logger = logging.getLogger(__name__)


class RuleClassifier:
    """Evaluates single rules on single examples, one model call per pair.

    Verdicts are written to the firing table and never re-queried. A response
    that fails to parse maps to abstain: a rule whose verdict cannot be read
    must not fire.
    """

    def __init__(
        self,
        gateway: Gateway,
        space: LabelSpace,
        task: TaskProfile,
        model: str,
        temperature: float = 0.0,
        in_flight: int = 1,
    ):
        self.gateway = gateway
        self.space = space
        self.task = task
        self.model = model
        self.temperature = temperature
        self.in_flight = max(1, in_flight)

    def classify(self, example: Example, rule: Rule, table: FiringTable) -> bool:
        if table.has(example.id, rule.rule_id):
            return table.fired(example.id, rule.rule_id)
        rule_label = self.space.display(rule.target_label)
        bindings = {
            "task_framing": self.task.task_framing,
            "rule_text": rule.prompt_text(),
            "report": example.text,
            "RULE_LABEL": rule_label,
            "ABSTAIN": self.task.abstain_token,
            "multiclass_note": self.task.multiclass_note(self.space, rule_label),
            "example_id": example.id,
            "rule_id": rule.rule_id,
        }
        response = self.gateway.call(
            "rule_classifier",
            bindings,
            model=self.model,
            temperature=self.temperature,
        )
        verdict = parse_firing(response.content, rule.target_label, self.task.abstain_token, self.space)
        if isinstance(verdict, ParseFailure):
            self.gateway.note_parse_failure()
            logger.warning(
                "classifier parse failure for example=%s rule=%s (%s); recording abstain",
                example.id, rule.rule_id, verdict.reason,
            )
            fired = False
        else:
            fired = verdict == FIRED
        table.put(example.id, rule.rule_id, fired)
        return fired

    def fill(self, examples: Sequence[Example], rules: Sequence[Rule], table: FiringTable) -> int:
        """Classify every missing (example, rule) pair; returns the pair count."""
        pairs = [
            (ex, rule)
            for ex in examples
            for rule in rules
            if not table.has(ex.id, rule.rule_id)
        ]
        if not pairs:
            return 0
        if self.in_flight > 1:
            with ThreadPoolExecutor(max_workers=self.in_flight) as pool:
                list(pool.map(lambda pair: self.classify(pair[0], pair[1], table), pairs))
        else:
            for ex, rule in pairs:
                self.classify(ex, rule, table)
        return len(pairs)
