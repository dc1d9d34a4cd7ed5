"""Per-dataset prompt wording: the placeholder values shared across templates."""

from __future__ import annotations

from dataclasses import dataclass

from .labels import LabelSpace
from .templates import MULTICLASS_NOTE


@dataclass(frozen=True)
class TaskProfile:
    """Dataset-specific phrases substituted into the generic templates."""

    task_framing: str
    input_tag: str
    input_noun: str
    classification_task: str
    task_description: str
    abstain_token: str = "ABSTAIN"
    evidence_phrase: str = "the evidence excerpt"
    input_phrase: str = "the input"

    def multiclass_note(self, space: LabelSpace, rule_label: str) -> str:
        """Extra classifier output-spec sentence for tasks with C > 2.

        Pre-formatted here because placeholder substitution is single-pass:
        braces inside binding values are never re-substituted.
        """
        if space.size <= 2:
            return ""
        return MULTICLASS_NOTE.replace("{RULE_LABEL}", rule_label).replace(
            "{ABSTAIN}", self.abstain_token
        )

    def reasoning_bindings(self, space: LabelSpace, text: str, example_id: str = "") -> dict[str, str]:
        return {
            "task_framing": self.task_framing,
            "input_tag": self.input_tag,
            "input_noun": self.input_noun,
            "labels": space.labels_display,
            "text": text,
            "example_id": example_id,
        }
