import pytest

from rulebook.gateway import Gateway
from rulebook.labels import Example, LabelSpace
from rulebook.mock import MockBackend, MockScript
from rulebook.rules import Provenance, Rule
from rulebook.task import TaskProfile


@pytest.fixture
def binary_space():
    return LabelSpace(labels=("0", "1"), aliases={"0": 0, "1": 1})


@pytest.fixture
def nli_space():
    return LabelSpace(
        labels=("not_mentioned", "entailment", "contradiction"),
        aliases={"not_mentioned": 0, "entailment": 1, "contradiction": 2},
    )


@pytest.fixture
def task_profile():
    return TaskProfile(
        task_framing="You review short reports and decide the label.",
        input_tag="<REPORT_TEXT>",
        input_noun="report",
        classification_task="report triage",
        task_description="decides the report's label",
    )


def make_rule(rule_id, target="1", body=None, name=None, origin="new_synthesis", iteration=0):
    return Rule(
        rule_id=rule_id,
        name=name or f"rule {rule_id}",
        target_label=target,
        body=body or f"Trigger Pattern: placeholder for {rule_id}.\nExceptions:\nExamples",
        provenance=Provenance(origin, iteration=iteration),
    )


def make_examples(golds, split="val", prefix="e"):
    return [
        Example(id=f"{prefix}{i}", text=f"text {prefix}{i}", gold=g, split=split)
        for i, g in enumerate(golds)
    ]


def mock_gateway(script: MockScript, **kwargs) -> Gateway:
    return Gateway(MockBackend(script), backoff=0.0, **kwargs)
