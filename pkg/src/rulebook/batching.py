"""Class-balanced dynamic batch construction for group-relative RL training.

Rewards are binary correctness (+1/-1, parse failures count as wrong), and
advantages are normalized within each group of G rollouts. Batches are built
per class: oversample kappa times the class quota, run rollouts, keep the
first quota-many groups whose rewards actually vary (zero-variance groups
carry no gradient signal), and top up from the same class when too few
survive. The gradient step itself belongs to an external trainer; this module
exports the finished batches.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from random import Random
from typing import Callable, Optional, Protocol, Sequence, Union

from .errors import FileFormatError, InvalidInputError, UnbatchableError, UnscoreableError
from .gateway import Gateway
from .labels import Example, LabelSpace
from .parsing import ParseFailure, answer_position_probs, judge_expected_score, parse_reasoning_label
from .task import TaskProfile

logger = logging.getLogger(__name__)


@dataclass
class BatcherConfig:
    B: int = 16
    G: int = 8
    kappa: int = 6
    epsilon: float = 1e-6
    lambda_aux: float = 0.0
    steps: int = 1
    rollout_model: str = "student"
    temperature: float = 1.0
    judge_model: str = "judge"
    judge_top_logprobs: int = 20
    # provider selection: a live serving endpoint or the synthetic test
    # provider with per-difficulty correctness probabilities
    provider: str = "gateway"
    p_easy: float = 0.85
    p_hard: float = 0.15
    p_default: float = 0.5

    def validate(self, space: Optional[LabelSpace] = None) -> "BatcherConfig":
        if self.G < 2:
            raise InvalidInputError("G must be >= 2")
        if self.kappa < 1:
            raise InvalidInputError("kappa must be >= 1")
        if self.epsilon <= 0:
            raise InvalidInputError("epsilon must be > 0")
        if self.lambda_aux < 0:
            raise InvalidInputError("lambda_aux must be >= 0")
        if self.provider not in ("gateway", "synthetic"):
            raise InvalidInputError(f"unknown provider {self.provider!r}")
        for name in ("p_easy", "p_hard", "p_default"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise InvalidInputError(f"{name} must be in [0, 1]")
        if space is not None and self.B < space.size:
            raise InvalidInputError("B must be >= the number of classes")
        return self


def difficulty_probability(config: BatcherConfig, example: Example) -> float:
    if example.difficulty == "easy":
        return config.p_easy
    if example.difficulty == "hard":
        return config.p_hard
    return config.p_default


def correctness_reward(parsed: Union[str, ParseFailure], gold: str) -> int:
    """Binary reward: +1 iff the parsed label equals gold, else -1."""
    if isinstance(parsed, ParseFailure):
        return -1
    return 1 if parsed == gold else -1


def group_advantages(rewards: Sequence[float], epsilon: float = 1e-6) -> list[float]:
    """Within-group normalized advantages: (R_i - mean) / (std + epsilon).

    The standard deviation is the population one over the fixed group; when
    every reward is equal the numerator vanishes and all advantages are zero.
    """
    g = len(rewards)
    if g < 2:
        raise InvalidInputError("a rollout group needs at least 2 rollouts")
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be > 0")
    mean = sum(rewards) / g
    std = math.sqrt(sum((r - mean) ** 2 for r in rewards) / g)
    return [(r - mean) / (std + epsilon) for r in rewards]


def combined_advantages(
    rewards: Sequence[float],
    aux_scores: Optional[Sequence[Optional[float]]] = None,
    lambda_aux: float = 0.0,
    epsilon: float = 1e-6,
) -> list[float]:
    """Correctness and auxiliary streams z-scored separately, then summed.

    Auxiliary statistics are computed over scored rollouts only; rollouts
    without an aux score contribute zero and do not perturb the others.
    """
    if lambda_aux < 0:
        raise InvalidInputError("lambda_aux must be >= 0")
    adv = group_advantages(rewards, epsilon)
    if aux_scores is None or lambda_aux == 0.0:
        return adv
    if len(aux_scores) != len(rewards):
        raise InvalidInputError("aux_scores length must match rewards")
    scored = [s for s in aux_scores if s is not None]
    if len(scored) >= 1:
        mean = sum(scored) / len(scored)
        std = math.sqrt(sum((s - mean) ** 2 for s in scored) / len(scored))
        for i, s in enumerate(aux_scores):
            if s is not None:
                adv[i] += lambda_aux * ((s - mean) / (std + epsilon))
    return adv


@dataclass(frozen=True)
class ClassQuota:
    counts: dict[str, int]
    step: int

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def class_quotas(B: int, space: LabelSpace, step: int) -> ClassQuota:
    """Per-class quotas: floor(B/C) each, remainder rotating with the step.

    The r = B mod C extra slots go to the classes at positions (step + i)
    mod C in label order, so over any C consecutive steps every class
    receives the extra slot equally often.
    """
    c = space.size
    if B < c:
        raise InvalidInputError(f"B={B} is smaller than the number of classes {c}")
    base = B // c
    r = B % c
    counts = {lab: base for lab in space.labels}
    for i in range(r):
        counts[space.labels[(step + i) % c]] += 1
    return ClassQuota(counts=counts, step=step)


class RolloutProvider(Protocol):
    def sample(self, example: Example, G: int, seed_tags: Sequence[str]) -> list[str]: ...


class GatewayRolloutProvider:
    """Samples G generations per example from a serving endpoint."""

    def __init__(
        self,
        gateway: Gateway,
        space: LabelSpace,
        task: TaskProfile,
        model: str,
        temperature: float = 1.0,
    ):
        self.gateway = gateway
        self.space = space
        self.task = task
        self.model = model
        self.temperature = temperature

    def sample(self, example: Example, G: int, seed_tags: Sequence[str]) -> list[str]:
        bindings = self.task.reasoning_bindings(self.space, example.text, example.id)
        return [
            self.gateway.call(
                "reasoning_without_rules",
                bindings,
                model=self.model,
                temperature=self.temperature,
                seed_tag=tag,
            ).content
            for tag in seed_tags[:G]
        ]


class SyntheticRolloutProvider:
    """Deterministic test provider with a per-example correctness probability.

    Each (example, seed_tag) pair derives its own RNG from the provider seed,
    so outcomes are independent of call order and identical across runs.
    """

    def __init__(
        self,
        space: LabelSpace,
        p_of: Union[float, dict[str, float], Callable[[Example], float]],
        seed: int = 0,
    ):
        self.space = space
        self.p_of = p_of
        self.seed = seed

    def _probability(self, example: Example) -> float:
        if callable(self.p_of):
            return self.p_of(example)
        if isinstance(self.p_of, dict):
            return self.p_of[example.id]
        return float(self.p_of)

    def sample(self, example: Example, G: int, seed_tags: Sequence[str]) -> list[str]:
        p = self._probability(example)
        texts = []
        for tag in seed_tags[:G]:
            digest = hashlib.sha256(f"{self.seed}|{example.id}|{tag}".encode("utf-8")).digest()
            rng = Random(int.from_bytes(digest[:8], "big"))
            if rng.random() < p:
                label = example.gold
            else:
                others = [lab for lab in self.space.labels if lab != example.gold]
                label = rng.choice(others)
            texts.append(f"REASONING:\nsynthetic rollout {tag}.\n\nLABEL: {label}")
        return texts


@dataclass
class Rollout:
    text: str
    parsed: Union[str, ParseFailure]
    reward: int
    aux_score: Optional[float] = None
    advantage: Optional[float] = None


@dataclass
class RolloutGroup:
    example_id: str
    gold: str
    rollouts: list[Rollout]
    informative: bool
    topped_up: bool = False


@dataclass
class TrainingBatch:
    step: int
    groups: list[RolloutGroup]
    quota: ClassQuota
    filtered_count: int
    topped_up_count: int


AuxScorer = Callable[[Example, Rollout], Optional[float]]


class JudgeAuxScorer:
    """Faithfulness judge producing the 1..5 expected-value auxiliary score.

    Rollouts with empty reasoning, or answers without a score token in the
    top-k, get no score and pass through with zero auxiliary advantage.
    """

    def __init__(self, config: BatcherConfig, gateway: Gateway, space: LabelSpace, task: TaskProfile):
        self.config = config
        self.gateway = gateway
        self.space = space
        self.task = task

    def __call__(self, example: Example, rollout: Rollout) -> Optional[float]:
        if isinstance(rollout.parsed, ParseFailure):
            reasoning = ""
        else:
            parsed = parse_reasoning_label(rollout.text, self.space)
            reasoning = "" if isinstance(parsed, ParseFailure) else parsed.reasoning
        if not reasoning.strip() or not example.text.strip():
            return None
        bindings = {
            "input": self.task.input_phrase,
            "task_description": self.task.task_description,
            "source": example.text,
            "reasoning": reasoning,
            "example_id": example.id,
        }
        response = self.gateway.call(
            "judge_faithfulness",
            bindings,
            model=self.config.judge_model,
            temperature=0.0,
            want_top_logprobs=self.config.judge_top_logprobs,
        )
        probs = answer_position_probs(response.top_logprobs)
        if probs is None:
            logger.warning("judge response for %s carries no score token", example.id)
            return None
        try:
            return judge_expected_score(probs)
        except UnscoreableError:
            logger.warning("judge response for %s is unscoreable", example.id)
            return None


def make_group(
    example: Example,
    provider: RolloutProvider,
    G: int,
    seed_tags: Sequence[str],
    space: LabelSpace,
) -> RolloutGroup:
    """Run G rollouts for one example and flag whether rewards vary."""
    texts = provider.sample(example, G, seed_tags)
    if len(texts) != G:
        raise InvalidInputError(f"provider returned {len(texts)} rollouts, expected {G}")
    rollouts = []
    for text in texts:
        parsed = parse_reasoning_label(text, space)
        label = parsed if isinstance(parsed, ParseFailure) else parsed.label
        rollouts.append(Rollout(text=text, parsed=label, reward=correctness_reward(label, example.gold)))
    rewards = {r.reward for r in rollouts}
    return RolloutGroup(
        example_id=example.id,
        gold=example.gold,
        rollouts=rollouts,
        informative=len(rewards) > 1,
    )


def build_batch(
    class_pools: dict[str, list[Example]],
    provider: RolloutProvider,
    B: int,
    G: int,
    kappa: int,
    step: int,
    rng: Random,
    space: LabelSpace,
    epsilon: float = 1e-6,
    lambda_aux: float = 0.0,
    aux_scorer: Optional[AuxScorer] = None,
) -> TrainingBatch:
    """Oversample, filter zero-variance groups, top up, fill advantages.

    Per class: draw kappa * quota candidates uniformly without replacement
    (bounded by the pool), keep the first quota-many informative groups in
    draw order, then fill any shortfall with fresh same-class draws whose
    groups are included regardless of informativeness.
    """
    if G < 2:
        raise InvalidInputError("G must be >= 2")
    if kappa < 1:
        raise InvalidInputError("kappa must be >= 1")
    quota = class_quotas(B, space, step)
    groups: list[RolloutGroup] = []
    filtered_count = 0
    topped_up_count = 0
    slot = 0

    def tags(slot_index: int) -> list[str]:
        return [f"s{step}.c{slot_index}.g{g}" for g in range(1, G + 1)]

    for label in space.labels:
        pool = class_pools.get(label) or []
        if not pool:
            raise UnbatchableError(label)
        n_c = quota.counts[label]
        draw = rng.sample(pool, min(kappa * n_c, len(pool)))
        survivors: list[RolloutGroup] = []
        for example in draw:
            if len(survivors) >= n_c:
                break
            group = make_group(example, provider, G, tags(slot), space)
            slot += 1
            if group.informative:
                survivors.append(group)
            else:
                filtered_count += 1
        if len(survivors) < n_c:
            drawn_ids = {ex.id for ex in draw}
            remaining = [ex for ex in pool if ex.id not in drawn_ids]
            rng.shuffle(remaining)
            while len(survivors) < n_c:
                example = remaining.pop(0) if remaining else rng.choice(pool)
                group = make_group(example, provider, G, tags(slot), space)
                slot += 1
                group.topped_up = True
                survivors.append(group)
                topped_up_count += 1
        groups.extend(survivors)

    for group in groups:
        aux = None
        if aux_scorer is not None and lambda_aux > 0:
            example = _find_example(class_pools[group.gold], group.example_id)
            aux = [aux_scorer(example, rollout) for rollout in group.rollouts]
            for rollout, score in zip(group.rollouts, aux):
                rollout.aux_score = score
        advantages = combined_advantages(
            [r.reward for r in group.rollouts], aux, lambda_aux=lambda_aux, epsilon=epsilon
        )
        for rollout, adv in zip(group.rollouts, advantages):
            rollout.advantage = adv

    return TrainingBatch(
        step=step,
        groups=groups,
        quota=quota,
        filtered_count=filtered_count,
        topped_up_count=topped_up_count,
    )


def _find_example(pool: Sequence[Example], example_id: str) -> Example:
    for ex in pool:
        if ex.id == example_id:
            return ex
    raise InvalidInputError(f"example {example_id!r} not in its class pool")


def export_batch(
    batch: TrainingBatch,
    examples_by_id: dict[str, Example],
    space: LabelSpace,
    task: TaskProfile,
    path: str | Path,
) -> None:
    """Write one line-delimited group record per batch slot.

    Prompts use the rules-free reasoning template; rewards and advantages
    round-trip bit-exactly through JSON.
    """
    from .templates import render

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for group in batch.groups:
            example = examples_by_id[group.example_id]
            messages = render("reasoning_without_rules", task.reasoning_bindings(space, example.text, example.id))
            record = {
                "example_id": group.example_id,
                "gold": group.gold,
                "prompt": "\n\n".join(content for _, content in messages),
                "rollouts": [
                    {"text": r.text, "reward": r.reward, "advantage": r.advantage}
                    for r in group.rollouts
                ],
                "topped_up": group.topped_up,
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def load_batch(path: str | Path) -> list[dict]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                record["rollouts"][0]["reward"]
            except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
                raise FileFormatError(f"batch line {lineno}: {exc}") from exc
            records.append(record)
    return records
