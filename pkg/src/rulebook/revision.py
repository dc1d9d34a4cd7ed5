"""Rulebook revision: mining candidate rules from RL successes on hard inputs.

Five model-driven stages: collect correct rollouts on hard examples and pair
them with the teacher's failed traces on the same inputs; discover a taxonomy
of reasoning strategies over several independent rounds plus a merge pass;
assign each pair to a strategy cluster; synthesize at most one candidate rule
per (cluster, target label) behind a SKIP gate; and deduplicate near-identical
candidates with a pairwise equivalence judge. Selected additions are chosen on
the hard validation slice with the same beam-search machinery, composed on top
of the existing rulebook, which is fixed and never searched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from random import Random
from typing import Optional, Sequence

from .errors import EmptyTaxonomyError, InvalidInputError
from .gateway import Gateway
from .labels import Example, LabelSpace
from .parsing import (
    ParseFailure,
    parse_cluster_id,
    parse_equivalence_verdict,
    parse_reasoning_label,
    parse_rule_candidates,
    parse_strategies,
)
from .rules import ORIGIN_RL_MINED, ActiveSet, FiringTable, Provenance, Rule, sop_prompt_text
from .search import beam_select
from .task import TaskProfile
from .templates import rounds_block

logger = logging.getLogger(__name__)

OTHER = "OTHER"
SKIP = "SKIP"


@dataclass
class ReviseConfig:
    rounds: int = 3
    pos_cap: int = 4
    neg_cap: int = 4
    target_labels: tuple[str, ...] = ()
    K_add: int = 2
    sparsity: float = 1.0
    beam_width: int = 15
    taxonomy_model: str = "revise"
    judge_model: str = "revise"
    synthesis_model: str = "revise"
    temperature: float = 0.7
    seed: int = 0

    def validate(self) -> "ReviseConfig":
        if self.rounds < 1:
            raise InvalidInputError("rounds must be >= 1")
        if self.K_add < 1:
            raise InvalidInputError("K_add must be >= 1")
        if self.pos_cap < 1 or self.neg_cap < 0:
            raise InvalidInputError("pair caps must allow at least one positive")
        return self


@dataclass(frozen=True)
class Strategy:
    id: str
    label: str
    analysis: str


@dataclass(frozen=True)
class StrategyTaxonomy:
    strategies: tuple[Strategy, ...]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.strategies]

    def prompt_text(self) -> str:
        return "\n".join(f"{s.id}. {s.label}: {s.analysis}" for s in self.strategies)


@dataclass
class PairedTrace:
    example_id: str
    gold: str
    teacher_incorrect: str
    rl_correct: str
    cluster_id: Optional[str] = None


@dataclass(frozen=True)
class HardSplit:
    val_hard: frozenset[str]
    test_hard: frozenset[str]


@dataclass
class RevisionResult:
    taxonomy: StrategyTaxonomy
    candidates: list[Rule]
    additions: list[Rule]
    score: float
    base_score: float


def collect_hard_successes(
    rollout_records: Sequence[dict],
    hard_ids: set[str],
    teacher_failures: dict[str, str],
    space: LabelSpace,
) -> list[PairedTrace]:
    """Pair each hard example's first correct rollout with a teacher failure.

    ``rollout_records`` is the batch export format; the earliest correct
    rollout in log order wins. Hard examples without a recorded teacher
    failure are skipped with a log line.
    """
    pairs: dict[str, PairedTrace] = {}
    for record in rollout_records:
        example_id = record["example_id"]
        if example_id not in hard_ids or example_id in pairs:
            continue
        for rollout in record["rollouts"]:
            if rollout["reward"] != 1:
                continue
            parsed = parse_reasoning_label(rollout["text"], space)
            reasoning = rollout["text"] if isinstance(parsed, ParseFailure) else parsed.reasoning
            if example_id not in teacher_failures:
                logger.warning("hard example %s has no teacher failure trace; pair skipped", example_id)
                break
            pairs[example_id] = PairedTrace(
                example_id=example_id,
                gold=record["gold"],
                teacher_incorrect=teacher_failures[example_id],
                rl_correct=reasoning,
            )
            break
    return list(pairs.values())


class RevisionPipeline:
    def __init__(self, config: ReviseConfig, gateway: Gateway, space: LabelSpace, task: TaskProfile):
        self.config = config.validate()
        self.gateway = gateway
        self.space = space
        self.task = task

    # -- stage 2: taxonomy ----------------------------------------------------

    def discover_taxonomy(self, traces: Sequence[PairedTrace], rounds: Optional[int] = None) -> StrategyTaxonomy:
        if not traces:
            raise InvalidInputError("taxonomy discovery needs at least one trace")
        rounds = rounds if rounds is not None else self.config.rounds
        entries = "\n\n".join(
            f"[{i}] (gold={self.space.display(t.gold)})\n{t.rl_correct}" for i, t in enumerate(traces, start=1)
        )
        round_outputs = []
        for r in range(1, rounds + 1):
            response = self.gateway.call(
                "taxonomy_discovery",
                {
                    "TASK_DESCRIPTION": self.task.task_description,
                    "NUM_SAMPLES": str(len(traces)),
                    "ROLLOUT_ENTRIES": entries,
                },
                model=self.config.taxonomy_model,
                temperature=self.config.temperature,
                seed_tag=f"round-{r}",
            )
            round_outputs.append(response.content)
        merged = self.gateway.call(
            "taxonomy_merge",
            {"ROUNDS_BLOCK": rounds_block(round_outputs)},
            model=self.config.taxonomy_model,
            temperature=self.config.temperature,
        )
        blocks = parse_strategies(merged.content)
        if not blocks:
            raise EmptyTaxonomyError("merge pass produced no parseable strategies")
        seen = set()
        strategies = []
        for block in blocks:
            if block.id in seen:
                continue
            seen.add(block.id)
            strategies.append(Strategy(id=block.id, label=block.label, analysis=block.analysis))
        return StrategyTaxonomy(strategies=tuple(strategies))

    # -- stage 3: cluster assignment ------------------------------------------

    def assign_cluster(self, trace: PairedTrace, taxonomy: StrategyTaxonomy) -> str:
        if not taxonomy.strategies:
            raise InvalidInputError("cannot assign against an empty taxonomy")
        response = self.gateway.call(
            "rollout_classification",
            {
                "TASK_DESCRIPTION": self.task.task_description,
                "TAXONOMY": taxonomy.prompt_text(),
                "REASONING": trace.rl_correct,
                "example_id": trace.example_id,
            },
            model=self.config.taxonomy_model,
            temperature=0.0,
        )
        cluster, in_range = parse_cluster_id(response.content, taxonomy.ids)
        if not in_range:
            logger.warning(
                "cluster answer %r for %s is out of range; mapped to OTHER",
                response.content.strip(), trace.example_id,
            )
        return cluster

    # -- stage 4: per-cluster synthesis ----------------------------------------

    def stratified_pairs(self, pairs: Sequence[PairedTrace], target_label: str, rng: Random) -> list[PairedTrace]:
        positives = [p for p in pairs if p.gold == target_label]
        negatives = [p for p in pairs if p.gold != target_label]
        chosen = []
        if positives:
            chosen.extend(rng.sample(positives, min(self.config.pos_cap, len(positives))))
        if negatives:
            chosen.extend(rng.sample(negatives, min(self.config.neg_cap, len(negatives))))
        return chosen

    def synthesize_cluster_rule(
        self,
        pairs: Sequence[PairedTrace],
        target_label: str,
        existing_rules: Sequence[Rule],
    ) -> Optional[Rule]:
        """One candidate per (cluster, target label), behind the SKIP gate.

        The first body line must be exactly ``Rule Label: <label token>``;
        mislabeled blocks are rejected and treated as SKIP.
        """
        if not pairs:
            raise InvalidInputError("cluster synthesis needs at least one pair")
        self.space.rank(target_label)
        if target_label == self.space.default_label:
            raise InvalidInputError("cannot mine rules for the default label")
        label_token = self.space.display(target_label)
        entries = []
        for i, p in enumerate(pairs, start=1):
            entries.append(
                f"[{i}] gold={self.space.display(p.gold)}\n"
                f"Teacher (incorrect):\n{p.teacher_incorrect}\n"
                f"RL model (correct):\n{p.rl_correct}"
            )
        response = self.gateway.call(
            "cluster_rule_synthesis",
            {
                "CLASSIFICATION_TASK": self.task.classification_task,
                "EXISTING_RULES": sop_prompt_text(existing_rules),
                "ROLLOUT_ENTRIES": "\n\n".join(entries),
                "RULE_LABEL": label_token,
            },
            model=self.config.synthesis_model,
            temperature=self.config.temperature,
        )
        content = response.content.strip()
        if content.startswith(f"{SKIP}:") or content == SKIP:
            return None
        drafts = parse_rule_candidates(response.content)
        if isinstance(drafts, ParseFailure):
            logger.warning("cluster synthesis produced no parseable rule; treated as SKIP")
            return None
        draft = drafts[0]
        first_line = draft.body.splitlines()[0].strip() if draft.body else ""
        if first_line != f"Rule Label: {label_token}":
            logger.warning(
                "candidate rejected: first body line %r does not match 'Rule Label: %s'",
                first_line, label_token,
            )
            return None
        return Rule(
            rule_id="pending",
            name=draft.name,
            target_label=target_label,
            body=draft.body,
            provenance=Provenance(ORIGIN_RL_MINED),
        )

    # -- stage 5: dedup ---------------------------------------------------------

    def judge_equivalent(self, a: Rule, b: Rule) -> tuple[bool, Optional[str]]:
        response = self.gateway.call(
            "rule_equivalence",
            {
                "CLASSIFICATION_TASK": self.task.classification_task,
                "RULE_1_BODY": a.body,
                "RULE_2_BODY": b.body,
            },
            model=self.config.judge_model,
            temperature=0.0,
        )
        equivalent, pref = parse_equivalence_verdict(response.content)
        if not equivalent and pref is None and "YES" in response.content.upper():
            logger.warning("unparseable equivalence verdict treated as NO")
        return equivalent, pref

    def dedup_candidates(self, candidates: Sequence[Rule]) -> list[Rule]:
        """Collapse judge-equivalent candidates within one cluster.

        Pairs are judged in index order and YES verdicts union the pair. Each
        equivalence class keeps a champion: starting from its lowest index,
        every judged pair containing the current champion moves it to the
        judge-preferred side (EITHER keeps the lower index). Output preserves
        input order.
        """
        if not candidates:
            raise InvalidInputError("dedup needs at least one candidate")
        n = len(candidates)
        if n == 1:
            return list(candidates)
        parent = list(range(n))

        def find(x: int) -> int:
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        verdicts: list[tuple[int, int, str]] = []
        for i in range(n):
            for j in range(i + 1, n):
                equivalent, pref = self.judge_equivalent(candidates[i], candidates[j])
                if equivalent:
                    verdicts.append((i, j, pref or "EITHER"))
                    parent[find(j)] = find(i)

        members: dict[int, list[int]] = {}
        for i in range(n):
            members.setdefault(find(i), []).append(i)
        champion: dict[int, int] = {root: min(idxs) for root, idxs in members.items()}
        for i, j, pref in verdicts:
            root = find(i)
            champ = champion[root]
            if champ not in (i, j):
                continue
            if pref == "RULE_1":
                champion[root] = i
            elif pref == "RULE_2":
                champion[root] = j
            else:
                champion[root] = min(i, j)
        keep = sorted(champion.values())
        return [candidates[i] for i in keep]


def finalize_candidates(candidates: Sequence[Rule], taken_ids: Sequence[str]) -> list[Rule]:
    """Assign fresh pool ids (m0001, ...) avoiding any already-taken id."""
    taken = set(taken_ids)
    out = []
    n = 1
    for cand in candidates:
        while f"m{n:04d}" in taken:
            n += 1
        rule_id = f"m{n:04d}"
        taken.add(rule_id)
        n += 1
        out.append(
            Rule(
                rule_id=rule_id,
                name=cand.name,
                target_label=cand.target_label,
                body=cand.body,
                provenance=cand.provenance,
            )
        )
    return out


def run_revision(
    pipeline: RevisionPipeline,
    pairs: Sequence[PairedTrace],
    existing_rules: Sequence[Rule],
    val_hard: Sequence[Example],
    classifier,
    table: Optional[FiringTable] = None,
) -> RevisionResult:
    """Run stages 2-5 and select additions on the hard validation slice.

    ``classifier`` fills the firing table over val_hard for both the existing
    rulebook and the surviving candidates before selection.
    """
    config = pipeline.config
    rng = Random(config.seed)
    taxonomy = pipeline.discover_taxonomy(pairs, config.rounds)
    for pair in pairs:
        pair.cluster_id = pipeline.assign_cluster(pair, taxonomy)

    clusters: dict[str, list[PairedTrace]] = {}
    for pair in pairs:
        clusters.setdefault(pair.cluster_id, []).append(pair)

    target_labels = config.target_labels or tuple(
        lab for lab in pipeline.space.labels if lab != pipeline.space.default_label
    )
    candidates: list[Rule] = []
    cluster_order = [sid for sid in taxonomy.ids if sid in clusters]
    if OTHER in clusters:
        cluster_order.append(OTHER)
    for cluster_id in cluster_order:
        cluster_pairs = clusters[cluster_id]
        cluster_candidates: list[Rule] = []
        for label in target_labels:
            chosen = pipeline.stratified_pairs(cluster_pairs, label, rng)
            if not any(p.gold == label for p in chosen):
                continue
            candidate = pipeline.synthesize_cluster_rule(chosen, label, existing_rules)
            if candidate is not None:
                cluster_candidates.append(candidate)
        if cluster_candidates:
            candidates.extend(pipeline.dedup_candidates(cluster_candidates))

    candidates = finalize_candidates(candidates, [r.rule_id for r in existing_rules])
    table = table or FiringTable()
    classifier.fill(val_hard, list(existing_rules) + candidates, table)
    base = beam_select(
        [],
        table,
        val_hard,
        K=1,
        sparsity=config.sparsity,
        beam_width=1,
        space=pipeline.space,
        base_rules=list(existing_rules),
    )
    additions, selected = select_on_val_hard(
        candidates,
        existing_rules,
        val_hard,
        table,
        K_add=config.K_add,
        sparsity=config.sparsity,
        space=pipeline.space,
        beam_width=config.beam_width,
    )
    return RevisionResult(
        taxonomy=taxonomy,
        candidates=candidates,
        additions=additions,
        score=selected.score,
        base_score=base.score,
    )


def select_on_val_hard(
    candidates: Sequence[Rule],
    existing_rules: Sequence[Rule],
    val_hard: Sequence[Example],
    table: FiringTable,
    K_add: int,
    sparsity: float,
    space: LabelSpace,
    beam_width: int = 15,
) -> tuple[list[Rule], ActiveSet]:
    """Choose rule additions on the hard validation slice.

    Every evaluated subset is composed together with the full existing
    rulebook, which stays fixed; seeding with the empty addition set means
    the result never scores below the existing rulebook alone.
    """
    if not val_hard:
        raise InvalidInputError("val_hard is empty")
    selected = beam_select(
        list(candidates),
        table,
        val_hard,
        K=max(K_add, 1),
        sparsity=sparsity,
        beam_width=beam_width,
        space=space,
        seed=(),
        base_rules=list(existing_rules),
    )
    chosen = [c for c in candidates if c.rule_id in selected.rule_ids]
    return chosen, selected
