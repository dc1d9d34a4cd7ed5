"""Rule-subset search over cached firings: beam search plus an exhaustive oracle.

The objective is macro-F1 on the validation examples minus a sparsity penalty
lambda * |subset| / n_val. Because every rule's per-example verdict is cached
in the FiringTable, candidate subsets compose by an elementwise priority max
and the whole search issues zero model calls.

Tie-breaking is deterministic everywhere: higher objective wins, then the
smaller subset, then the lexicographically smallest sorted rule_id list.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Union

import numpy as np

from .errors import InvalidInputError, TooLargeError
from .labels import Example, LabelSpace
from .rules import ActiveSet, FiringTable, Rule, RulePool

EXHAUSTIVE_GUARD = 10**6


class SubsetEvaluator:
    """Vectorized objective evaluation over the firing cache.

    Each rule becomes an array of priority ranks (its target's rank where it
    fired, 0 where it abstained). A subset's predictions are the elementwise
    maximum of its rules' arrays, with 0 mapping to the default label, so
    extending a subset by one rule costs O(n).
    """

    def __init__(
        self,
        rules: Sequence[Rule],
        table: FiringTable,
        examples: Sequence[Example],
        space: LabelSpace,
        sparsity: float = 0.0,
        base_rules: Sequence[Rule] = (),
    ):
        if not examples:
            raise InvalidInputError("cannot evaluate subsets over an empty example list")
        self.space = space
        self.sparsity = sparsity
        self.n = len(examples)
        self._gold = np.array([space.rank(ex.gold) for ex in examples], dtype=np.int16)
        self._ranks: dict[str, np.ndarray] = {}
        for rule in list(rules) + list(base_rules):
            rank = space.rank(rule.target_label)
            col = np.array(
                [rank if table.fired(ex.id, rule.rule_id) else 0 for ex in examples],
                dtype=np.int16,
            )
            self._ranks[rule.rule_id] = col
        self.rule_ids = [r.rule_id for r in rules]
        base = np.zeros(self.n, dtype=np.int16)
        for rule in base_rules:
            base = np.maximum(base, self._ranks[rule.rule_id])
        self._base = base
        self._default_rank = space.rank(space.default_label)
        # class order follows the label list so float summation matches metrics.macro_f1
        self._class_ranks = [space.rank(lab) for lab in space.labels]

    def empty(self) -> np.ndarray:
        return self._base

    def extend(self, composed: np.ndarray, rule_id: str) -> np.ndarray:
        return np.maximum(composed, self._ranks[rule_id])

    def compose_ids(self, rule_ids: Sequence[str]) -> np.ndarray:
        composed = self._base
        for rule_id in rule_ids:
            composed = np.maximum(composed, self._ranks[rule_id])
        return composed

    def macro_f1(self, composed: np.ndarray) -> float:
        pred = np.where(composed == 0, self._default_rank, composed)
        c = self.space.size
        joint = np.bincount((self._gold - 1) * c + (pred - 1), minlength=c * c).reshape(c, c)
        total = 0.0
        for rank in self._class_ranks:
            i = rank - 1
            tp = int(joint[i, i])
            fp = int(joint[:, i].sum() - joint[i, i])
            fn = int(joint[i, :].sum() - joint[i, i])
            denom = 2 * tp + fp + fn
            total += (2 * tp / denom) if denom > 0 else 0.0
        return total / c

    def objective(self, composed: np.ndarray, subset_size: int) -> float:
        return self.macro_f1(composed) - self.sparsity * subset_size / self.n


def _better(cand: tuple[float, int, tuple[str, ...]], best: tuple[float, int, tuple[str, ...]]) -> bool:
    if cand[0] != best[0]:
        return cand[0] > best[0]
    if cand[1] != best[1]:
        return cand[1] < best[1]
    return cand[2] < best[2]


def _as_rules(pool: Union[RulePool, Sequence[Rule]]) -> list[Rule]:
    return list(pool)


def beam_select(
    pool: Union[RulePool, Sequence[Rule]],
    table: FiringTable,
    val: Sequence[Example],
    K: int,
    sparsity: float,
    beam_width: int,
    space: LabelSpace,
    seed: Optional[Sequence[str]] = None,
    base_rules: Sequence[Rule] = (),
) -> ActiveSet:
    """Beam search for the best rule subset of size <= K.

    The search starts from the empty set; when ``seed`` is supplied it is
    injected into the initial beam, so the returned score is never below the
    seed's score. ``base_rules`` are composed into every evaluation without
    being searched or penalized (used when selecting additions to a fixed
    rulebook).
    """
    if K < 1:
        raise InvalidInputError("K must be >= 1")
    if beam_width < 1:
        raise InvalidInputError("beam_width must be >= 1")
    rules = _as_rules(pool)
    evaluator = SubsetEvaluator(rules, table, val, space, sparsity, base_rules)
    return _beam_with_evaluator(evaluator, K, beam_width, seed)



def exhaustive_select(
    pool: Union[RulePool, Sequence[Rule]],
    table: FiringTable,
    val: Sequence[Example],
    K: int,
    sparsity: float,
    space: LabelSpace,
    base_rules: Sequence[Rule] = (),
) -> ActiveSet:
    """Globally optimal subset under the same objective and tie-breaking.

    Test oracle for beam_select; guarded so the enumeration stays tractable.
    """
    if K < 1:
        raise InvalidInputError("K must be >= 1")
    rules = _as_rules(pool)
    m = len(rules)
    subsets = sum(math.comb(m, k) for k in range(0, min(K, m) + 1))
    if subsets > EXHAUSTIVE_GUARD:
        raise TooLargeError(f"{subsets} subsets exceed the enumeration guard of {EXHAUSTIVE_GUARD}")
    evaluator = SubsetEvaluator(rules, table, val, space, sparsity, base_rules)
    ordered_ids = sorted(evaluator.rule_ids)
    best = ((), evaluator.objective(evaluator.empty(), 0))
    best_key = (best[1], 0, ())

    def recurse(start: int, ids: tuple[str, ...], composed: np.ndarray) -> None:
        nonlocal best, best_key
        if len(ids) >= K:
            return
        for i in range(start, m):
            rule_id = ordered_ids[i]
            child_ids = ids + (rule_id,)
            child = evaluator.extend(composed, rule_id)
            key = (evaluator.objective(child, len(child_ids)), len(child_ids), child_ids)
            if _better(key, best_key):
                best, best_key = (child_ids, key[0]), key
            recurse(i + 1, child_ids, child)

    recurse(0, (), evaluator.empty())
    return ActiveSet(rule_ids=tuple(sorted(best[0])), score=best[1])


def _beam_with_evaluator(
    evaluator: SubsetEvaluator,
    K: int,
    beam_width: int,
    seed: Optional[Sequence[str]] = None,
) -> ActiveSet:
    empty_ids: tuple[str, ...] = ()
    empty = evaluator.empty()
    best_key = (evaluator.objective(empty, 0), 0, empty_ids)
    beam: dict[frozenset, tuple[tuple[str, ...], np.ndarray]] = {frozenset(): (empty_ids, empty)}

    if seed:
        seed_ids = tuple(sorted(seed))
        if len(seed_ids) > K:
            raise InvalidInputError("seed is larger than the subset cap K")
        for rule_id in seed_ids:
            if rule_id not in evaluator._ranks:
                raise InvalidInputError(f"seed rule {rule_id!r} is not in the pool")
        composed = evaluator.compose_ids(seed_ids)
        key = (evaluator.objective(composed, len(seed_ids)), len(seed_ids), seed_ids)
        if _better(key, best_key):
            best_key = key
        beam[frozenset(seed_ids)] = (seed_ids, composed)

    all_ids = evaluator.rule_ids
    for _ in range(K):
        children: dict[frozenset, tuple[tuple[str, ...], np.ndarray, float]] = {}
        for members, (ids, composed) in beam.items():
            if len(ids) >= K:
                continue
            for rule_id in all_ids:
                if rule_id in members:
                    continue
                child_members = members | {rule_id}
                if child_members in children:
                    continue
                child = evaluator.extend(composed, rule_id)
                child_ids = tuple(sorted(ids + (rule_id,)))
                obj = evaluator.objective(child, len(child_ids))
                children[child_members] = (child_ids, child, obj)
        if not children:
            break
        ranked = sorted(
            children.items(), key=lambda kv: (-kv[1][2], len(kv[1][0]), kv[1][0])
        )[:beam_width]
        beam = {}
        for members, (ids, composed, obj) in ranked:
            key = (obj, len(ids), ids)
            if _better(key, best_key):
                best_key = key
            beam[members] = (ids, composed)

    return ActiveSet(rule_ids=best_key[2], score=best_key[0])
