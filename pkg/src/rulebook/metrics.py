"""Classification metrics with the parse-failure-as-wrong accounting.

Both metrics are unweighted means over classes. A ParseFailure prediction is
counted as wrong for the gold class: it contributes one false negative to the
gold class and no true/false positive anywhere.
"""

from __future__ import annotations

from typing import Sequence, Union

from .errors import InvalidInputError
from .labels import LabelSpace
from .parsing import ParseFailure

Pred = Union[str, ParseFailure]


def _confusion(preds: Sequence[Pred], golds: Sequence[str], space: LabelSpace):
    if len(preds) != len(golds):
        raise InvalidInputError(f"preds/golds length mismatch: {len(preds)} vs {len(golds)}")
    tp = {lab: 0 for lab in space.labels}
    fp = {lab: 0 for lab in space.labels}
    fn = {lab: 0 for lab in space.labels}
    gold_count = {lab: 0 for lab in space.labels}
    for pred, gold in zip(preds, golds):
        space.rank(gold)
        gold_count[gold] += 1
        if isinstance(pred, ParseFailure):
            fn[gold] += 1
            continue
        space.rank(pred)
        if pred == gold:
            tp[gold] += 1
        else:
            fp[pred] += 1
            fn[gold] += 1
    return tp, fp, fn, gold_count


def macro_f1(preds: Sequence[Pred], golds: Sequence[str], space: LabelSpace) -> float:
    """Per-class F1 averaged uniformly over all C classes.

    A class with neither predicted nor gold positives contributes F1 = 0
    (strict 0/0 convention over the full label space).
    """
    tp, fp, fn, _ = _confusion(preds, golds, space)
    total = 0.0
    for lab in space.labels:
        denom = 2 * tp[lab] + fp[lab] + fn[lab]
        total += (2 * tp[lab] / denom) if denom > 0 else 0.0
    return total / space.size


def balanced_accuracy(preds: Sequence[Pred], golds: Sequence[str], space: LabelSpace) -> float:
    """Mean per-class recall; classes with zero gold instances are excluded."""
    tp, _, _, gold_count = _confusion(preds, golds, space)
    recalls = [tp[lab] / gold_count[lab] for lab in space.labels if gold_count[lab] > 0]
    if not recalls:
        raise InvalidInputError("no gold labels to score")
    return sum(recalls) / len(recalls)
