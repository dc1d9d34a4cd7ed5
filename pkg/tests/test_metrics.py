import random

import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import f1_score, recall_score

from rulebook.errors import InvalidInputError
from rulebook.labels import LabelSpace
from rulebook.metrics import balanced_accuracy, macro_f1
from rulebook.parsing import MISSING_LABEL_HEADER, ParseFailure

FAIL = ParseFailure(MISSING_LABEL_HEADER, raw="")


def oracle_macro_f1(preds, golds, labels):
    """Direct per-class formula over explicit confusion counts."""
    total = 0.0
    for lab in labels:
        tp = sum(1 for p, g in zip(preds, golds) if not isinstance(p, ParseFailure) and p == g == lab)
        fp = sum(1 for p, g in zip(preds, golds) if not isinstance(p, ParseFailure) and p == lab != g)
        fn = sum(1 for p, g in zip(preds, golds) if g == lab and (isinstance(p, ParseFailure) or p != lab))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        total += 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return total / len(labels)


def oracle_bacc(preds, golds, labels):
    recalls = []
    for lab in labels:
        support = [i for i, g in enumerate(golds) if g == lab]
        if not support:
            continue
        hits = sum(1 for i in support if not isinstance(preds[i], ParseFailure) and preds[i] == golds[i])
        recalls.append(hits / len(support))
    return sum(recalls) / len(recalls)


class TestMacroF1:
    def test_perfect(self, binary_space):
        assert macro_f1(["1", "0"], ["1", "0"], binary_space) == 1.0

    def test_hand_computed_example(self, binary_space):
        value = macro_f1(["1", "0", "0", "0"], ["1", "1", "0", "0"], binary_space)
        assert value == pytest.approx((2 / 3 + 4 / 5) / 2, abs=1e-12)

    def test_parse_failure_counts_as_wrong_for_gold(self, binary_space):
        # class 1 gets a false negative only; class 0 stays perfect
        value = macro_f1([FAIL, "0"], ["1", "0"], binary_space)
        assert value == pytest.approx(0.5, abs=1e-12)

    def test_parse_failure_is_no_false_positive_anywhere(self, binary_space):
        with_fail = macro_f1([FAIL, "0", "1"], ["1", "0", "1"], binary_space)
        with_wrong = macro_f1(["0", "0", "1"], ["1", "0", "1"], binary_space)
        assert with_fail > with_wrong  # the wrong label also damages class 0 precision

    def test_absent_class_contributes_zero(self, nli_space):
        value = macro_f1(["entailment"], ["entailment"], nli_space)
        assert value == pytest.approx(1 / 3, abs=1e-12)

    def test_length_mismatch(self, binary_space):
        with pytest.raises(InvalidInputError):
            macro_f1(["1"], ["1", "0"], binary_space)


class TestBalancedAccuracy:
    def test_perfect(self, binary_space):
        assert balanced_accuracy(["1", "0"], ["1", "0"], binary_space) == 1.0

    def test_hand_computed_example(self, binary_space):
        value = balanced_accuracy(["1", "0", "0", "0"], ["1", "1", "0", "0"], binary_space)
        assert value == pytest.approx(0.75, abs=1e-12)

    def test_single_class_golds(self, binary_space):
        assert balanced_accuracy(["1", "1"], ["1", "1"], binary_space) == 1.0

    def test_parse_failure_hits_recall(self, binary_space):
        value = balanced_accuracy([FAIL, "0"], ["1", "0"], binary_space)
        assert value == pytest.approx(0.5, abs=1e-12)


def _random_case(rng, n_classes, with_failures=True):
    labels = tuple(f"c{i}" for i in range(n_classes))
    space = LabelSpace(labels=labels)
    n = rng.randrange(1, 60)
    golds = [rng.choice(labels) for _ in range(n)]
    preds = []
    for _ in range(n):
        if with_failures and rng.random() < 0.1:
            preds.append(FAIL)
        else:
            preds.append(rng.choice(labels))
    return space, preds, golds


def test_oracle_agreement_on_random_confusions():
    rng = random.Random(7)
    for _ in range(1000):
        space, preds, golds = _random_case(rng, rng.choice([2, 3, 4]))
        assert macro_f1(preds, golds, space) == pytest.approx(
            oracle_macro_f1(preds, golds, space.labels), abs=1e-12
        )
        assert balanced_accuracy(preds, golds, space) == pytest.approx(
            oracle_bacc(preds, golds, space.labels), abs=1e-12
        )


def test_sklearn_agreement_without_failures():
    rng = random.Random(11)
    for _ in range(200):
        space, preds, golds = _random_case(rng, rng.choice([2, 3]), with_failures=False)
        ours = macro_f1(preds, golds, space)
        theirs = f1_score(golds, preds, labels=list(space.labels), average="macro", zero_division=0)
        assert ours == pytest.approx(theirs, abs=1e-12)
        present = sorted({g for g in golds})
        ours_bacc = balanced_accuracy(preds, golds, space)
        theirs_bacc = recall_score(golds, preds, labels=present, average="macro", zero_division=0)
        assert ours_bacc == pytest.approx(theirs_bacc, abs=1e-12)


@given(st.data())
def test_relabeling_invariance(data):
    labels = ("alpha", "beta", "gamma")
    space = LabelSpace(labels=labels)
    n = data.draw(st.integers(min_value=1, max_value=30))
    golds = data.draw(st.lists(st.sampled_from(labels), min_size=n, max_size=n))
    preds = data.draw(
        st.lists(st.sampled_from(labels + (FAIL,)), min_size=n, max_size=n)
    )
    mapping = dict(zip(labels, ("x", "y", "z")))
    space2 = LabelSpace(labels=("x", "y", "z"))
    preds2 = [p if isinstance(p, ParseFailure) else mapping[p] for p in preds]
    golds2 = [mapping[g] for g in golds]
    assert macro_f1(preds, golds, space) == pytest.approx(macro_f1(preds2, golds2, space2), abs=1e-15)
    assert balanced_accuracy(preds, golds, space) == pytest.approx(
        balanced_accuracy(preds2, golds2, space2), abs=1e-15
    )
