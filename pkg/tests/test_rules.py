import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rulebook.errors import FileFormatError, IncompleteCacheError, InvalidInputError
from rulebook.labels import LabelSpace
from rulebook.rules import (
    ActiveSet,
    FiringTable,
    RulePool,
    compose,
    evaluate_subset,
    parse_sop,
    serialize_sop,
)

from conftest import make_examples, make_rule


class TestCompose:
    def test_binary_max_pool(self, binary_space):
        assert compose([("1", True)], binary_space) == "1"

    def test_all_abstain_returns_default(self, nli_space):
        firings = [("entailment", False), ("contradiction", False)]
        assert compose(firings, nli_space) == "not_mentioned"
        assert compose([], nli_space) == "not_mentioned"

    def test_priority_argmax_over_fired(self, nli_space):
        firings = [("entailment", True), ("contradiction", True)]
        assert compose(firings, nli_space) == "contradiction"

    def test_unknown_label_rejected(self, binary_space):
        with pytest.raises(InvalidInputError):
            compose([("bogus", True)], binary_space)

    @given(st.lists(st.tuples(st.sampled_from(["entailment", "contradiction"]), st.booleans())))
    def test_order_independence_and_monotonicity(self, firings):
        space = LabelSpace(
            labels=("not_mentioned", "entailment", "contradiction"),
        )
        out = compose(firings, space)
        assert out == compose(list(reversed(firings)), space)
        # appending an abstain never changes the output
        assert compose(firings + [("entailment", False)], space) == out
        # appending a fired entry never lowers the output's priority rank
        extended = compose(firings + [("entailment", True)], space)
        assert space.rank(extended) >= space.rank(out)

    @given(st.lists(st.booleans(), max_size=8))
    def test_binary_fire_iff_any(self, flags):
        space = LabelSpace(labels=("0", "1"))
        out = compose([("1", f) for f in flags], space)
        assert out == ("1" if any(flags) else "0")


class TestRulePool:
    def test_append_only(self, binary_space):
        pool = RulePool()
        rule = make_rule("r0001").validate_against(binary_space)
        pool.add(rule, iteration=1)
        with pytest.raises(InvalidInputError):
            pool.add(make_rule("r0001"), iteration=2)
        assert pool.created_at("r0001") == 1
        assert len(pool) == 1

    def test_rule_cannot_target_default(self, binary_space):
        with pytest.raises(InvalidInputError):
            make_rule("r0001", target="0").validate_against(binary_space)

    def test_next_rule_id_skips_taken(self):
        pool = RulePool()
        pool.add(make_rule("r0001"))
        assert pool.next_rule_id() == "r0002"

    def test_copy_is_independent(self):
        pool = RulePool()
        pool.add(make_rule("r0001"))
        clone = pool.copy()
        clone.add(make_rule("r0002"))
        assert "r0002" not in pool


class TestFiringTable:
    def test_write_once_semantics(self):
        table = FiringTable()
        table.put("e1", "r1", True)
        table.put("e1", "r1", True)  # equal value re-insert is a no-op
        with pytest.raises(InvalidInputError):
            table.put("e1", "r1", False)
        assert table.fired("e1", "r1") is True

    def test_missing_entry_names_the_pair(self):
        table = FiringTable()
        with pytest.raises(IncompleteCacheError) as err:
            table.fired("ex9", "r7")
        assert "ex9" in str(err.value) and "r7" in str(err.value)

    def test_concurrent_distinct_inserts(self):
        table = FiringTable()
        keys = [(f"e{i}", f"r{j}") for i in range(20) for j in range(20)]

        def insert(chunk):
            for ex, r in chunk:
                table.put(ex, r, (hash(ex + r) & 1) == 0)

        threads = [threading.Thread(target=insert, args=(keys[i::4],)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(table) == len(keys)


class TestActiveSet:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(InvalidInputError):
            ActiveSet(rule_ids=("a", "a"), score=0.0)


class TestEvaluateSubset:
    def _table_for(self, examples, rules, fire_map):
        table = FiringTable()
        for ex in examples:
            for rule in rules:
                table.put(ex.id, rule.rule_id, fire_map.get((ex.id, rule.rule_id), False))
        return table

    def test_empty_subset_predicts_default(self, binary_space):
        examples = make_examples(["1", "0"])
        preds, _, _ = evaluate_subset([], FiringTable(), examples, binary_space, pool=RulePool())
        assert preds == ["0", "0"]

    def test_perfect_rule_scores_one(self, binary_space):
        examples = make_examples(["1", "1", "0", "0"])
        rule = make_rule("rA")
        pool = RulePool([rule])
        table = self._table_for(examples, [rule], {("e0", "rA"): True, ("e1", "rA"): True})
        preds, f1, bacc = evaluate_subset(["rA"], table, examples, binary_space, pool)
        assert preds == ["1", "1", "0", "0"]
        assert f1 == 1.0 and bacc == 1.0

    def test_hand_computed_macro_f1(self, binary_space):
        # golds [1,1,0,0], rule fires only on the first -> preds [1,0,0,0]
        examples = make_examples(["1", "1", "0", "0"])
        rule = make_rule("rA")
        pool = RulePool([rule])
        table = self._table_for(examples, [rule], {("e0", "rA"): True})
        preds, f1, _ = evaluate_subset(["rA"], table, examples, binary_space, pool)
        assert preds == ["1", "0", "0", "0"]
        assert f1 == pytest.approx((2 / 3 + 4 / 5) / 2, abs=1e-12)

    def test_missing_cache_entry_raises(self, binary_space):
        examples = make_examples(["1", "0"])
        rule = make_rule("rA")
        pool = RulePool([rule])
        table = FiringTable()
        table.put("e0", "rA", True)
        with pytest.raises(IncompleteCacheError):
            evaluate_subset(["rA"], table, examples, binary_space, pool)

    def test_pure_over_cache(self, binary_space):
        examples = make_examples(["1", "0", "1"])
        rule = make_rule("rA")
        pool = RulePool([rule])
        table = self._table_for(examples, [rule], {("e0", "rA"): True, ("e2", "rA"): True})
        first = evaluate_subset(["rA"], table, examples, binary_space, pool)
        second = evaluate_subset(["rA"], table, examples, binary_space, pool)
        assert first == second


class TestSopFile:
    def test_round_trip_byte_identical_body(self):
        body = "Trigger Pattern: x.\n\n  indented line\nExceptions:\n- none\nExamples\ntrailing"
        rules = [make_rule("r0001", body=body, name="a name with spaces")]
        text = serialize_sop(rules)
        parsed = parse_sop(text)
        assert len(parsed) == 1
        assert parsed[0].body == body
        assert parsed[0].name == "a name with spaces"
        assert parsed[0].target_label == "1"
        # serializing the parsed rules reproduces the same file
        assert serialize_sop(parsed) == text

    def test_terminator_in_body_rejected(self):
        rules = [make_rule("r0001", body="ok\nEND RULE\nmore")]
        with pytest.raises(FileFormatError):
            serialize_sop(rules)

    def test_malformed_header_rejected(self):
        with pytest.raises(FileFormatError):
            parse_sop("RULE r1 WRONG 1 NAME x\nbody\nEND RULE\n")

    def test_missing_terminator_rejected(self):
        with pytest.raises(FileFormatError):
            parse_sop("RULE r1 LABEL 1 NAME x\nbody\n")

    @given(
        st.lists(
            st.text(
                alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\r"),
                min_size=1,
                max_size=80,
            ).filter(lambda s: s.strip() and s.strip() != "END RULE"),
            min_size=1,
            max_size=6,
        )
    )
    def test_round_trip_arbitrary_bodies(self, body_lines):
        body = "\n".join(body_lines)
        rules = [make_rule("r0001", body=body)]
        assert parse_sop(serialize_sop(rules))[0].body == body
