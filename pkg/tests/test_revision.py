import pytest

from rulebook.errors import EmptyTaxonomyError, InvalidInputError
from rulebook.labels import Example
from rulebook.mock import MockScript
from rulebook.revision import (
    PairedTrace,
    ReviseConfig,
    RevisionPipeline,
    collect_hard_successes,
    finalize_candidates,
    run_revision,
    select_on_val_hard,
)
from rulebook.rules import FiringTable, Provenance, Rule

from conftest import make_rule, mock_gateway
from worlds import BINARY, TASK

STRATEGY_BLOCK = (
    '<STRATEGY id="1">\nAnalysis: cross-checks claims against quoted spans.\n'
    "Label: span cross-checking\n</STRATEGY>\n"
    '<STRATEGY id="2">\nAnalysis: reasons from exceptions before triggers.\n'
    "Label: exception-first reading\n</STRATEGY>"
)


def pipeline_for(script, **overrides):
    config = ReviseConfig(**overrides)
    gw = mock_gateway(script)
    return RevisionPipeline(config, gw, BINARY, TASK), gw


def rollout_record(example_id, gold, rewards, texts=None):
    rollouts = []
    for i, reward in enumerate(rewards):
        label = gold if reward == 1 else ("0" if gold == "1" else "1")
        text = (texts or {}).get(i, f"REASONING:\nrollout {i} reasoning for {example_id}.\n\nLABEL: {label}")
        rollouts.append({"text": text, "reward": reward, "advantage": 0.0})
    return {"example_id": example_id, "gold": gold, "prompt": "p", "rollouts": rollouts,
            "topped_up": False}


class TestCollectPairs:
    def test_first_correct_rollout_wins(self):
        records = [rollout_record("h1", "1", [-1, 1, 1])]
        pairs = collect_hard_successes(records, {"h1"}, {"h1": "teacher was wrong"}, BINARY)
        assert len(pairs) == 1
        assert pairs[0].rl_correct == "rollout 1 reasoning for h1."
        assert pairs[0].teacher_incorrect == "teacher was wrong"

    def test_no_correct_rollout_no_pair(self):
        records = [rollout_record("h1", "1", [-1, -1])]
        assert collect_hard_successes(records, {"h1"}, {"h1": "t"}, BINARY) == []

    def test_easy_examples_excluded(self):
        records = [rollout_record("e1", "1", [1, 1])]
        assert collect_hard_successes(records, {"h9"}, {"e1": "t"}, BINARY) == []

    def test_missing_teacher_failure_skips_pair(self):
        records = [rollout_record("h1", "1", [1])]
        assert collect_hard_successes(records, {"h1"}, {}, BINARY) == []


class TestTaxonomy:
    def test_merge_applied_over_rounds(self):
        script = (
            MockScript()
            .add_handler("taxonomy_discovery", lambda b, r: STRATEGY_BLOCK)
            .add_handler("taxonomy_merge", lambda b, r: STRATEGY_BLOCK)
        )
        pipeline, gw = pipeline_for(script, rounds=3)
        pairs = [PairedTrace("h1", "1", "bad", "good")]
        taxonomy = pipeline.discover_taxonomy(pairs)
        assert taxonomy.ids == ["1", "2"]
        assert gw.stats.calls_by_template["taxonomy_discovery"] == 3
        assert gw.stats.calls_by_template["taxonomy_merge"] == 1

    def test_single_round_still_merges(self):
        script = (
            MockScript()
            .add_handler("taxonomy_discovery", lambda b, r: STRATEGY_BLOCK)
            .add_handler("taxonomy_merge", lambda b, r: STRATEGY_BLOCK)
        )
        pipeline, gw = pipeline_for(script, rounds=1)
        pipeline.discover_taxonomy([PairedTrace("h1", "1", "bad", "good")])
        assert gw.stats.calls_by_template["taxonomy_discovery"] == 1
        assert gw.stats.calls_by_template["taxonomy_merge"] == 1

    def test_rounds_reach_merge_prompt(self):
        captured = {}

        def merge(bindings, request):
            captured["block"] = bindings["ROUNDS_BLOCK"]
            return STRATEGY_BLOCK

        script = (
            MockScript()
            .add_handler("taxonomy_discovery",
                         lambda b, r: f'round output {r.seed_tag}\n{STRATEGY_BLOCK}')
            .add_handler("taxonomy_merge", merge)
        )
        pipeline, _ = pipeline_for(script, rounds=2)
        pipeline.discover_taxonomy([PairedTrace("h1", "1", "bad", "good")])
        assert "Round 1:\nround output round-1" in captured["block"]
        assert "Round 2:\nround output round-2" in captured["block"]

    def test_empty_merge_is_an_error(self):
        script = (
            MockScript()
            .add_handler("taxonomy_discovery", lambda b, r: STRATEGY_BLOCK)
            .add_handler("taxonomy_merge", lambda b, r: "nothing structured")
        )
        pipeline, _ = pipeline_for(script)
        with pytest.raises(EmptyTaxonomyError):
            pipeline.discover_taxonomy([PairedTrace("h1", "1", "bad", "good")])


class TestClusterAssignment:
    def _pipeline(self, answer):
        script = MockScript().add_response("rollout_classification", answer)
        return pipeline_for(script)[0]

    def _taxonomy(self):
        from rulebook.revision import Strategy, StrategyTaxonomy

        return StrategyTaxonomy(strategies=(
            Strategy("1", "a", "x"), Strategy("2", "b", "y"), Strategy("3", "c", "z"),
        ))

    def test_valid_id(self):
        pipeline = self._pipeline("2")
        assert pipeline.assign_cluster(PairedTrace("h", "1", "t", "r"), self._taxonomy()) == "2"

    def test_other(self):
        pipeline = self._pipeline("OTHER")
        assert pipeline.assign_cluster(PairedTrace("h", "1", "t", "r"), self._taxonomy()) == "OTHER"

    def test_out_of_range_maps_to_other(self):
        pipeline = self._pipeline("7")
        assert pipeline.assign_cluster(PairedTrace("h", "1", "t", "r"), self._taxonomy()) == "OTHER"


class TestClusterSynthesis:
    def test_skip_line(self):
        script = MockScript().add_response(
            "cluster_rule_synthesis", "SKIP: insufficient signal for label=1"
        )
        pipeline, _ = pipeline_for(script)
        out = pipeline.synthesize_cluster_rule([PairedTrace("h", "1", "t", "r")], "1", [])
        assert out is None

    def test_well_formed_block_with_label_line(self):
        body = "Rule Label: 1\nTrigger: something precise.\nExceptions:\n- none"
        script = MockScript().add_response(
            "cluster_rule_synthesis",
            f"<RULE_NAME>mined rule</RULE_NAME>\n<RULE_DESCRIPTION>\n{body}\n</RULE_DESCRIPTION>",
        )
        pipeline, _ = pipeline_for(script)
        out = pipeline.synthesize_cluster_rule([PairedTrace("h", "1", "t", "r")], "1", [])
        assert out is not None
        assert out.provenance.origin == "rl_mined"
        assert out.target_label == "1"
        assert out.body.splitlines()[0] == "Rule Label: 1"

    def test_mismatched_label_line_rejected(self):
        body = "Rule Label: 0\nTrigger: wrong label."
        script = MockScript().add_response(
            "cluster_rule_synthesis",
            f"<RULE_NAME>bad</RULE_NAME>\n<RULE_DESCRIPTION>\n{body}\n</RULE_DESCRIPTION>",
        )
        pipeline, _ = pipeline_for(script)
        assert pipeline.synthesize_cluster_rule([PairedTrace("h", "1", "t", "r")], "1", []) is None

    def test_default_label_rejected_before_any_call(self):
        pipeline, gw = pipeline_for(MockScript())
        with pytest.raises(InvalidInputError):
            pipeline.synthesize_cluster_rule([PairedTrace("h", "0", "t", "r")], "0", [])
        assert gw.stats.backend_calls == 0

    def test_stratified_pairs_capped_and_seeded(self):
        pipeline, _ = pipeline_for(MockScript(), pos_cap=2, neg_cap=1, seed=3)
        pairs = [PairedTrace(f"h{i}", "1" if i < 5 else "0", "t", "r") for i in range(8)]
        from random import Random

        chosen_a = pipeline.stratified_pairs(pairs, "1", Random(3))
        chosen_b = pipeline.stratified_pairs(pairs, "1", Random(3))
        assert [p.example_id for p in chosen_a] == [p.example_id for p in chosen_b]
        assert sum(p.gold == "1" for p in chosen_a) == 2
        assert sum(p.gold != "1" for p in chosen_a) == 1


def equivalence_script(verdicts):
    """verdicts: dict (name1, name2) -> response text; names from RULE bodies."""

    def handler(bindings, request):
        key = (bindings["RULE_1_BODY"], bindings["RULE_2_BODY"])
        return verdicts.get(key, "NO")

    return MockScript().add_handler("rule_equivalence", handler)


def candidate(i, body=None):
    return Rule(
        rule_id=f"c{i}",
        name=f"candidate {i}",
        target_label="1",
        body=body or f"body {i}",
        provenance=Provenance("rl_mined"),
    )


class TestDedup:
    def test_single_candidate_zero_judge_calls(self):
        pipeline, gw = pipeline_for(MockScript())
        out = pipeline.dedup_candidates([candidate(0)])
        assert [r.rule_id for r in out] == ["c0"]
        assert gw.stats.backend_calls == 0

    def test_yes_rule2_keeps_second(self):
        script = equivalence_script({("body 0", "body 1"): "YES\nRULE_2"})
        pipeline, _ = pipeline_for(script)
        out = pipeline.dedup_candidates([candidate(0), candidate(1)])
        assert [r.rule_id for r in out] == ["c1"]

    def test_either_keeps_lower_index(self):
        script = equivalence_script({("body 0", "body 1"): "YES\nEITHER"})
        pipeline, _ = pipeline_for(script)
        out = pipeline.dedup_candidates([candidate(0), candidate(1)])
        assert [r.rule_id for r in out] == ["c0"]

    def test_transitive_union_single_survivor(self):
        script = equivalence_script({
            ("body 0", "body 1"): "YES\nRULE_2",
            ("body 1", "body 2"): "YES\nRULE_2",
        })
        pipeline, _ = pipeline_for(script)
        out = pipeline.dedup_candidates([candidate(0), candidate(1), candidate(2)])
        assert len(out) == 1
        assert out[0].rule_id == "c2"

    def test_unrelated_candidates_all_survive_in_order(self):
        pipeline, _ = pipeline_for(equivalence_script({}))
        out = pipeline.dedup_candidates([candidate(2), candidate(0), candidate(1)])
        assert [r.rule_id for r in out] == ["c2", "c0", "c1"]

    def test_determinism_across_runs(self):
        verdicts = {
            ("body 0", "body 1"): "YES\nEITHER",
            ("body 2", "body 3"): "YES\nRULE_1",
        }
        results = []
        for _ in range(3):
            pipeline, _ = pipeline_for(equivalence_script(verdicts))
            out = pipeline.dedup_candidates([candidate(i) for i in range(4)])
            results.append([r.rule_id for r in out])
        assert results[0] == results[1] == results[2] == ["c0", "c2"]


class TestSelectOnValHard:
    def _setup(self):
        val_hard = [
            Example(id=f"v{i}", text=f"t{i}", gold="1" if i < 6 else "0", split="val")
            for i in range(10)
        ]
        existing = [make_rule("sop1")]
        cand = [candidate(0), candidate(1)]
        table = FiringTable()
        for ex in val_hard:
            table.put(ex.id, "sop1", ex.id in ("v0", "v1"))
            table.put(ex.id, "c0", ex.id in ("v2", "v3", "v4", "v5"))  # fixes 4 misses
            table.put(ex.id, "c1", ex.id in ("v6", "v7"))  # fires on golds 0: harmful
        return val_hard, existing, cand, table

    def test_helpful_candidate_selected(self):
        val_hard, existing, cand, table = self._setup()
        additions, selected = select_on_val_hard(cand, existing, val_hard, table,
                                                 K_add=2, sparsity=0.1, space=BINARY)
        assert [r.rule_id for r in additions] == ["c0"]

    def test_never_scores_below_existing_sop(self):
        val_hard, existing, cand, table = self._setup()
        base = select_on_val_hard([], existing, val_hard, table, K_add=1,
                                  sparsity=0.1, space=BINARY)[1]
        _, selected = select_on_val_hard(cand, existing, val_hard, table,
                                         K_add=2, sparsity=0.1, space=BINARY)
        assert selected.score >= base.score

    def test_zero_candidates_returns_existing_score(self):
        val_hard, existing, _, table = self._setup()
        additions, selected = select_on_val_hard([], existing, val_hard, table,
                                                 K_add=1, sparsity=0.1, space=BINARY)
        assert additions == []
        from rulebook.rules import evaluate_subset

        _, f1, _ = evaluate_subset([], table, val_hard, BINARY,
                                   target_of={"sop1": "1"}, base=["sop1"])
        assert selected.score == pytest.approx(f1, abs=1e-12)


class FiresNothingClassifier:
    """Offline stand-in: candidate rules abstain everywhere."""

    def fill(self, examples, rules, table):
        for ex in examples:
            for rule in rules:
                if not table.has(ex.id, rule.rule_id):
                    table.put(ex.id, rule.rule_id, False)
        return 0


class TestRunRevision:
    def _script(self):
        body = "Rule Label: 1\nTrigger: mined pattern."
        return (
            MockScript()
            .add_handler("taxonomy_discovery", lambda b, r: STRATEGY_BLOCK)
            .add_handler("taxonomy_merge", lambda b, r: STRATEGY_BLOCK)
            .add_response("rollout_classification", "1")
            .add_response(
                "cluster_rule_synthesis",
                f"<RULE_NAME>mined</RULE_NAME>\n<RULE_DESCRIPTION>\n{body}\n</RULE_DESCRIPTION>",
            )
            .add_response("rule_equivalence", "NO")
        )

    def test_five_runs_identical(self):
        outcomes = []
        for _ in range(5):
            pipeline, _ = pipeline_for(self._script(), target_labels=("1",), seed=11)
            pairs = [PairedTrace(f"h{i}", "1", "teacher bad", f"rl good {i}") for i in range(3)]
            val_hard = [Example(id=f"v{i}", text="t", gold="1", split="val") for i in range(4)]
            existing = [make_rule("sop1")]
            table = FiringTable()
            for ex in val_hard:
                table.put(ex.id, "sop1", False)
            result = run_revision(pipeline, pairs, existing, val_hard,
                                  FiresNothingClassifier(), table)
            outcomes.append((
                [r.rule_id for r in result.candidates],
                [r.rule_id for r in result.additions],
                result.score,
            ))
        assert all(o == outcomes[0] for o in outcomes)

    def test_selection_never_harms(self):
        pipeline, _ = pipeline_for(self._script(), target_labels=("1",))
        pairs = [PairedTrace("h0", "1", "teacher bad", "rl good")]
        val_hard = [Example(id=f"v{i}", text="t", gold="1", split="val") for i in range(4)]
        existing = [make_rule("sop1")]
        table = FiringTable()
        for ex in val_hard:
            table.put(ex.id, "sop1", False)
        result = run_revision(pipeline, pairs, existing, val_hard,
                              FiresNothingClassifier(), table)
        assert result.score >= result.base_score

    def test_hard_only_provenance(self):
        records = [
            rollout_record("h1", "1", [1]),
            rollout_record("easy1", "1", [1]),
        ]
        pairs = collect_hard_successes(records, {"h1"}, {"h1": "bad", "easy1": "bad"}, BINARY)
        assert [p.example_id for p in pairs] == ["h1"]


def test_finalize_candidates_avoids_taken_ids():
    cands = [candidate(0), candidate(1)]
    out = finalize_candidates(cands, ["m0001", "sop1"])
    assert [r.rule_id for r in out] == ["m0002", "m0003"]
    assert all(r.provenance.origin == "rl_mined" for r in out)
