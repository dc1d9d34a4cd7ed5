from random import Random

import pytest

from rulebook.batching import (
    BatcherConfig,
    JudgeAuxScorer,
    SyntheticRolloutProvider,
    build_batch,
    combined_advantages,
)
from rulebook.gateway import ChatResponse
from rulebook.labels import Example
from rulebook.mock import MockScript

from conftest import mock_gateway
from worlds import BINARY, TASK


def judge_script(score_probs):
    """Judge answering with a fixed answer-position distribution."""
    response = ChatResponse(content=" 4", top_logprobs=(tuple(score_probs),))
    return MockScript().add_handler("judge_faithfulness", lambda b, r: response)


def scorer_for(script, lambda_aux=0.2):
    config = BatcherConfig(lambda_aux=lambda_aux)
    gw = mock_gateway(script)
    return JudgeAuxScorer(config, gw, BINARY, TASK), gw


def rollout(text, gold="1"):
    from rulebook.batching import Rollout, correctness_reward
    from rulebook.parsing import ParseFailure, parse_reasoning_label

    parsed = parse_reasoning_label(text, BINARY)
    label = parsed if isinstance(parsed, ParseFailure) else parsed.label
    return Rollout(text=text, parsed=label, reward=correctness_reward(label, gold))


class TestJudgeAuxScorer:
    def test_expected_value_score(self):
        scorer, _ = scorer_for(judge_script([("4", 0.5), ("5", 0.5)]))
        ex = Example(id="e1", text="doc", gold="1")
        score = scorer(ex, rollout("REASONING:\nsolid reasons.\n\nLABEL: 1"))
        assert score == pytest.approx(4.5, abs=1e-12)

    def test_empty_reasoning_unscored(self):
        scorer, gw = scorer_for(judge_script([("4", 1.0)]))
        ex = Example(id="e1", text="doc", gold="1")
        assert scorer(ex, rollout("REASONING:\n\n\nLABEL: 1")) is None
        assert scorer(ex, rollout("garbage output")) is None
        assert gw.stats.backend_calls == 0

    def test_no_score_token_unscored(self):
        scorer, _ = scorer_for(judge_script([("ok", 1.0)]))
        ex = Example(id="e1", text="doc", gold="1")
        assert scorer(ex, rollout("REASONING:\nfine.\n\nLABEL: 1")) is None

    def test_judge_feeds_combined_advantages_in_batch(self):
        # judge scores the correct rollouts higher than the wrong ones
        def handler(bindings, request):
            good = "correct path" in bindings["reasoning"]
            probs = (("5", 1.0),) if good else (("2", 1.0),)
            return ChatResponse(content=" x", top_logprobs=(probs,))

        class TaggedProvider:
            def __init__(self):
                self.inner = SyntheticRolloutProvider(BINARY, 0.5, seed=4)

            def sample(self, example, G, seed_tags):
                texts = []
                for t in self.inner.sample(example, G, seed_tags):
                    correct = t.endswith(f"LABEL: {example.gold}")
                    marker = "correct path" if correct else "wrong path"
                    texts.append(t.replace("synthetic rollout", f"{marker} rollout"))
                return texts

        script = MockScript().add_handler("judge_faithfulness", handler)
        gw = mock_gateway(script)
        config = BatcherConfig(B=4, G=8, kappa=2, lambda_aux=0.2)
        scorer = JudgeAuxScorer(config, gw, BINARY, TASK)
        pools = {
            "0": [Example(id=f"a{i}", text="t", gold="0") for i in range(20)],
            "1": [Example(id=f"b{i}", text="t", gold="1") for i in range(20)],
        }
        provider = TaggedProvider()
        batch = build_batch(pools, provider, B=4, G=8, kappa=2, step=0, rng=Random(1),
                            space=BINARY, epsilon=1e-6, lambda_aux=0.2, aux_scorer=scorer)
        for group in batch.groups:
            if not group.informative:
                continue
            rewards = [r.reward for r in group.rollouts]
            aux = [r.aux_score for r in group.rollouts]
            expected = combined_advantages(rewards, aux, lambda_aux=0.2, epsilon=1e-6)
            assert [r.advantage for r in group.rollouts] == expected
            # the aux stream pushes correct rollouts further up
            from rulebook.batching import group_advantages

            base = group_advantages(rewards, 1e-6)
            for r, b in zip(group.rollouts, base):
                if r.reward == 1:
                    assert r.advantage > b
                else:
                    assert r.advantage < b
        # judge was invoked only after grouping, for scored rollouts
        assert gw.stats.calls_by_template["judge_faithfulness"] == 4 * 8
