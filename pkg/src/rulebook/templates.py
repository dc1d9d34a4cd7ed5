"""Prompt templates and single-pass placeholder rendering.

Placeholders use {name} syntax. Substitution is one pass over the template
text only: braces inside binding values are preserved verbatim and never
re-substituted, so rule bodies quoting placeholder-like text are safe.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Optional

from .errors import InvalidInputError, MissingPlaceholderError

_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z0-9_]+)\}")


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    user: str
    system: Optional[str] = None

    @property
    def placeholders(self) -> frozenset[str]:
        text = (self.system or "") + self.user
        return frozenset(_PLACEHOLDER_RE.findall(text))

    def _substitute(self, text: str, bindings: Mapping[str, str]) -> str:
        def repl(match: re.Match) -> str:
            name = match.group(1)
            if name not in bindings:
                raise MissingPlaceholderError(self.template_id, name)
            return str(bindings[name])

        return _PLACEHOLDER_RE.sub(repl, text)

    def render(self, bindings: Mapping[str, str]) -> list[tuple[str, str]]:
        """Render to a (role, content) message list."""
        bindings = dict(bindings)
        if "input_tag" in bindings and "input_tag_close" in self.placeholders:
            bindings.setdefault("input_tag_close", close_tag(bindings["input_tag"]))
        messages = []
        if self.system is not None:
            messages.append(("system", self._substitute(self.system, bindings)))
        messages.append(("user", self._substitute(self.user, bindings)))
        return messages


def close_tag(input_tag: str) -> str:
    tag = input_tag.strip()
    if tag.startswith("<") and tag.endswith(">"):
        return "</" + tag[1:]
    raise InvalidInputError(f"input_tag {input_tag!r} is not an <ANGLE_TAG>")


REASONING_WITH_RULES = PromptTemplate(
    template_id="reasoning_with_rules",
    user="""Below is a rulebook of patterns relevant to the task. Treat the rulebook as internal guidance - it shapes what to look for in the {input_noun}, but should not be cited in your reasoning.

<RULES>
{rulebook}
</RULES>

{input_tag}
{text}
{input_tag_close}

When writing your reasoning, analyze the {input_noun} directly. Do not name or enumerate rules in your reasoning.

Return exactly in this format:
REASONING:
your reasoning

LABEL: <one of {labels}>

Please think step by step.""",
)

REASONING_WITHOUT_RULES = PromptTemplate(
    template_id="reasoning_without_rules",
    user="""{task_framing}

{input_tag}
{text}
{input_tag_close}

Analyze the {input_noun} directly to decide the label.

Return exactly in this format:
REASONING:
your reasoning

LABEL: <one of {labels}>

Please think step by step.""",
)

LABEL_ONLY = PromptTemplate(
    template_id="label_only",
    user="""{task_framing}

{input_tag}
{text}
{input_tag_close}

Return exactly:
LABEL: <one of {labels}>""",
)

RULE_CLASSIFIER = PromptTemplate(
    template_id="rule_classifier",
    system="{task_framing}",
    user="""Here is the rule you want to check:
<RULE>
{rule_text}
</RULE>

<REPORT>
{report}
</REPORT>

Provide your detailed reasoning under a header exactly written as REASONING:.
Then provide your final prediction under a header exactly written as FINAL PREDICTION:.
Use only one of these values for the final prediction: {RULE_LABEL} (the rule applies) or {ABSTAIN} (the rule does not apply or you cannot tell).{multiclass_note}
Please think step by step:""",
)

# Appended to the classifier output spec when the task has more than two
# classes: conclude a class first, emit the rule's label only on a match.
MULTICLASS_NOTE = (
    " First conclude which class applies; output {RULE_LABEL} only if your"
    " conclusion matches it, otherwise output {ABSTAIN}."
)

GRADIENT_EXCEPTIONS = PromptTemplate(
    template_id="gradient_exceptions",
    user="""You are an expert at {CLASSIFICATION_TASK} and error analysis.

Review the rule and report where the existing rule may be too broad; propose exceptions to restrict it.

<RULE>
{RULE}
</RULE>

<REPORT>
{REPORT}
</REPORT>

The incorrect prediction made by the model: {PREDICTION}

The correct label for this instance: {LABEL}

In your response, provide a detailed explanation in the analysis field, then list the exceptions in the exceptions field. Explain why the model's prediction was incorrect and what type of error or misunderstanding may have occurred.""",
)

GRADIENT_ERROR_PATTERN = PromptTemplate(
    template_id="gradient_error_pattern",
    user="""You are an expert at {CLASSIFICATION_TASK} and error pattern recognition.

There are errors on the analysis below. Identify the underlying error pattern that the current rules fail to capture.

<REPORT>
{REPORT}
</REPORT>

<RELEVANT_RULES>
{MATCHING_RULES}
</RELEVANT_RULES>

The incorrect prediction made by the model: {PREDICTION}

The correct label for this instance: {LABEL}

In your response, provide a diagnostic summary in the summary field and key points in the points field. Explain why the model's prediction was incorrect and what type of error or misunderstanding may have occurred.""",
)

RULE_UPDATE = PromptTemplate(
    template_id="rule_update",
    user="""Your task is to generate a new rule to avoid overly broad coverage mistakes by augmenting the exceptions and examples in an existing rule. Follow these steps:

Review the provided existing rule:

<EXISTING_RULE>
{RULE}
</EXISTING_RULE>

<EXCEPTION_NOTES>
{EXCEPTIONS}
</EXCEPTION_NOTES>

Keep the rule label unchanged as {RULE_LABEL}.

Identify the core pattern or principle that led to the mistake described in the existing rule.

Determine any exceptions where the rule should not apply.

Formulate a new rule using the following structure:

<RULE_NAME>[Concise, descriptive new name]</RULE_NAME>

<RULE_DESCRIPTION>
Trigger Pattern:
[Keep original pattern in the existing rule, clarify if needed]

Exceptions:
[Keep original exceptions]
[Add new exceptions to restrict over-broad coverage]

Examples
[Keep existing examples]
[Add new examples if needed]:
Source text: [Relevant source text if any]
Wrong:   [Example of violation]
Correct: [Example of compliance]
</RULE_DESCRIPTION>

Ensure the rule has a new name.""",
)

RULE_SYNTHESIS = PromptTemplate(
    template_id="rule_synthesis",
    user="""You are an expert at analyzing patterns and developing precise rules for {CLASSIFICATION_TASK}. Your task is to systematically evaluate error patterns and create a clear, actionable and strict rule to prevent similar mistakes in future classifications.

The goal is to identify the truly exceptional instances, not just average ones.

Generate rules with label {TARGET_LABEL}.

Return at most {MAX_NEW_RULES} new rule(s).

Review the existing rules:

<EXISTING_RULES>
{RULES}
</EXISTING_RULES>

Error patterns from misclassifications:

<ERROR_PATTERNS>
{ERROR_PATTERNS}
</ERROR_PATTERNS>

First, conduct a structured error analysis:
<ERROR_ANALYSIS>
1. Context Assessment
   What was the intended behavior?
   What actually happened?
   What key factors contributed?
2. Rule Evaluation
   Do existing rules partially cover this?
   What aspects are unique?
   How can we make the rule robust?
</ERROR_ANALYSIS>

Provide the error analysis in the error_analysis field.

Then, formulate a new rule using this structure:

<RULE_NAME>[Concise, descriptive name that clearly identifies the pattern]</RULE_NAME>

<RULE_DESCRIPTION>
Trigger Pattern: [Clear description of when this rule applies, with 2-3 specific indicators that should trigger the rule]

Exceptions: [Specific cases where the rule should not be applied, even if the pattern appears to match]

Example [One clear example]:
Source text: [Relevant source text if any]
Wrong:   [Example of violation]
Correct: [Example of compliance]
</RULE_DESCRIPTION>

Please analyze the error examples thoroughly and formulate a new rule that would prevent similar classification errors in the future.""",
)

TAXONOMY_DISCOVERY = PromptTemplate(
    template_id="taxonomy_discovery",
    user="""You are analyzing reasoning traces from a model trained with reinforcement learning to improve on hard examples.

<TASK>
{TASK_DESCRIPTION}
</TASK>

Below are {NUM_SAMPLES} correct reasoning traces from different input categories:

{ROLLOUT_ENTRIES}

Identify the distinct REASONING STRATEGIES used across these traces.

A reasoning strategy is a reusable analytical METHOD - how the model reasons, not what specific input topic it reasons about. Group by HOW the model reasons (analytical method), not by WHAT topic or input content it reasons about. Traces on different topics that use the same analytical approach belong to the same strategy. Two traces that reach the same conclusion via different analytical paths count as different strategies.

For each strategy, output in this exact format:

<STRATEGY id="N">
Analysis: [Describe the shared analytical method across traces that use this strategy. What steps does the reasoning follow? What makes it distinct from other strategies? Do not reference specific input topics - describe the abstract pattern.]
Label: [3-6 word name for this strategy]
</STRATEGY>

Identify as many genuinely distinct strategies as you find. Do not force a predetermined number.""",
)

TAXONOMY_MERGE = PromptTemplate(
    template_id="taxonomy_merge",
    user="""Below are reasoning strategy taxonomies discovered in independent rounds of analysis on the same set of model reasoning traces. Many strategies across rounds describe the same underlying analytical pattern in different words.

{ROUNDS_BLOCK}

Merge these into a single deduplicated taxonomy.
- Merge strategies that describe the SAME analytical method, even if worded differently. Keep the clearest analysis.
- Keep strategies that are genuinely distinct - do not force-merge strategies that differ in analytical approach just because they sound vaguely similar.
- If a strategy from one round is a sub-case of a broader one, keep the broader one and note the sub-case in its analysis.

Output the merged taxonomy:

<STRATEGY id="N">
Analysis: [Merged analysis. Note which round entries were merged.]
Label: [3-6 word name]
</STRATEGY>

Output as many strategies as the data warrants.""",
)

ROLLOUT_CLASSIFICATION = PromptTemplate(
    template_id="rollout_classification",
    user="""<TASK>
{TASK_DESCRIPTION}
</TASK>

Reasoning strategies:

{TAXONOMY}

Reasoning trace to classify:

{REASONING}

Which strategy does this trace primarily use? Output ONLY the strategy id (a number), or "OTHER" if none fits well.""",
)

CLUSTER_RULE_SYNTHESIS = PromptTemplate(
    template_id="cluster_rule_synthesis",
    user="""You are an expert at {CLASSIFICATION_TASK}.

The rulebook below works well on most inputs but misses some hard examples - a teacher applying it reasons incorrectly, while an RL-trained model reasons correctly on the same inputs. Your task: propose ONE new rule that complements the rulebook.

<EXISTING_RULES>
{EXISTING_RULES}
</EXISTING_RULES>

Paired traces below show (teacher-incorrect, RL-correct) on the same inputs, grouped because the correct reasoning shares a strategy.

<PAIRED_REASONING_TRACES>
{ROLLOUT_ENTRIES}
</PAIRED_REASONING_TRACES>

Treat rollouts whose gold label is {RULE_LABEL} as positive evidence (rule should fire) and rollouts whose gold label is anything else as negative evidence (rule should NOT fire). If you cannot identify a coherent pattern that supports label={RULE_LABEL} - including the case where the pattern actually points to a different label - output ONLY:
SKIP: insufficient signal for label={RULE_LABEL}

Otherwise, generate ONE compact rule predicting label={RULE_LABEL}, with:
- Trigger: the specific features the correct reasoning used.
- Exceptions: the specific mistakes the incorrect reasoning made (2-3 bullets).
- One concrete source-text example.

Output (the first line inside <RULE_DESCRIPTION> MUST be exactly Rule Label: {RULE_LABEL} - numeric, no text alias; downstream tooling parses this line):

<RULE_NAME>[name]</RULE_NAME>

<RULE_DESCRIPTION>
Rule Label: {RULE_LABEL}
[body]
</RULE_DESCRIPTION>""",
)

RULE_EQUIVALENCE = PromptTemplate(
    template_id="rule_equivalence",
    user="""Two candidate classification rules are shown below. Both are intended for the same task: {CLASSIFICATION_TASK}.

<RULE_1>
{RULE_1_BODY}
</RULE_1>

<RULE_2>
{RULE_2_BODY}
</RULE_2>

Question 1: Are these two rules semantically equivalent - would they fire on the same inputs and produce the same label? Answer strictly "YES" or "NO" on its own line.

Question 2 (ONLY if YES): Which rule is clearer, more general, or otherwise preferable to keep? Answer strictly one of "RULE_1", "RULE_2", or "EITHER" on its own line.

Output format (exactly two lines for YES, one line for NO):
LINE1: YES or NO
LINE2: RULE_1 or RULE_2 or EITHER   (only when LINE1 is YES)""",
)

JUDGE_GROUNDEDNESS = PromptTemplate(
    template_id="judge_groundedness",
    user="""You will be given an evidence excerpt. You will then be given a reasoning trace generated by an AI model that {task_description}.

Your task is to rate the reasoning on one metric. Please make sure you read and understand these instructions carefully. Please keep this document open while reviewing, and refer to it as needed.

Evaluation Criteria:

Groundedness (1-5) - the degree to which the reasoning's CONCLUSION (its predicted label / verdict) is directly tied to specific cited evidence from {evidence_phrase}.
Anchored scale:
  5 = Conclusion explicitly named AND directly tied to specific cited evidence. Multi-step reasoning chain to verdict.
  4 = Conclusion named and tied to at least one specific citation (section number, named reviewer/score, clinical value, named rule).
  3 = Conclusion stated but justified by general paraphrase or "broadly consistent" framing - no specific citation linking evidence to verdict.
  2 = Conclusion stated but weakly supported; reasoning relies on unstated assumptions.
  1 = At least one claim is refuted by {evidence_phrase}, OR the text contains no analytical claim leading to a verdict (bare lists, boilerplate, anonymization markers).

CALIBRATION (apply STRICTLY):
- Generic verdict-justification with no specific citation is anchor 3.
- Rule-attribution paired with concrete textual evidence tied to verdict counts as specific citation.
- Exclusion enumeration tied to verdict = anchor 4-5.
- Fragmented text is a 1.
APPLY THE RUBRIC STRICTLY.

Evaluation Steps:
1. Read {evidence_phrase} carefully and identify the specific facts.
2. Find the reasoning's CONCLUSION (predicted label / verdict).
3. Check whether the conclusion is DIRECTLY tied to specific cited evidence. General verdict-justification without specific citation = anchor 3.
4. Apply the CALIBRATION strictly.

Example:
Evidence: {source}
Reasoning: {reasoning}
Evaluation Form (scores ONLY):
- Groundedness:""",
)

JUDGE_FAITHFULNESS = PromptTemplate(
    template_id="judge_faithfulness",
    user="""You will be given {input}. You will then be given a reasoning trace generated by an AI model that {task_description}.

Your task is to rate the reasoning on one metric.

Please make sure you read and understand these instructions carefully. Please keep this document open while reviewing, and refer to it as needed.

Evaluation Criteria:

Faithfulness (1-5) - the factual alignment between the reasoning and {input}. A faithful reasoning's claims are all directly traceable to {input}, without going beyond what {input} establishes. Penalize reasonings that misread {input}, fabricate details, or rely on external knowledge not present in {input}.

Evaluation Steps:
1. Read {input} carefully and identify the facts it presents.
2. Read the reasoning and compare it to {input}. Check if the reasoning makes claims that go beyond, contradict, or misread {input}.
3. Assign a score for faithfulness based on the Evaluation Criteria.

Example:

Input:

{source}

Reasoning:

{reasoning}

Evaluation Form (scores ONLY):

- Faithfulness:""",
)

_ALL = (
    REASONING_WITH_RULES,
    REASONING_WITHOUT_RULES,
    LABEL_ONLY,
    RULE_CLASSIFIER,
    GRADIENT_EXCEPTIONS,
    GRADIENT_ERROR_PATTERN,
    RULE_UPDATE,
    RULE_SYNTHESIS,
    TAXONOMY_DISCOVERY,
    TAXONOMY_MERGE,
    ROLLOUT_CLASSIFICATION,
    CLUSTER_RULE_SYNTHESIS,
    RULE_EQUIVALENCE,
    JUDGE_GROUNDEDNESS,
    JUDGE_FAITHFULNESS,
)

TEMPLATES: dict[str, PromptTemplate] = {t.template_id: t for t in _ALL}


def get_template(template_id: str) -> PromptTemplate:
    try:
        return TEMPLATES[template_id]
    except KeyError:
        raise InvalidInputError(f"unknown template {template_id!r}") from None


def render(template_id: str, bindings: Mapping[str, str]) -> list[tuple[str, str]]:
    return get_template(template_id).render(bindings)


def rounds_block(round_outputs: list[str]) -> str:
    """Format per-round taxonomy outputs for the merge prompt."""
    parts = [f"Round {i}:\n{text}" for i, text in enumerate(round_outputs, start=1)]
    return "\n\n".join(parts)
