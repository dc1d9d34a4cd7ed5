"""Parsers for every model output grammar used in the pipeline.

All parsers are total: any input string yields either a value or a
ParseFailure, never an exception (judge scoring is the one exception and
raises UnscoreableError when no score token is present).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from .errors import UnscoreableError
from .labels import LabelSpace

# ParseFailure reasons
MISSING_LABEL_HEADER = "missing-label-header"
LABEL_NOT_IN_SPACE = "label-not-in-space"
MALFORMED_RULE_BLOCK = "malformed-rule-block"
MISSING_FINAL_PREDICTION = "missing-final-prediction"


@dataclass(frozen=True)
class ParseFailure:
    reason: str
    raw: str

    def excerpt(self, limit: int = 120) -> str:
        text = self.raw.replace("\n", "\\n")
        return text if len(text) <= limit else text[:limit] + "..."


@dataclass(frozen=True)
class ParsedReasoning:
    reasoning: str
    label: str


# Rule firing verdicts
FIRED = "fired"
ABSTAIN = "abstain"

_REASONING_RE = re.compile(r"^\s*REASONING:", re.MULTILINE)
_LABEL_RE = re.compile(r"^\s*LABEL:(.*)$", re.MULTILINE)
_FINAL_RE = re.compile(r"^\s*FINAL PREDICTION:(.*)$", re.MULTILINE)


def parse_reasoning_label(text: str, space: LabelSpace) -> Union[ParsedReasoning, ParseFailure]:
    """Extract (reasoning, label) from a REASONING:/LABEL: formatted answer.

    The reasoning is everything between the REASONING: header and the LABEL:
    header. The label value is matched case-insensitively against the label
    space, also accepting a defined integer alias.
    """
    m_reason = _REASONING_RE.search(text)
    if not m_reason:
        return ParseFailure(MISSING_LABEL_HEADER, text)
    m_label = _LABEL_RE.search(text, m_reason.end())
    if not m_label:
        return ParseFailure(MISSING_LABEL_HEADER, text)
    reasoning = text[m_reason.end():m_label.start()].strip()
    label = space.match(m_label.group(1))
    if label is None:
        return ParseFailure(LABEL_NOT_IN_SPACE, text)
    return ParsedReasoning(reasoning=reasoning, label=label)


def parse_firing(
    text: str,
    rule_label: str,
    abstain_token: str = "ABSTAIN",
    space: Optional[LabelSpace] = None,
) -> Union[str, ParseFailure]:
    """Read the FINAL PREDICTION: value as FIRED, ABSTAIN, or a failure.

    ``rule_label`` is the rule's target label; its integer alias (when the
    space defines one) is accepted interchangeably. The last header wins so
    that the model's step-by-step reasoning cannot shadow the verdict.
    """
    matches = _FINAL_RE.findall(text)
    if not matches:
        return ParseFailure(MISSING_FINAL_PREDICTION, text)
    value = matches[-1].strip()
    if not value:
        return ParseFailure(MISSING_FINAL_PREDICTION, text)
    fire_tokens = {rule_label.lower()}
    if space is not None and rule_label in space.aliases:
        fire_tokens.add(str(space.aliases[rule_label]))
    if value.lower() in fire_tokens:
        return FIRED
    if value.lower() == abstain_token.lower():
        return ABSTAIN
    return ParseFailure(LABEL_NOT_IN_SPACE, text)


@dataclass(frozen=True)
class RuleDraft:
    """A parsed candidate rule before it receives a pool id."""

    name: str
    body: str


_RULE_BLOCK_RE = re.compile(
    r"<RULE_NAME>(.*?)</RULE_NAME>\s*<RULE_DESCRIPTION>(.*?)</RULE_DESCRIPTION>",
    re.DOTALL,
)


def parse_rule_candidates(text: str) -> Union[list[RuleDraft], ParseFailure]:
    """Extract every well-formed rule block in document order."""
    drafts = []
    for name, body in _RULE_BLOCK_RE.findall(text):
        name = " ".join(name.split())
        body = body.strip("\n")
        if name and body.strip():
            drafts.append(RuleDraft(name=name, body=body))
    if not drafts:
        return ParseFailure(MALFORMED_RULE_BLOCK, text)
    return drafts


_BULLET_RE = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*(.*\S)\s*$")


def parse_field_bullets(text: str, prose_field: str, list_field: str) -> tuple[str, list[str]]:
    """Parse the structured-field gradient convention.

    The response carries a prose field (e.g. ``analysis:``) followed by a
    bulleted list field (e.g. ``exceptions:``). Returns the prose text and
    the stripped bullet strings; either may be empty.
    """
    lines = text.splitlines()
    prose_parts: list[str] = []
    bullets: list[str] = []
    mode = None
    prose_hdr = prose_field.lower() + ":"
    list_hdr = list_field.lower() + ":"
    for line in lines:
        stripped = line.strip()
        low = stripped.lower()
        if low.startswith(prose_hdr):
            mode = "prose"
            rest = stripped[len(prose_hdr):].strip()
            if rest:
                prose_parts.append(rest)
            continue
        if low.startswith(list_hdr):
            mode = "list"
            continue
        if mode == "prose":
            prose_parts.append(line.rstrip())
        elif mode == "list":
            m = _BULLET_RE.match(line)
            if m:
                bullets.append(m.group(1))
            elif stripped:
                # a non-bullet line ends the list field
                mode = None
    return "\n".join(prose_parts).strip(), bullets


@dataclass(frozen=True)
class StrategyBlock:
    id: str
    label: str
    analysis: str


_STRATEGY_RE = re.compile(r'<STRATEGY id="(\d+)">(.*?)</STRATEGY>', re.DOTALL)
_STRATEGY_LABEL_RE = re.compile(r"^\s*Label:\s*(.+?)\s*$", re.MULTILINE)
_STRATEGY_ANALYSIS_RE = re.compile(r"Analysis:\s*(.*?)(?=^\s*Label:|\Z)", re.DOTALL | re.MULTILINE)


def parse_strategies(text: str) -> list[StrategyBlock]:
    """Extract well-formed <STRATEGY id="N"> blocks; malformed ones are dropped."""
    out = []
    for sid, inner in _STRATEGY_RE.findall(text):
        m_label = _STRATEGY_LABEL_RE.search(inner)
        m_analysis = _STRATEGY_ANALYSIS_RE.search(inner)
        if not m_label:
            continue
        analysis = m_analysis.group(1).strip() if m_analysis else ""
        out.append(StrategyBlock(id=sid, label=m_label.group(1), analysis=analysis))
    return out


def parse_cluster_id(text: str, valid_ids: Sequence[str]) -> tuple[str, bool]:
    """Resolve a strategy-classification answer to an id or OTHER.

    Returns (cluster, in_range). Out-of-range numeric ids map to OTHER with
    in_range False so callers can warn; anything unparseable is OTHER too.
    """
    token = text.strip().strip('"').strip()
    if token.upper() == "OTHER":
        return "OTHER", True
    m = re.search(r"\d+", token)
    if m:
        sid = m.group(0)
        if sid in valid_ids:
            return sid, True
        return "OTHER", False
    return "OTHER", False


def parse_equivalence_verdict(text: str) -> tuple[bool, Optional[str]]:
    """Parse the pairwise rule-equivalence judge output.

    Returns (equivalent, preference) where preference is RULE_1, RULE_2 or
    EITHER when equivalent. Unparseable verdicts are treated as NO.
    """
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    verdict = None
    pref = None
    for ln in lines:
        cleaned = re.sub(r"^LINE\d+:\s*", "", ln, flags=re.IGNORECASE).strip().upper()
        if verdict is None and cleaned in ("YES", "NO"):
            verdict = cleaned
            continue
        if verdict == "YES" and pref is None and cleaned in ("RULE_1", "RULE_2", "EITHER"):
            pref = cleaned
    if verdict == "YES" and pref is not None:
        return True, pref
    return False, None


def judge_expected_score(probs: Sequence[tuple[str, float]]) -> float:
    """Expected 1..5 rating from an answer-position token distribution.

    Filters to the score tokens "1".."5", renormalizes their probabilities,
    and returns the expectation. Raises UnscoreableError when no score token
    appears.
    """
    mass: dict[int, float] = {}
    for token, p in probs:
        token = token.strip()
        if token in ("1", "2", "3", "4", "5"):
            mass[int(token)] = mass.get(int(token), 0.0) + float(p)
    total = sum(mass.values())
    if total <= 0.0:
        raise UnscoreableError("no score token in the answer-position distribution")
    return sum(i * p for i, p in sorted(mass.items())) / total


def answer_position_probs(
    top_logprobs: Optional[Sequence[Sequence[tuple[str, float]]]],
) -> Optional[list[tuple[str, float]]]:
    """Pick the first generated position whose top-k contains a score token."""
    if not top_logprobs:
        return None
    for position in top_logprobs:
        for token, _ in position:
            if token.strip() in ("1", "2", "3", "4", "5"):
                return [(t, p) for t, p in position]
    return None
