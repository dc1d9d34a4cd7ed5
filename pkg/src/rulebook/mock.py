"""Deterministic mock backend for offline, fully reproducible runs.

A MockScript maps template ids to scripted responses: static texts (optionally
gated on selected binding values) or handler callables. On top of that, this
module ships a small "token world" oracle: rule bodies written in a machine
checkable grammar ("the text mentions 'alpha'") are classified exactly, and
gradient/update/synthesis handlers close the optimization loop, which lets a
whole optimizer run execute end to end with zero network traffic.
"""

from __future__ import annotations

import re
import threading
from collections import Counter
from typing import Callable, Mapping, Optional, Union

from .errors import MockScriptError
from .gateway import ChatRequest, ChatResponse
from .labels import LabelSpace

Handler = Callable[[Mapping[str, str], ChatRequest], Union[str, ChatResponse]]


class MockScript:
    """Scripted responses keyed by (template_id, selected bindings)."""

    def __init__(self):
        self._static: dict[str, list[tuple[Optional[dict], str]]] = {}
        self._handlers: dict[str, Handler] = {}
        self.calls: Counter = Counter()
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    def add_response(self, template_id: str, text: str, when: Optional[dict] = None) -> "MockScript":
        self._static.setdefault(template_id, []).append((when, text))
        return self

    def add_handler(self, template_id: str, fn: Handler) -> "MockScript":
        self._handlers[template_id] = fn
        return self

    @property
    def total_calls(self) -> int:
        return sum(self.calls.values())

    def respond(self, request: ChatRequest) -> ChatResponse:
        template_id = request.template_id
        if template_id is None:
            raise MockScriptError("mock backend received a request without a template_id")
        with self._lock:
            self.calls[template_id] += 1
            self.requests.append(request)
        bindings = dict(request.bindings or {})
        for when, text in self._static.get(template_id, []):
            if when is None:
                continue
            if all(bindings.get(k) == v for k, v in when.items()):
                return ChatResponse(content=text)
        if template_id in self._handlers:
            result = self._handlers[template_id](bindings, request)
            return result if isinstance(result, ChatResponse) else ChatResponse(content=result)
        for when, text in self._static.get(template_id, []):
            if when is None:
                return ChatResponse(content=text)
        raise MockScriptError(f"no scripted response for template {template_id!r}")


class MockBackend:
    """Backend adapter over a MockScript, with optional fault injection."""

    def __init__(self, script: MockScript, fail_first: int = 0, failure: Optional[Exception] = None):
        self.script = script
        self._remaining_failures = fail_first
        self._failure = failure
        self._lock = threading.Lock()

    def send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            if self._remaining_failures > 0:
                self._remaining_failures -= 1
                raise self._failure or MockScriptError("injected failure")
        return self.script.respond(request)


# ---------------------------------------------------------------------------
# Token-world oracle: exact rule semantics over a quoted-token grammar.

_QUOTED = re.compile(r"'([^']+)'")


def rule_tokens(rule_text: str) -> tuple[list[str], list[str]]:
    """Extract (trigger, exception) tokens from a token-world rule body."""
    triggers: list[str] = []
    exceptions: list[str] = []
    section = None
    for line in rule_text.splitlines():
        stripped = line.strip()
        low = stripped.lower()
        if low.startswith("trigger pattern:"):
            section = "trigger"
        elif low.startswith("exceptions:"):
            section = "exceptions"
        elif low.startswith(("examples", "example")):
            section = None
        if section == "trigger":
            triggers.extend(_QUOTED.findall(stripped))
        elif section == "exceptions":
            exceptions.extend(t for t in _QUOTED.findall(stripped) if t not in triggers)
    return triggers, exceptions


def token_rule_body(trigger: str, exceptions: tuple[str, ...] = ()) -> str:
    lines = [f"Trigger Pattern: the text mentions '{trigger}'.", "Exceptions:"]
    lines += [f"- not when the text mentions '{token}'." for token in exceptions]
    lines += ["Examples", "Source text: none"]
    return "\n".join(lines)


def token_oracle_fires(rule_text: str, report: str) -> bool:
    triggers, exceptions = rule_tokens(rule_text)
    words = set(report.split())
    if not triggers or not any(t in words for t in triggers):
        return False
    return not any(t in words for t in exceptions)


def firing_response(fired: bool, fire_token: str, abstain_token: str) -> str:
    verdict = fire_token if fired else abstain_token
    return f"REASONING:\nchecked the trigger and exception tokens.\n\nFINAL PREDICTION: {verdict}"


def reasoning_response(label_display: str, reasoning: str = "token check") -> str:
    return f"REASONING:\n{reasoning}\n\nLABEL: {label_display}"


def token_world_script(space: LabelSpace) -> MockScript:
    """Wire all optimizer-facing templates to the token-world oracle.

    - rule_classifier: fires iff a trigger token is present and no exception
      token is, exactly as rule_tokens() reads the body.
    - gradient_exceptions: proposes excluding the first report token that is
      not already a trigger or exception of the offending rule.
    - gradient_error_pattern: echoes the missed example's text so synthesis
      can mine it.
    - rule_update: re-emits the rule with the proposed exception tokens added.
    - rule_synthesis: counts tokens across error patterns and emits one rule
      per most frequent token (capped at MAX_NEW_RULES), ties broken
      alphabetically.
    """
    script = MockScript()

    def classify(bindings, request):
        fired = token_oracle_fires(bindings["rule_text"], bindings["report"])
        return firing_response(fired, bindings["RULE_LABEL"], bindings["ABSTAIN"])

    def gradient_exceptions(bindings, request):
        triggers, exceptions = rule_tokens(bindings["RULE"])
        known = set(triggers) | set(exceptions)
        candidates = sorted(w for w in bindings["REPORT"].split() if w not in known)
        bullets = [f"- not when the text mentions '{candidates[0]}'."] if candidates else []
        body = "\n".join(bullets)
        return f"analysis: the rule fired on a counterexample.\nexceptions:\n{body}"

    def gradient_error_pattern(bindings, request):
        return (
            "summary: uncovered pattern in the report.\n"
            "points:\n"
            f"- text: {bindings['REPORT']}"
        )

    def update_rule(bindings, request):
        triggers, exceptions = rule_tokens(bindings["RULE"])
        new_tokens = []
        for line in bindings["EXCEPTIONS"].splitlines():
            new_tokens.extend(_QUOTED.findall(line))
        merged = list(exceptions) + [t for t in new_tokens if t not in exceptions and t not in triggers]
        trigger = triggers[0] if triggers else "nothing"
        name = f"restricted '{trigger}' rule v{len(merged)}"
        body = token_rule_body(trigger, tuple(merged))
        return f"<RULE_NAME>{name}</RULE_NAME>\n<RULE_DESCRIPTION>\n{body}\n</RULE_DESCRIPTION>"

    def synthesize(bindings, request):
        counts: Counter = Counter()
        for line in bindings["ERROR_PATTERNS"].splitlines():
            stripped = line.strip()
            if stripped.startswith("- text:"):
                counts.update(stripped[len("- text:"):].split())
        max_new = int(bindings["MAX_NEW_RULES"])
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        blocks = []
        for token, _ in ranked[:max_new]:
            body = token_rule_body(token)
            blocks.append(
                f"<RULE_NAME>mentions '{token}' rule</RULE_NAME>\n"
                f"<RULE_DESCRIPTION>\n{body}\n</RULE_DESCRIPTION>"
            )
        return "\n\n".join(blocks) if blocks else "no pattern found"

    script.add_handler("rule_classifier", classify)
    script.add_handler("gradient_exceptions", gradient_exceptions)
    script.add_handler("gradient_error_pattern", gradient_error_pattern)
    script.add_handler("rule_update", update_rule)
    script.add_handler("rule_synthesis", synthesize)
    return script
