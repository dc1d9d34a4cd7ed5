"""Single choke point for all model traffic.

Every pipeline stage talks to a Gateway, which renders templates, consults a
content-addressed response cache, and forwards misses to a backend: either an
OpenAI-compatible chat-completions endpoint or a deterministic mock. The
cache key is the SHA-256 of the canonical request serialization, so repeated
identical requests (including the seed_tag that distinguishes stochastic
samples) cost exactly one backend call per process lifetime and per cache
directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence

from .errors import BackendError, InvalidInputError, ProtocolError
from .templates import get_template

logger = logging.getLogger(__name__)

CACHE_USE = "use"
CACHE_BYPASS = "bypass"


@dataclass(frozen=True)
class ChatRequest:
    """One single-turn chat completion request.

    ``seed_tag`` distinguishes repeated stochastic samples of the same prompt
    (teacher attempts, rollouts) that would otherwise collide in the cache.
    ``template_id`` and ``bindings`` are transport metadata for mock dispatch
    and audit; they are not part of the canonical form.
    """

    model: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    want_top_logprobs: Optional[int] = None
    seed_tag: Optional[str] = None
    template_id: Optional[str] = None
    bindings: Optional[Mapping[str, str]] = None

    def __post_init__(self):
        if not self.messages:
            raise InvalidInputError("a chat request needs at least one message")
        for role, _ in self.messages:
            if role not in ("system", "user"):
                raise InvalidInputError(f"unsupported message role {role!r}")
        if self.temperature < 0:
            raise InvalidInputError("temperature must be >= 0")

    def canonical_payload(self) -> dict:
        return {
            "model": self.model,
            "messages": [[role, content] for role, content in self.messages],
            "temperature": self.temperature,
            "want_top_logprobs": self.want_top_logprobs,
            "seed_tag": self.seed_tag,
        }

    def canonical(self) -> str:
        return json.dumps(self.canonical_payload(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    content: str
    # per selected position, a list of (token, probability) pairs
    top_logprobs: Optional[tuple[tuple[tuple[str, float], ...], ...]] = None

    def __post_init__(self):
        if self.top_logprobs is not None:
            frozen = tuple(tuple((t, float(p)) for t, p in pos) for pos in self.top_logprobs)
            for pos in frozen:
                for _, p in pos:
                    if not (0.0 <= p <= 1.0):
                        raise InvalidInputError(f"probability {p} outside [0, 1]")
                if sum(p for _, p in pos) > 1.0 + 1e-9:
                    raise InvalidInputError("listed probabilities sum above 1 before renormalization")
            object.__setattr__(self, "top_logprobs", frozen)

    def to_payload(self) -> dict:
        payload: dict = {"content": self.content}
        if self.top_logprobs is not None:
            payload["top_logprobs"] = [[[t, p] for t, p in pos] for pos in self.top_logprobs]
        return payload

    @classmethod
    def from_payload(cls, payload: dict) -> "ChatResponse":
        top = payload.get("top_logprobs")
        if top is not None:
            top = tuple(tuple((t, float(p)) for t, p in pos) for pos in top)
        return cls(content=payload["content"], top_logprobs=top)


def binding_digest(bindings: Mapping[str, str], keys: Optional[Sequence[str]] = None) -> str:
    """Stable digest of (selected) binding values, for mock scripts."""
    selected = {k: bindings[k] for k in (keys if keys is not None else sorted(bindings))}
    raw = json.dumps(selected, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()


class Backend(Protocol):
    def send(self, request: ChatRequest) -> ChatResponse: ...


class HttpBackend:
    """OpenAI-compatible chat-completions client.

    POSTs to ``{endpoint}/chat/completions`` with the API key taken from the
    named environment variable. Transport failures raise BackendError (the
    gateway retries those); malformed payloads raise ProtocolError (never
    retried).
    """

    def __init__(self, endpoint: str, api_key_env: str = "RULEBOOK_API_KEY", timeout: float = 120.0):
        self.endpoint = endpoint.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout

    def send(self, request: ChatRequest) -> ChatResponse:
        import requests

        payload = {
            "model": request.model,
            "messages": [{"role": role, "content": content} for role, content in request.messages],
            "temperature": request.temperature,
        }
        if request.want_top_logprobs:
            payload["logprobs"] = True
            payload["top_logprobs"] = request.want_top_logprobs
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        try:
            resp = requests.post(
                f"{self.endpoint}/chat/completions", json=payload, headers=headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise BackendError(f"transport failure: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise BackendError(f"backend returned HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise ProtocolError(f"backend returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            choice = body["choices"][0]
            content = choice["message"]["content"]
            top = None
            logprobs = choice.get("logprobs")
            if logprobs and logprobs.get("content"):
                top = tuple(
                    tuple(
                        (entry["token"], math.exp(entry["logprob"]))
                        for entry in position.get("top_logprobs", [])
                    )
                    for position in logprobs["content"]
                )
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed backend payload: {exc}") from exc
        if not isinstance(content, str):
            raise ProtocolError("backend payload carries no text content")
        return ChatResponse(content=content, top_logprobs=top)


class ResponseCache:
    """One file per entry under a cache directory, human-inspectable.

    The filename is the request digest; the file content carries the canonical
    request alongside the response. An in-memory layer fronts the directory
    (and is the whole cache when no directory is configured).
    """

    def __init__(self, directory: Optional[str | Path] = None):
        self.directory = Path(directory) if directory else None
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._memory: dict[str, ChatResponse] = {}
        self._lock = threading.Lock()

    def get(self, key: str) -> Optional[ChatResponse]:
        with self._lock:
            if key in self._memory:
                return self._memory[key]
        if self.directory:
            path = self.directory / f"{key}.json"
            if path.exists():
                entry = json.loads(path.read_text(encoding="utf-8"))
                response = ChatResponse.from_payload(entry["response"])
                with self._lock:
                    self._memory[key] = response
                return response
        return None

    def put(self, key: str, request: ChatRequest, response: ChatResponse) -> None:
        with self._lock:
            self._memory[key] = response
        if self.directory:
            entry = {"request": request.canonical_payload(), "response": response.to_payload()}
            path = self.directory / f"{key}.json"
            tmp = path.with_suffix(".json.tmp")
            tmp.write_text(json.dumps(entry, indent=2, ensure_ascii=False), encoding="utf-8")
            os.replace(tmp, path)


@dataclass
class GatewayStats:
    backend_calls: int = 0
    cache_hits: int = 0
    parse_failures: int = 0
    calls_by_template: Counter = field(default_factory=Counter)

    def snapshot(self) -> dict:
        return {
            "backend_calls": self.backend_calls,
            "cache_hits": self.cache_hits,
            "parse_failures": self.parse_failures,
            "calls_by_template": dict(self.calls_by_template),
        }


class Gateway:
    """Cacheable completion front door with bounded retries.

    Transport errors are retried with exponential backoff; protocol errors
    are not (a malformed payload will not heal on retry).
    """

    def __init__(
        self,
        backend: Backend,
        cache_dir: Optional[str | Path] = None,
        retries: int = 3,
        backoff: float = 0.5,
    ):
        self.backend = backend
        self.cache = ResponseCache(cache_dir)
        self.retries = retries
        self.backoff = backoff
        self.stats = GatewayStats()
        self._stats_lock = threading.Lock()

    def complete(self, request: ChatRequest, cache_policy: str = CACHE_USE) -> ChatResponse:
        if cache_policy not in (CACHE_USE, CACHE_BYPASS):
            raise InvalidInputError(f"unknown cache policy {cache_policy!r}")
        key = request.digest()
        if cache_policy == CACHE_USE:
            cached = self.cache.get(key)
            if cached is not None:
                with self._stats_lock:
                    self.stats.cache_hits += 1
                return cached
        response = self._send_with_retries(request)
        with self._stats_lock:
            self.stats.backend_calls += 1
            if request.template_id:
                self.stats.calls_by_template[request.template_id] += 1
        if cache_policy == CACHE_USE:
            self.cache.put(key, request, response)
        return response

    def call(
        self,
        template_id: str,
        bindings: Mapping[str, str],
        *,
        model: str,
        temperature: float = 0.0,
        seed_tag: Optional[str] = None,
        want_top_logprobs: Optional[int] = None,
        cache_policy: str = CACHE_USE,
    ) -> ChatResponse:
        """Render a template and complete it in one step."""
        messages = get_template(template_id).render(bindings)
        request = ChatRequest(
            model=model,
            messages=tuple(messages),
            temperature=temperature,
            want_top_logprobs=want_top_logprobs,
            seed_tag=seed_tag,
            template_id=template_id,
            bindings=dict(bindings),
        )
        return self.complete(request, cache_policy)

    def note_parse_failure(self) -> None:
        with self._stats_lock:
            self.stats.parse_failures += 1

    def _send_with_retries(self, request: ChatRequest) -> ChatResponse:
        attempts = max(1, self.retries)
        for attempt in range(1, attempts + 1):
            try:
                return self.backend.send(request)
            except BackendError as exc:
                if attempt == attempts:
                    raise
                delay = self.backoff * (2 ** (attempt - 1))
                logger.warning("backend error (attempt %d/%d): %s; retrying in %.2fs", attempt, attempts, exc, delay)
                if delay > 0:
                    time.sleep(delay)
        raise AssertionError("unreachable")
