"""Chat-completion access: scripted, recording and live HTTP backends."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol

import httpx

from .core import AgentRole, digest
from .errors import BudgetExceeded, FixtureMissError, ProtocolError, TransportError
from .prompts import SYSTEM_PROMPTS

log = logging.getLogger(__name__)

ENV_URL = "HYPOFORGE_LLM_URL"
ENV_KEY = "HYPOFORGE_LLM_KEY"
ENV_MODEL = "HYPOFORGE_LLM_MODEL"
RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_prompt: str
    temperature: float = 0.3
    seed: int | None = 42
    max_tokens: int | None = None
    role: AgentRole | None = None

    def __post_init__(self):
        if not self.user_prompt.strip():
            raise ValueError("user_prompt must be nonempty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")

    @property
    def digest(self) -> str:
        role = self.role.value if self.role else ""
        return digest(role, self.system_prompt, self.user_prompt)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    tokens_in: int = 0
    tokens_out: int = 0
    retries: int = 0

    def __post_init__(self):
        if self.tokens_in < 0 or self.tokens_out < 0:
            raise ValueError("token counts must be >= 0")


class Backend(Protocol):
    def chat(self, request: ChatRequest) -> ChatResponse: ...


def count_tokens(text: str) -> int:
    """Whitespace token count used by the offline backends."""
    return len(text.split())


class ScriptedBackend:
    """Replays fixture responses keyed by request digest.

    A fixture directory holds one ``<digest>.json`` file per response with
    keys ``response`` and optionally ``role``, ``tokens_in``, ``tokens_out``.
    """

    def __init__(self, fixtures: Mapping[str, Mapping]):
        self._fixtures = dict(fixtures)

    @classmethod
    def from_dir(cls, path: str | Path) -> "ScriptedBackend":
        fixtures = {}
        for file in sorted(Path(path).glob("*.json")):
            fixtures[file.stem] = json.loads(file.read_text(encoding="utf-8"))
        return cls(fixtures)

    def __len__(self) -> int:
        return len(self._fixtures)

    def chat(self, request: ChatRequest) -> ChatResponse:
        key = request.digest
        entry = self._fixtures.get(key)
        if entry is None:
            role = request.role.value if request.role else "?"
            raise FixtureMissError(f"no scripted response for {role} prompt digest {key[:16]}")
        text = entry["response"]
        return ChatResponse(
            text,
            int(entry.get("tokens_in", count_tokens(request.system_prompt + " " + request.user_prompt))),
            int(entry.get("tokens_out", count_tokens(text))),
        )


@dataclass(frozen=True)
class Rule:
    role: AgentRole
    response: str
    contains: tuple[str, ...] = ()

    def matches(self, request: ChatRequest) -> bool:
        return request.role is self.role and all(s in request.user_prompt for s in self.contains)


class RuleBackend:
    """Answers by the first rule whose role matches and whose substrings all occur.

    Used to author scenarios; record them with RecordingBackend to obtain
    digest-keyed fixtures.
    """

    def __init__(self, rules: Iterable[Rule]):
        self.rules = list(rules)

    @classmethod
    def from_json(cls, path: str | Path) -> "RuleBackend":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = []
        for item in data["rules"]:
            contains = item.get("contains", ())
            if isinstance(contains, str):
                contains = (contains,)
            response = item["response"]
            if isinstance(response, list):
                response = "\n".join(response)
            rules.append(Rule(AgentRole(item["role"]), response, tuple(contains)))
        return cls(rules)

    def chat(self, request: ChatRequest) -> ChatResponse:
        for rule in self.rules:
            if rule.matches(request):
                return ChatResponse(
                    rule.response,
                    count_tokens(request.system_prompt + " " + request.user_prompt),
                    count_tokens(rule.response),
                )
        role = request.role.value if request.role else "?"
        raise FixtureMissError(f"no rule matches {role} prompt digest {request.digest[:16]}")


class RecordingBackend:
    """Passes requests to ``inner`` and writes each response as a digest fixture."""

    def __init__(self, inner: Backend, out_dir: str | Path):
        self.inner = inner
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def chat(self, request: ChatRequest) -> ChatResponse:
        resp = self.inner.chat(request)
        entry = {
            "role": request.role.value if request.role else None,
            "response": resp.text,
            "tokens_in": resp.tokens_in,
            "tokens_out": resp.tokens_out,
        }
        with self._lock:
            path = self.out_dir / f"{request.digest}.json"
            path.write_text(json.dumps(entry, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
        return resp


class HttpBackend:
    """Chat-completions over HTTP+JSON with exponential-backoff retries."""

    def __init__(
        self,
        url: str,
        api_key: str,
        model: str = "gpt-4.1",
        *,
        max_attempts: int = 5,
        backoff: float = 0.5,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.url = url
        self.api_key = api_key
        self.model = model
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.client = client or httpx.Client(timeout=timeout)
        self.sleep = sleep

    @classmethod
    def from_env(cls, **kwargs) -> "HttpBackend":
        url, key = os.environ.get(ENV_URL), os.environ.get(ENV_KEY)
        if not url or not key:
            raise TransportError(f"live mode needs {ENV_URL} and {ENV_KEY} to be set")
        return cls(url, key, os.environ.get(ENV_MODEL, "gpt-4.1"), **kwargs)

    def _payload(self, request: ChatRequest) -> dict:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        if request.max_tokens is not None:
            payload["max_tokens"] = request.max_tokens
        return payload

    def chat(self, request: ChatRequest) -> ChatResponse:
        headers = {"Authorization": f"Bearer {self.api_key}"}
        payload = self._payload(request)
        last = "no attempt made"
        for attempt in range(self.max_attempts):
            try:
                resp = self.client.post(self.url, json=payload, headers=headers)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code == 200:
                    return self._parse(resp, retries=attempt)
                if resp.status_code not in RETRY_STATUS:
                    raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                last = f"HTTP {resp.status_code}"
            if attempt + 1 < self.max_attempts:
                delay = self.backoff * 2**attempt
                log.info("retrying chat request after %s (attempt %d, sleeping %.2fs)", last, attempt + 1, delay)
                self.sleep(delay)
        raise TransportError(f"chat request failed after {self.max_attempts} attempts: {last}")

    @staticmethod
    def _parse(resp: httpx.Response, retries: int) -> ChatResponse:
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
            usage = data.get("usage") or {}
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed chat-completions reply: {exc!r}") from None
        if not isinstance(text, str):
            raise ProtocolError("chat-completions reply content is not a string")
        return ChatResponse(
            text,
            int(usage.get("prompt_tokens", 0)),
            int(usage.get("completion_tokens", 0)),
            retries,
        )


def complete(backend: Backend, request: ChatRequest) -> ChatResponse:
    return backend.chat(request)


class RateLimiter:
    """Spaces acquisitions so that at most ``rate`` units pass per ``per`` seconds.

    Thread-safe; each caller reserves its slot under the lock and sleeps
    outside it.
    """

    def __init__(
        self,
        rate: float,
        per: float = 1.0,
        *,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.interval = per / rate
        self.clock = clock
        self.sleep = sleep
        self._next = float("-inf")
        self._lock = threading.Lock()

    def acquire(self, amount: float = 1.0) -> float:
        with self._lock:
            now = self.clock()
            start = max(now, self._next)
            self._next = start + amount * self.interval
        wait = start - now
        if wait > 0:
            self.sleep(wait)
        return wait


def budget_guard(used: int, limit: int | None, projected: int = 0) -> bool:
    """True to proceed, False to halt once usage would pass ``limit``."""
    if limit is None:
        return True
    if limit <= 0:
        raise ValueError("limit must be positive")
    return used + projected <= limit


@dataclass
class Usage:
    calls: int = 0
    tokens_in: int = 0
    tokens_out: int = 0
    retries: int = 0

    @property
    def total(self) -> int:
        return self.tokens_in + self.tokens_out


class Gateway:
    """A backend plus shared rate limits, a token budget and usage counters."""

    def __init__(
        self,
        backend: Backend,
        *,
        token_budget: int | None = None,
        request_limiter: RateLimiter | None = None,
        token_limiter: RateLimiter | None = None,
        seed: int | None = 42,
        temperature: float = 0.3,
        role_temperatures: Mapping[str, float] | None = None,
    ):
        self.backend = backend
        self.token_budget = token_budget
        self.request_limiter = request_limiter
        self.token_limiter = token_limiter
        self.seed = seed
        self.temperature = temperature
        self.role_temperatures = dict(role_temperatures or {})
        self.usage = Usage()
        self._lock = threading.Lock()

    def request(self, role: AgentRole, prompt: str, **overrides) -> ChatRequest:
        temperature = overrides.pop("temperature", self.role_temperatures.get(role.value, self.temperature))
        return ChatRequest(
            system_prompt=SYSTEM_PROMPTS[role],
            user_prompt=prompt,
            temperature=temperature,
            seed=overrides.pop("seed", self.seed),
            role=role,
            **overrides,
        )

    def complete(self, request: ChatRequest) -> ChatResponse:
        projected = count_tokens(request.user_prompt)
        with self._lock:
            used = self.usage.total
        if not budget_guard(used, self.token_budget, projected):
            raise BudgetExceeded(f"token budget {self.token_budget} would be exceeded ({used} used)")
        if self.request_limiter is not None:
            self.request_limiter.acquire()
        if self.token_limiter is not None:
            self.token_limiter.acquire(projected)
        resp = complete(self.backend, request)
        with self._lock:
            self.usage.calls += 1
            self.usage.tokens_in += resp.tokens_in
            self.usage.tokens_out += resp.tokens_out
            self.usage.retries += resp.retries
        return resp

    def ask(self, role: AgentRole, prompt: str, **overrides) -> tuple[ChatRequest, ChatResponse]:
        request = self.request(role, prompt, **overrides)
        return request, self.complete(request)


def load_backend(fixture_dir: str | Path) -> Backend:
    """Digest fixtures from ``responses/`` when present, else rules from ``rules.json``."""
    root = Path(fixture_dir)
    responses = root / "responses"
    if responses.is_dir() and any(responses.glob("*.json")):
        return ScriptedBackend.from_dir(responses)
    if (root / "rules.json").exists():
        return RuleBackend.from_json(root / "rules.json")
    if any(root.glob("*.json")):
        return ScriptedBackend.from_dir(root)
    raise FixtureMissError(f"no scripted fixtures under {root}")

