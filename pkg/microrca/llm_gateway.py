"""
Chat-completion gateway shared by every pipeline stage.

Providers only know how to send one request. The gateway adds retries with
exponential backoff, a global cap on in-flight requests and a JSONL call
log. MockProvider answers offline and deterministically.
"""

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import Counter, deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Deque, Dict, Iterator, List, Mapping, Optional, Union

import backoff
import httpx

from .enums import MockMode
from .error import (AuthError, LlmError, LlmExhausted, PayloadTooLarge,
                    TransientLlmError, UnknownTag)
from .resources import FORMAT_CORRECTION

LOGGER = logging.getLogger(__name__)

PROVIDERS = ("mock", "http")
# call records kept in memory; the JSONL call log has all of them
RECENT_CALLS = 256


@dataclass(frozen=True)
class LlmRequest:
    prompt: str
    tag: str
    max_output_tokens: int = 1024
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must not be empty")


@dataclass(frozen=True)
class LlmConfig:
    provider: str = "mock"
    endpoint_url: str = "https://api.openai.com/v1/chat/completions"
    model_name: str = "gpt-4o-mini"
    api_key_env: str = "MRCA_API_KEY"
    max_retries: int = 3
    backoff_base_ms: int = 500
    max_concurrent_requests: int = 4
    timeout_s: float = 120.0
    max_output_tokens: int = 2048
    temperature: float = 0.0
    max_prompt_chars: int = 200_000
    mock_mode: MockMode = MockMode.DEFAULT
    mock_fail_count: int = 0

    def __post_init__(self) -> None:
        if self.provider not in PROVIDERS:
            raise ValueError(f"provider must be one of {PROVIDERS}, got '{self.provider}'")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.max_concurrent_requests < 1:
            raise ValueError(
                f"max_concurrent_requests must be >= 1, got {self.max_concurrent_requests}"
            )
        if self.backoff_base_ms < 0:
            raise ValueError(f"backoff_base_ms must be >= 0, got {self.backoff_base_ms}")
        object.__setattr__(self, "mock_mode", MockMode(self.mock_mode))


def retry_delays(config: LlmConfig) -> List[float]:
    """Seconds slept before each retry: base, 2 x base, 4 x base, ..."""
    gen = backoff.expo(factor=config.backoff_base_ms / 1000)
    next(gen)  # backoff primes its wait generators with a None
    return [next(gen) for _ in range(config.max_retries)]


def _wait_schedule(delays: List[float]) -> Iterator[Optional[float]]:
    """backoff wait generator replaying a precomputed list of delays."""
    yield None
    yield from delays


class HttpProvider:
    """POSTs chat-completions requests with httpx."""

    def __init__(self, config: LlmConfig, client: httpx.Client = None) -> None:
        self.config = config
        self._owns_client = client is None
        self.client = client or httpx.Client(timeout=config.timeout_s)

    def close(self) -> None:
        if self._owns_client:
            self.client.close()

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_env, "").strip()
        if not key:
            raise AuthError(f"Environment variable {self.config.api_key_env} is not set")
        return key

    def complete(self, request: LlmRequest) -> str:
        headers = {
            "Authorization": f"Bearer {self._api_key()}",
            "Content-Type": "application/json",
        }
        body = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        try:
            r = self.client.post(self.config.endpoint_url, headers=headers, json=body)
        except httpx.TransportError as e:
            raise TransientLlmError(f"{type(e).__name__}: {e}") from e

        if r.status_code in (401, 403):
            raise AuthError(f"Provider rejected the credentials (HTTP {r.status_code})")
        if r.status_code == 413:
            raise PayloadTooLarge(f"Provider rejected a {len(request.prompt)} character prompt")
        if r.status_code == 429 or r.status_code >= 500:
            raise TransientLlmError(f"HTTP {r.status_code} from provider")
        if r.status_code >= 400:
            raise LlmError(f"HTTP {r.status_code} from provider: {r.text[:200]}")
        try:
            return r.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise TransientLlmError(f"Malformed completion body: {e}") from e


_ENTITY = re.compile(r'"(?:node|pod)":\s*"([^"]+)"')
_SUSPECT_PATTERNS = (
    re.compile(r"most affected entity: ([\w.\-]+)"),
    re.compile(r"child_pod: ([\w.\-]+)"),
    re.compile(r"pod_name: ([\w.\-]+)"),
)

MOCK_SCRIPT: Dict[str, str] = {
    "stage1": "Service level changes, most affected entity: {top_entity}. "
              "Entities with changes: {entities}. Payload digest {digest}.",
    "stage2": "Infrastructure changes, most affected entity: {top_entity}. "
              "Entities with changes: {entities}. Payload digest {digest}.",
    "rca": '{"component": "{suspect}", '
           '"reason": "{suspect} shows the strongest anomaly in the evidence", '
           '"reasoning_trace": "1. evidence digest {digest}. 2. {suspect} ranks first."}',
}

MALFORMED_TEXT = "The evidence suggests a problem somewhere in the call chain, {suspect} looks involved."

# tags whose answers are JSON verdicts, and so can be served malformed
JSON_TAGS = ("rca",)


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def _suspect(prompt: str) -> str:
    for pattern in _SUSPECT_PATTERNS:
        for match in pattern.finditer(prompt):
            if match.group(1) != "none":
                return match.group(1)
    return "unknown"


def _fill(template: str, values: Mapping[str, str]) -> str:
    for key, value in values.items():
        template = template.replace("{" + key + "}", value)
    return template


class MockProvider:
    """Deterministic offline provider.

    Answers come from a tag -> template script. Templates may use {tag},
    {digest} (of the prompt), {entities} and {top_entity} (node and pod
    names found in a JSON payload) and {suspect} (the entity the evidence
    names first).
    """

    def __init__(self, script: Mapping[str, str] = None, mode: MockMode = MockMode.DEFAULT,
                 fail_count: int = 0, strict: bool = False, latency_s: float = 0.0) -> None:
        self.script = dict(MOCK_SCRIPT if script is None else script)
        self.mode = MockMode(mode)
        self.fail_count = fail_count
        self.strict = strict
        self.latency_s = latency_s
        self.calls: List[str] = []
        self.in_flight = 0
        self.max_in_flight = 0
        self._failures = 0
        self._lock = threading.Lock()

    def _render(self, request: LlmRequest) -> str:
        template = self.script.get(request.tag)
        if template is None:
            if self.strict:
                raise UnknownTag(f"No mock response scripted for tag '{request.tag}'")
            template = "mock answer for {tag} ({digest})"
        entities = list(dict.fromkeys(_ENTITY.findall(request.prompt)))
        values = {
            "tag": request.tag,
            "digest": _digest(request.prompt),
            "entities": ", ".join(entities) or "none",
            "top_entity": entities[0] if entities else "none",
            "suspect": _suspect(request.prompt),
        }
        if request.tag in JSON_TAGS and (
                self.mode is MockMode.ALWAYS_MALFORMED
                or (self.mode is MockMode.MALFORMED_ONCE and FORMAT_CORRECTION not in request.prompt)):
            template = MALFORMED_TEXT
        return _fill(template, values)

    def complete(self, request: LlmRequest) -> str:
        with self._lock:
            self.calls.append(request.tag)
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            fail = self.mode is MockMode.FAIL_N and self._failures < self.fail_count
            if fail:
                self._failures += 1
        try:
            if self.latency_s:
                time.sleep(self.latency_s)
            if fail:
                raise TransientLlmError(f"Injected failure {self._failures}/{self.fail_count}")
            return self._render(request)
        finally:
            with self._lock:
                self.in_flight -= 1


def build_provider(config: LlmConfig):
    if config.provider == "mock":
        return MockProvider(mode=config.mock_mode, fail_count=config.mock_fail_count)
    return HttpProvider(config)


@dataclass
class CallRecord:
    tag: str
    model: str
    attempts: int
    latency_ms: int
    status: str
    prompt_chars: int
    response_chars: int = 0
    error: Optional[str] = None


class LlmGateway:
    """Thread-safe entry point for completions, shared by all workers."""

    def __init__(self, config: LlmConfig, provider=None,
                 call_log: Union[str, Path, None] = None) -> None:
        self.config = config
        self.provider = provider if provider is not None else build_provider(config)
        self.call_log = Path(call_log) if call_log else None
        self._slots = threading.BoundedSemaphore(config.max_concurrent_requests)
        self._log_lock = threading.Lock()
        self.records: Deque[CallRecord] = deque(maxlen=RECENT_CALLS)
        self.status_counts: Counter = Counter()

    def __enter__(self) -> "LlmGateway":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self.status_counts:
            LOGGER.info(
                "LLM calls: %s",
                ", ".join(f"{n} {status}" for status, n in sorted(self.status_counts.items())),
            )
        close = getattr(self.provider, "close", None)
        if close is not None:
            close()

    def _send(self, request: LlmRequest) -> str:
        with self._slots:
            return self.provider.complete(request)

    def _log_backoff(self, details: dict) -> None:
        LOGGER.warning(
            "LLM call '%s' failed (attempt %d), retrying in %.2fs",
            details["args"][0].tag, details["tries"], details["wait"],
        )

    def complete(self, request: LlmRequest) -> str:
        attempts = 0

        def attempt(req: LlmRequest) -> str:
            nonlocal attempts
            attempts += 1
            return self._send(req)

        send = backoff.on_exception(
            _wait_schedule,
            TransientLlmError,
            max_tries=self.config.max_retries + 1,
            jitter=None,
            delays=retry_delays(self.config),
            on_backoff=self._log_backoff,
            logger=None,
        )(attempt)

        started = time.monotonic()
        record = CallRecord(
            tag=request.tag,
            model=self.config.model_name,
            attempts=0,
            latency_ms=0,
            status="ok",
            prompt_chars=len(request.prompt),
        )
        try:
            if len(request.prompt) > self.config.max_prompt_chars:
                raise PayloadTooLarge(
                    f"Prompt for '{request.tag}' has {len(request.prompt)} characters, "
                    f"limit is {self.config.max_prompt_chars}"
                )
            text = send(request)
            record.response_chars = len(text)
            return text
        except TransientLlmError as e:
            record.status, record.error = "exhausted", str(e)
            raise LlmExhausted(
                f"LLM call '{request.tag}' failed after {attempts} attempt(s): {e}"
            ) from e
        except LlmError as e:
            record.status, record.error = type(e).__name__, str(e)
            raise
        finally:
            record.attempts = attempts
            record.latency_ms = int((time.monotonic() - started) * 1000)
            self._write(record)

    def _write(self, record: CallRecord) -> None:
        LOGGER.debug(
            "LLM call %s: %s after %d attempt(s) in %dms",
            record.tag, record.status, record.attempts, record.latency_ms,
        )
        with self._log_lock:
            self.records.append(record)
            self.status_counts[record.status] += 1
            if self.call_log is None:
                return
            self.call_log.parent.mkdir(parents=True, exist_ok=True)
            with open(self.call_log, "a", encoding="utf-8") as f:
                f.write(json.dumps(asdict(record), sort_keys=True) + "\n")


def complete(config: LlmConfig, request: LlmRequest, provider=None) -> str:
    """One-off completion through a fresh gateway."""
    with LlmGateway(config, provider) as gateway:
        return gateway.complete(request)
