import json
import threading
from concurrent.futures import ThreadPoolExecutor

import httpx
import pytest

from microrca.enums import MockMode
from microrca.error import (AuthError, LlmError, LlmExhausted, PayloadTooLarge,
                            TransientLlmError, UnknownTag)
from microrca.llm_gateway import (HttpProvider, LlmConfig, LlmGateway, LlmRequest,
                                  MockProvider, build_provider, complete, retry_delays)
from microrca.resources import FORMAT_CORRECTION


def _request(tag="rca", prompt="child_pod: cartservice-1 | something"):
    return LlmRequest(prompt=prompt, tag=tag)


def test_request_needs_prompt():
    with pytest.raises(ValueError):
        LlmRequest(prompt="", tag="rca")


@pytest.mark.parametrize("kwargs", [
    {"provider": "carrier-pigeon"},
    {"max_retries": -1},
    {"max_concurrent_requests": 0},
    {"backoff_base_ms": -5},
    {"mock_mode": "sometimes"},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        LlmConfig(**kwargs)


def test_retry_delays_double():
    assert retry_delays(LlmConfig(backoff_base_ms=500, max_retries=3)) == [0.5, 1.0, 2.0]
    assert retry_delays(LlmConfig(max_retries=0)) == []


def test_build_provider():
    assert isinstance(build_provider(LlmConfig()), MockProvider)
    assert isinstance(build_provider(LlmConfig(provider="http")), HttpProvider)


def test_mock_is_deterministic():
    a = MockProvider().complete(_request())
    b = MockProvider().complete(_request())
    assert a == b
    assert json.loads(a)["component"] == "cartservice-1"


def test_mock_suspect_preference():
    prompt = "pod_name: frontend-0\nchild_pod: cartservice-1\nmost affected entity: aiops-k8s-02"
    assert json.loads(MockProvider().complete(_request(prompt=prompt)))["component"] == "aiops-k8s-02"
    prompt = "pod_name: frontend-0\nmost affected entity: none"
    assert json.loads(MockProvider().complete(_request(prompt=prompt)))["component"] == "frontend-0"


def test_mock_summary_names_first_entity():
    payload = '{"nodes":[{"metrics":{},"node":"aiops-k8s-02"},{"metrics":{},"node":"aiops-k8s-01"}]}'
    text = MockProvider().complete(_request(tag="stage2", prompt=payload))
    assert "most affected entity: aiops-k8s-02" in text
    assert "aiops-k8s-01" in text


def test_mock_strict_unknown_tag():
    with pytest.raises(UnknownTag):
        MockProvider(strict=True).complete(_request(tag="nope"))
    assert "nope" in MockProvider().complete(_request(tag="nope"))


def test_mock_malformed_once():
    provider = MockProvider(mode=MockMode.MALFORMED_ONCE)
    first = provider.complete(_request())
    assert "{" not in first
    corrected = provider.complete(_request(prompt=f"child_pod: x-0\n{FORMAT_CORRECTION}"))
    assert json.loads(corrected)["component"] == "x-0"


def test_gateway_retries_transient_failures(make_gateway):
    gateway = make_gateway(MockMode.FAIL_N, fail_count=2, max_retries=3)
    assert gateway.complete(_request())
    assert gateway.records[-1].attempts == 3
    assert gateway.records[-1].status == "ok"


def test_gateway_exhausts(make_gateway):
    gateway = make_gateway(MockMode.FAIL_N, fail_count=10, max_retries=2)
    with pytest.raises(LlmExhausted):
        gateway.complete(_request())
    assert gateway.provider.calls == ["rca"] * 3
    assert gateway.records[-1].status == "exhausted"


def test_gateway_backoff_schedule(make_gateway, monkeypatch):
    slept = []
    monkeypatch.setattr("time.sleep", slept.append)
    gateway = make_gateway(MockMode.FAIL_N, fail_count=3, max_retries=3, backoff_base_ms=100)
    gateway.complete(_request())
    assert slept == pytest.approx([0.1, 0.2, 0.4])
    assert slept == pytest.approx(retry_delays(gateway.config))


def test_gateway_rejects_oversized_prompt(make_gateway):
    gateway = make_gateway(max_prompt_chars=10)
    with pytest.raises(PayloadTooLarge):
        gateway.complete(_request(prompt="x" * 11))
    assert gateway.provider.calls == []
    record = gateway.records[-1]
    assert (record.status, record.attempts, record.prompt_chars) == ("PayloadTooLarge", 0, 11)


def test_gateway_keeps_recent_records(monkeypatch):
    monkeypatch.setattr("microrca.llm_gateway.RECENT_CALLS", 3)
    gateway = LlmGateway(LlmConfig(), MockProvider())
    for i in range(5):
        gateway.complete(_request(prompt=f"p{i}"))
    assert len(gateway.records) == 3
    assert gateway.status_counts == {"ok": 5}


def test_gateway_caps_concurrency():
    provider = MockProvider(latency_s=0.02)
    gateway = LlmGateway(LlmConfig(backoff_base_ms=0, max_concurrent_requests=2), provider)
    with ThreadPoolExecutor(max_workers=8) as pool:
        list(pool.map(lambda i: gateway.complete(_request(prompt=f"p{i}")), range(16)))
    assert len(provider.calls) == 16
    assert provider.max_in_flight <= 2


def test_gateway_call_log(tmp_path, monkeypatch):
    monkeypatch.setenv("MRCA_API_KEY", "sk-very-secret")
    log = tmp_path / "llm_calls.jsonl"
    gateway = LlmGateway(LlmConfig(backoff_base_ms=0), MockProvider(), call_log=log)
    gateway.complete(_request())
    gateway.complete(_request(tag="stage1", prompt='{"pod": "a-0"}'))
    lines = [json.loads(l) for l in log.read_text().splitlines()]
    assert [l["tag"] for l in lines] == ["rca", "stage1"]
    assert set(lines[0]) >= {"tag", "model", "attempts", "latency_ms", "status", "prompt_chars", "response_chars"}
    assert "sk-very-secret" not in log.read_text()


def test_complete_helper():
    assert complete(LlmConfig(), _request())


def test_gateway_close_closes_owned_http_client():
    config = LlmConfig(provider="http")
    with LlmGateway(config) as gateway:
        client = gateway.provider.client
    assert client.is_closed

    shared = httpx.Client(transport=httpx.MockTransport(_Responder(200)))
    LlmGateway(config, HttpProvider(config, shared)).close()
    assert not shared.is_closed
    shared.close()


class _Responder:
    def __init__(self, status, body=None, exc=None):
        self.status, self.body, self.exc = status, body, exc
        self.calls = 0
        self.lock = threading.Lock()

    def __call__(self, request: httpx.Request) -> httpx.Response:
        with self.lock:
            self.calls += 1
        if self.exc:
            raise self.exc
        assert request.headers["Authorization"] == "Bearer test-key"
        return httpx.Response(self.status, json=self.body)


def _http(responder, **config):
    config = LlmConfig(provider="http", endpoint_url="https://llm.test/v1/chat/completions",
                       backoff_base_ms=0, **config)
    client = httpx.Client(transport=httpx.MockTransport(responder))
    return LlmGateway(config, HttpProvider(config, client))


def test_http_provider_success(monkeypatch):
    monkeypatch.setenv("MRCA_API_KEY", "test-key")
    responder = _Responder(200, {"choices": [{"message": {"content": "hello"}}]})
    assert _http(responder).complete(_request()) == "hello"


@pytest.mark.parametrize("status,exc,calls", [
    (401, AuthError, 1),
    (403, AuthError, 1),
    (413, PayloadTooLarge, 1),
    (400, LlmError, 1),
    (429, LlmExhausted, 3),
    (503, LlmExhausted, 3),
])
def test_http_provider_errors(monkeypatch, status, exc, calls):
    monkeypatch.setenv("MRCA_API_KEY", "test-key")
    responder = _Responder(status, {"error": "nope"})
    with pytest.raises(exc):
        _http(responder, max_retries=2).complete(_request())
    assert responder.calls == calls


def test_http_provider_transport_errors_are_transient(monkeypatch):
    monkeypatch.setenv("MRCA_API_KEY", "test-key")
    responder = _Responder(200, exc=httpx.ConnectError("refused"))
    with pytest.raises(LlmExhausted):
        _http(responder, max_retries=1).complete(_request())
    assert responder.calls == 2


def test_http_provider_needs_key(monkeypatch):
    monkeypatch.delenv("MRCA_API_KEY", raising=False)
    with pytest.raises(AuthError):
        _http(_Responder(200)).complete(_request())


def test_transient_is_an_llm_error():
    assert issubclass(TransientLlmError, LlmError)
