from pathlib import Path
from typing import Callable, List

import pytest

from microrca.config import PipelineConfig, from_dict
from microrca.enums import MockMode
from microrca.ingest import LogRecord, TraceSpan, iso_to_ns, make_case
from microrca.llm_gateway import LlmConfig, LlmGateway, MockProvider
from microrca.pipeline import cmd_train_drain, cmd_train_trace
from microrca.resources import get_default_synth_spec
from microrca.settings import INPUT_FILE
from microrca.synth import generate_dataset

LATENCY_UUID = "345fbe93-80"
STORM_UUID = "74a44ae7-81"
NODE_UUID = "8c1d0f5a-82"


def make_config(data_root: Path, work_dir: Path, **overrides) -> PipelineConfig:
    """Config pointing at a dataset, with models and outputs under `work_dir`."""
    raw = {
        "data_root": str(data_root),
        "output_dir": str(work_dir / "output"),
        "model_dir": str(work_dir / "models"),
        "worker_pool_size": 2,
        "llm": {"backoff_base_ms": 0},
        "train": {"samples": 3, "window_minutes": 40},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return from_dict(raw)


@pytest.fixture(scope="session")
def dataset(tmp_path_factory) -> Path:
    """The built-in three-fault dataset, generated once per session."""
    out = tmp_path_factory.mktemp("dataset")
    generate_dataset(get_default_synth_spec(), out)
    return out


@pytest.fixture(scope="session")
def input_file(dataset) -> Path:
    return dataset / INPUT_FILE


@pytest.fixture(scope="session")
def trained_config(dataset, input_file, tmp_path_factory) -> PipelineConfig:
    """Config whose model_dir holds a trained drain model and trace detectors."""
    work = tmp_path_factory.mktemp("trained")
    config = make_config(dataset, work)
    cmd_train_drain(config)
    cmd_train_trace(config, input_file)
    return config


@pytest.fixture
def config(dataset, tmp_path) -> PipelineConfig:
    """Untrained config with its own model and output directories."""
    return make_config(dataset, tmp_path)


@pytest.fixture
def llm_config() -> LlmConfig:
    return LlmConfig(backoff_base_ms=0)


@pytest.fixture
def mock_provider() -> MockProvider:
    return MockProvider()


@pytest.fixture
def gateway(llm_config, mock_provider) -> LlmGateway:
    return LlmGateway(llm_config, mock_provider)


@pytest.fixture
def make_gateway(llm_config) -> Callable[..., LlmGateway]:
    """Factory for gateways around a mock provider in a given mode."""
    def _make(mode: MockMode = MockMode.DEFAULT, fail_count: int = 0, **config) -> LlmGateway:
        provider = MockProvider(mode=mode, fail_count=fail_count)
        cfg = LlmConfig(**{"backoff_base_ms": 0, **config})
        return LlmGateway(cfg, provider)
    return _make


@pytest.fixture
def case():
    return make_case("case-1", iso_to_ns("2025-06-06T00:20:00Z"), iso_to_ns("2025-06-06T00:30:00Z"))


@pytest.fixture
def log_records(case) -> List[LogRecord]:
    t = case.start_ns
    minute = 60 * 10**9
    return [
        LogRecord(t - minute, "frontend-0", "node-1", "error before the window 1"),
        LogRecord(t + minute, "frontend-0", "node-1", "error connecting to redis at 10.0.0.1 timeout 10 ms"),
        LogRecord(t + 2 * minute, "frontend-0", "node-1", "error connecting to redis at 10.0.0.2 timeout 35 ms"),
        LogRecord(t + 3 * minute, "frontend-0", "node-1", "GET /product 200 in 3 ms"),
        LogRecord(t + 4 * minute, "cartservice-1", "node-2", "ERROR writing order 1f2e3d4c5b6a to database"),
        LogRecord(case.end_ns + minute, "frontend-0", "node-1", "error after the window 9"),
    ]


def make_span(trace_id: str, span_id: str, parent: str = None, pod: str = "frontend-0",
              operation: str = "op", start_ns: int = 0, duration_us: int = 100,
              status_code: int = 0, status_message: str = "", node: str = "node-1") -> TraceSpan:
    return TraceSpan(
        trace_id=trace_id,
        span_id=span_id,
        parent_span_id=parent,
        start_ns=start_ns,
        duration_us=duration_us,
        pod_name=pod,
        service_name=pod.rsplit("-", 1)[0],
        node_name=node,
        operation_name=operation,
        status_code=status_code,
        status_message=status_message,
    )
