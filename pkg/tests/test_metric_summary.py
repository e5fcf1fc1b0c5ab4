import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microrca.enums import MetricLevel, Modality
from microrca.error import NoNormalWindow
from microrca.ingest import LogRecord, MetricPoint, iso_to_ns, load_modality, make_case
from microrca.llm_gateway import LlmConfig, LlmGateway, MockProvider
from microrca.metric_summary import (METRIC_SUMMARY_UNAVAILABLE, NO_NORMAL_WINDOW,
                                     NO_SIGNIFICANT_METRICS, TOPOLOGY_UNAVAILABLE, Stats,
                                     build_stage1_payload, build_stage2_payload,
                                     compare_and_filter, compare_metrics, derive_topology,
                                     extract_metric_evidence, normal_windows, payload_is_empty,
                                     summarize, symmetric_ratio, trim_extremes)
from microrca.pipeline import load_cases

from .conftest import NODE_UUID, make_span

MIN = 60 * 10**9
T0 = iso_to_ns("2025-06-06T01:00:00Z")


def _series(level, entity, kpi, values, start=T0, step=MIN):
    return [MetricPoint(start + i * step, level, entity, kpi, float(v)) for i, v in enumerate(values)]


@pytest.fixture
def fault_case():
    return make_case("f", T0 + 40 * MIN, T0 + 50 * MIN)


@pytest.fixture
def windows(fault_case):
    return [(T0, T0 + 30 * MIN), (T0 + 60 * MIN, T0 + 90 * MIN)]


def _shifted(level, entity, kpi, normal, fault):
    """Flat `normal` value everywhere except `fault` inside minutes 40-50."""
    return _series(level, entity, kpi, [fault if 40 <= i <= 50 else normal for i in range(91)])


@settings(max_examples=10_000)
@given(st.floats(0, 1e9), st.floats(0, 1e9))
def test_symmetric_ratio_properties(a, b):
    assert symmetric_ratio(a, b) == pytest.approx(symmetric_ratio(b, a))
    assert symmetric_ratio(a, b) >= 0
    assert symmetric_ratio(a, a) == 0


def test_symmetric_ratio_value():
    assert symmetric_ratio(150, 50) == pytest.approx(1.0)
    assert symmetric_ratio(0, 0) == 0


def test_stats():
    s = Stats.of([1, 2, 3, 4, 5])
    assert (s.count, s.mean, s.min, s.p50, s.max) == (5, 3.0, 1.0, 3.0, 5.0)
    assert s.std == pytest.approx(np.std([1, 2, 3, 4, 5], ddof=1))
    assert Stats.of([7]).std == 0.0
    assert Stats.of([]).count == 0


def test_trim_extremes():
    assert trim_extremes([5, 1, 9]) == [5, 1, 9]
    values = [10, 1, 2, 50, 3, 4, 5, 6, 7, 100]
    assert trim_extremes(values) == [10, 3, 4, 5, 6, 7]


def test_normal_windows():
    a = make_case("a", T0, T0 + 10 * MIN)
    b = make_case("b", T0 + 40 * MIN, T0 + 50 * MIN)
    c = make_case("c", T0 + 80 * MIN, T0 + 90 * MIN)
    schedule = [c, a, b]
    assert normal_windows(schedule, b) == [(T0 + 20 * MIN, T0 + 30 * MIN), (T0 + 60 * MIN, T0 + 80 * MIN)]
    # first case falls back to an hour before
    assert normal_windows(schedule, a)[0] == (T0 - 60 * MIN, T0 - 10 * MIN)
    # last case falls back to an hour after
    assert normal_windows(schedule, c)[-1] == (T0 + 100 * MIN, T0 + 150 * MIN)


def test_normal_windows_errors():
    a = make_case("a", T0, T0 + 10 * MIN)
    b = make_case("b", T0 + 15 * MIN, T0 + 20 * MIN)
    c = make_case("c", T0 + 20 * MIN, T0 + 30 * MIN)
    with pytest.raises(NoNormalWindow):
        normal_windows([a, b, c], b)
    with pytest.raises(ValueError):
        normal_windows([a, c], b)


def test_constant_metric_is_filtered(fault_case, windows):
    points = _shifted(MetricLevel.APM, "frontend-0", "rrt", 25.0, 25.0)
    assert compare_and_filter(points, fault_case, windows) == []


def test_doubled_metric_is_kept(fault_case, windows):
    points = _shifted(MetricLevel.APM, "frontend-0", "rrt", 25.0, 50.0)
    kept = compare_and_filter(points, fault_case, windows)
    assert len(kept) == 1
    assert kept[0].p50_ratio == pytest.approx(2 / 3)


def test_missing_samples_are_noted(fault_case, windows):
    only_fault = _series(MetricLevel.APM, "cartservice-0", "rrt", [1.0] * 5, start=T0 + 41 * MIN)
    only_normal = _series(MetricLevel.APM, "cartservice-1", "rrt", [1.0] * 5)
    comparisons, notes = compare_metrics(only_fault + only_normal, fault_case, windows)
    assert comparisons == []
    assert len(notes) == 2


def _oracle(values_by_minute, case, windows, threshold=0.05):
    normal, fault = [], []
    for t, v in values_by_minute:
        if case.start_ns <= t <= case.end_ns:
            fault.append(v)
        elif any(s <= t <= e for s, e in windows):
            normal.append(v)

    def trimmed(vals):
        if len(vals) < 10:
            return vals
        order = sorted(range(len(vals)), key=lambda i: (vals[i], i))
        drop = set(order[:2] + order[-2:])
        return [v for i, v in enumerate(vals) if i not in drop]

    n, f = trimmed(normal), fault
    ratio = max(
        abs(np.percentile(f, q) - np.percentile(n, q)) / ((np.percentile(f, q) + np.percentile(n, q)) / 2 + 1e-9)
        for q in (50, 99)
    )
    return ratio >= threshold


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1000), min_size=91, max_size=91))
def test_filter_matches_oracle(values):
    case = make_case("f", T0 + 40 * MIN, T0 + 50 * MIN)
    windows = [(T0, T0 + 30 * MIN), (T0 + 60 * MIN, T0 + 90 * MIN)]
    points = _series(MetricLevel.INFRA_POD, "cartservice-0", "pod_cpu_usage", values)
    kept = compare_and_filter(points, case, windows)
    expected = _oracle([(p.time_ns, p.value) for p in points], case, windows)
    assert bool(kept) == expected


def test_fault_window_spikes_are_not_trimmed(fault_case, windows):
    # flat series with a two-minute spike at the end of the fault window
    values = [1000.0 if i in (49, 50) else 100.0 for i in range(91)]
    points = _series(MetricLevel.APM, "cartservice-1", "rrt", values)
    [comparison], _ = compare_metrics(points, fault_case, windows)
    assert comparison.fault.p99 > 900
    assert comparison.p99_ratio > 1
    assert comparison.significant


def test_normal_window_outliers_are_trimmed(fault_case, windows):
    values = [100.0] * 91
    values[5] = values[70] = 1000.0
    points = _series(MetricLevel.APM, "cartservice-1", "rrt", values)
    [comparison], _ = compare_metrics(points, fault_case, windows)
    assert comparison.normal.p99 == 100.0
    assert not comparison.significant


@pytest.fixture
def comparisons(fault_case, windows):
    points = (
        _shifted(MetricLevel.APM, "cartservice-1", "rrt", 25.0, 125.0)
        + _shifted(MetricLevel.INFRA_TIDB, "tidb-tidb-0", "cpu_usage", 50.0, 80.0)
        + _shifted(MetricLevel.INFRA_NODE, "node-2", "node_cpu_usage_rate", 25.0, 75.0)
        + _shifted(MetricLevel.INFRA_NODE, "node-1", "node_memory_usage_rate", 45.0, 50.0)
        + _shifted(MetricLevel.INFRA_POD, "cartservice-1", "pod_cpu_usage", 20.0, 60.0)
        + _shifted(MetricLevel.INFRA_POD, "frontend-0", "pod_cpu_usage", 20.0, 22.0)
    )
    return compare_and_filter(points, fault_case, windows)


def test_stage1_payload(comparisons):
    doc = json.loads(build_stage1_payload(comparisons))
    assert doc["empty"] is False
    assert [s["service"] for s in doc["services"]] == ["cartservice", "tidb-tidb"]
    block = doc["services"][0]["pods"][0]["metrics"]["rrt"]
    assert set(block) == {"normal", "fault", "p50_ratio", "p99_ratio"}
    assert block["fault"]["p50"] == 125.0


def test_stage1_payload_empty():
    payload = build_stage1_payload([])
    assert payload_is_empty(payload)
    assert NO_SIGNIFICANT_METRICS in payload


def test_stage2_payload_orders_nodes_by_strength(comparisons):
    topology = {"cartservice-1": "node-2", "frontend-0": "node-1"}
    doc = json.loads(build_stage2_payload(comparisons, "stage one text", topology))
    assert [n["node"] for n in doc["nodes"]] == ["node-2", "node-1"]
    assert [p["pod"] for p in doc["nodes"][0]["pods"]] == ["cartservice-1"]
    assert doc["stage1_summary"] == "stage one text"
    assert doc["unassigned"] == []


def test_stage2_payload_without_topology(comparisons):
    doc = json.loads(build_stage2_payload(comparisons, "", {}))
    assert doc["nodes"] == []
    assert [p["pod"] for p in doc["unassigned"]] == ["cartservice-1", "frontend-0"]
    assert doc["note"] == TOPOLOGY_UNAVAILABLE


def test_summarize_skips_empty_payload(gateway, mock_provider):
    assert summarize(gateway, 1, build_stage1_payload([])) == NO_SIGNIFICANT_METRICS
    assert mock_provider.calls == []


def test_summarize_calls_model(gateway, mock_provider, comparisons):
    text = summarize(gateway, 1, build_stage1_payload(comparisons))
    assert mock_provider.calls == ["stage1"]
    assert "most affected entity: cartservice-1" in text


def test_summarize_degrades_on_llm_failure(comparisons):
    provider = MockProvider(mode="fail-n", fail_count=10)
    gateway = LlmGateway(LlmConfig(backoff_base_ms=0, max_retries=1), provider)
    assert summarize(gateway, 1, build_stage1_payload(comparisons)) == METRIC_SUMMARY_UNAVAILABLE


def test_summarize_rejects_unknown_stage(gateway):
    with pytest.raises(ValueError):
        summarize(gateway, 3, build_stage1_payload([]))


def test_derive_topology():
    logs = [LogRecord(0, "frontend-0", "node-1", "x")]
    spans = [make_span("t", "s", pod="cartservice-0", node="node-2")]
    topology = derive_topology(logs, spans, {"frontend-0": "old", "redis-cart-0": "node-3"})
    assert topology == {"frontend-0": "node-1", "cartservice-0": "node-2", "redis-cart-0": "node-3"}


def test_no_normal_window_sentinel(gateway, mock_provider):
    a = make_case("a", T0, T0 + 10 * MIN)
    b = make_case("b", T0 + 15 * MIN, T0 + 20 * MIN)
    c = make_case("c", T0 + 20 * MIN, T0 + 30 * MIN)
    kept, summary, text = extract_metric_evidence([], [a, b, c], b, gateway)
    assert kept == []
    assert summary.stage1_text == NO_NORMAL_WINDOW
    assert mock_provider.calls == []


def test_node_fault_on_dataset(dataset, input_file, gateway, mock_provider):
    cases = load_cases(input_file)
    case = next(c for c in cases if c.uuid == NODE_UUID)
    points = load_modality(dataset, Modality.METRIC, case)
    topology = json.loads((dataset / "topology.json").read_text())
    kept, summary, text = extract_metric_evidence(points, cases, case, gateway, topology)

    assert any(c.entity == "aiops-k8s-02" and c.kpi_key == "node_cpu_usage_rate" for c in kept)
    assert "most affected entity: aiops-k8s-02" in summary.stage2_text
    assert "Infrastructure phenomena:" in text

    # filtering shrinks the service level payload
    windows = normal_windows(cases, case)
    everything, _ = compare_metrics(points, case, windows)
    assert len(build_stage1_payload(kept)) <= 0.7 * len(build_stage1_payload(everything))
