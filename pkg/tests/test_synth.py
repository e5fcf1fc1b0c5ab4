import json
from copy import deepcopy

import pytest

from microrca.error import InvalidSpec
from microrca.ingest import iso_to_ns, parse_input_case
from microrca.resources import get_default_synth_spec
from microrca.settings import GROUND_TRUTH_FILE, INPUT_FILE, TOPOLOGY_FILE
from microrca.synth import LOG_TEMPLATES, generate_dataset, parse_spec, synth_log_corpus


@pytest.fixture
def small_spec():
    """One hour of the default shop with only the latency fault."""
    spec = get_default_synth_spec()
    spec["hours"] = 1
    spec["trace_interval_s"] = 30
    spec["faults"] = spec["faults"][:1]
    return spec


def test_default_spec_parses():
    spec = parse_spec(get_default_synth_spec())
    assert len(spec.faults) == 3
    assert spec.pods["frontend"] == ["frontend-0", "frontend-1"]
    assert spec.placement["frontend-0"] == "aiops-k8s-01"
    assert spec.placement["frontend-1"] == "aiops-k8s-02"
    assert set(spec.placement.values()) <= set(spec.nodes)


def test_default_spec_is_a_copy():
    spec = get_default_synth_spec()
    spec["faults"].clear()
    assert get_default_synth_spec()["faults"]


def _broken(mutate):
    spec = get_default_synth_spec()
    mutate(spec)
    return spec


@pytest.mark.parametrize("mutate", [
    lambda s: s.pop("topology"),
    lambda s: s.update(hours=0),
    lambda s: s.update(start="yesterday"),
    lambda s: s.update(background_error_rate=1.5),
    lambda s: s.update(trace_interval_s=0),
    lambda s: s["topology"].update(entry="gateway"),
    lambda s: s["topology"]["services"].update(frontend=0),
    lambda s: s["topology"]["edges"].append(
        {"parent": "redis-cart", "child": "frontend", "operation": "loop", "baseline_us": 10}),
    lambda s: s["topology"]["edges"].append(
        {"parent": "frontend", "child": "paymentservice", "operation": "Pay", "baseline_us": 10}),
    lambda s: s["faults"][0].update(end="2025-06-06T05:00:00Z"),
    lambda s: s["faults"][0].update(end=s["faults"][0]["start"]),
    lambda s: s["faults"][1].update(uuid=s["faults"][0]["uuid"]),
    lambda s: s["faults"][1].update(rate=0),
    lambda s: s["faults"][0]["target"].update(child="cartservice-9"),
    lambda s: s["faults"][0]["target"].update(operation="hipstershop.Nope/Nothing"),
    lambda s: s["faults"][2]["target"].update(node="aiops-k8s-99"),
    lambda s: s["faults"][2].update(multiplier=1.0),
    lambda s: s["faults"][0].update(type="disk_full"),
])
def test_invalid_specs(mutate):
    with pytest.raises(InvalidSpec):
        parse_spec(_broken(mutate))


def test_generation_is_deterministic(small_spec, tmp_path):
    a = generate_dataset(small_spec, tmp_path / "a")
    b = generate_dataset(deepcopy(small_spec), tmp_path / "b")
    rel_a = [p.relative_to(tmp_path / "a") for p in a.files]
    rel_b = [p.relative_to(tmp_path / "b") for p in b.files]
    assert rel_a == rel_b
    for rel in rel_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_seed_changes_output(small_spec, tmp_path):
    generate_dataset(small_spec, tmp_path / "a")
    generate_dataset({**small_spec, "seed": 8}, tmp_path / "b")
    trace_a = sorted((tmp_path / "a").rglob("trace_*.jsonl"))[0]
    trace_b = sorted((tmp_path / "b").rglob("trace_*.jsonl"))[0]
    assert trace_a.read_bytes() != trace_b.read_bytes()


def test_dataset_layout(small_spec, tmp_path):
    result = generate_dataset(small_spec, tmp_path)
    assert result.spans > 0 and result.log_lines > 0 and result.metric_points > 0
    assert list(tmp_path.rglob("log_*.jsonl"))
    assert list(tmp_path.rglob("trace_*.jsonl"))
    for level in ("apm", "infra_pod", "infra_node", "infra_tidb"):
        assert list(tmp_path.glob(f"*/metric/{level}/*.jsonl")), level
    placement = json.loads((tmp_path / TOPOLOGY_FILE).read_text())
    assert placement == parse_spec(small_spec).placement


def test_input_and_ground_truth(dataset):
    cases = [parse_input_case(e) for e in json.loads((dataset / INPUT_FILE).read_text())]
    truth = json.loads((dataset / GROUND_TRUTH_FILE).read_text())
    assert [c.uuid for c in cases] == [t["uuid"] for t in truth]
    assert [t["component"] for t in truth] == ["cartservice-1", "productcatalogservice-0", "aiops-k8s-02"]
    assert [t["fault_type"] for t in truth] == ["latency_spike", "error_storm", "node_cpu_saturation"]
    assert cases[0].start_ns == iso_to_ns("2025-06-06T00:20:00Z")
    assert cases[0].end_ns == iso_to_ns("2025-06-06T00:30:00Z")


def test_storm_spans_carry_status(dataset):
    spans = []
    for path in sorted(dataset.rglob("trace_2025-06-06_01*.jsonl")):
        spans += [json.loads(line) for line in path.read_text().splitlines()]
    storm = [s for s in spans if s["tags"]["status.code"] == 14]
    assert storm
    assert {s["process"]["pod_name"] for s in storm} == {"productcatalogservice-0"}


def test_log_corpus():
    corpus = synth_log_corpus(5, seed=3)
    assert len(corpus) == 5 * len(LOG_TEMPLATES)
    assert sorted({i for i, _ in corpus}) == list(range(len(LOG_TEMPLATES)))
    assert corpus == synth_log_corpus(5, seed=3)
    assert all("{" not in message for _, message in corpus)
