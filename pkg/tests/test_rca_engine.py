import json

import pytest

from microrca.enums import MockMode, Modality
from microrca.error import AllModalitiesDisabled, ExtractionFailure
from microrca.rca_engine import (MAX_REPROMPTS, SECTION_HEADERS, UNKNOWN_COMPONENT,
                                 EvidenceReports, ModalityFlags, RcaResult, analyze_case,
                                 assemble_prompt, extract_structured)
from microrca.resources import FORMAT_CORRECTION, OUTPUT_EXAMPLE

LOG = "pod_name: frontend-0 | template0 | error connecting to redis"
TRACE = "child_pod: cartservice-1 | normal_avg_duration: 1500.00us"
METRIC = "Service level phenomena:\nnothing\n\nInfrastructure phenomena:\nnothing"
REPORTS = EvidenceReports(LOG, TRACE, METRIC)

VERDICT = '{"component": "cartservice-1", "reason": "slow calls", "reasoning_trace": "1. trace"}'


def test_combinations():
    labels = [f.label for f in ModalityFlags.combinations()]
    assert labels == [
        "log", "trace", "metric",
        "log+trace", "log+metric", "trace+metric",
        "log+trace+metric",
    ]


def test_flags():
    flags = ModalityFlags.of(["metric", Modality.LOG])
    assert flags.enabled == (Modality.LOG, Modality.METRIC)
    assert flags
    assert not ModalityFlags(False, False, False)
    assert ModalityFlags(False, False, False).label == "none"


def test_assemble_prompt_sections_in_order(case):
    prompt = assemble_prompt(LOG, TRACE, METRIC, ModalityFlags(), case)
    positions = [prompt.index(SECTION_HEADERS[m].splitlines()[0]) for m in Modality]
    assert positions == sorted(positions)
    assert case.uuid in prompt
    assert "2025-06-06T00:20:00" in prompt
    assert prompt.rstrip().endswith(OUTPUT_EXAMPLE)
    assert "{EVIDENCE}" not in prompt


def test_assemble_prompt_omits_disabled_sections(case):
    prompt = assemble_prompt(LOG, TRACE, METRIC, ModalityFlags(use_log=False, use_metric=False), case)
    assert "[TRACE EVIDENCE]" in prompt and TRACE in prompt
    assert "[LOG EVIDENCE]" not in prompt and LOG not in prompt
    assert "[METRIC EVIDENCE]" not in prompt


@pytest.mark.parametrize("flags", ModalityFlags.combinations(), ids=lambda f: f.label)
def test_assemble_prompt_every_combination(flags, case):
    prompt = assemble_prompt(LOG, TRACE, METRIC, flags, case)
    reports = {Modality.LOG: LOG, Modality.TRACE: TRACE, Modality.METRIC: METRIC}
    for m in Modality:
        header = SECTION_HEADERS[m].splitlines()[0]
        assert (header in prompt) is (m in flags.enabled), header
        assert (reports[m] in prompt) is (m in flags.enabled), m
    positions = [prompt.index(SECTION_HEADERS[m].splitlines()[0]) for m in flags.enabled]
    assert positions == sorted(positions)
    assert prompt.rstrip().endswith(OUTPUT_EXAMPLE)


def test_assemble_prompt_ignores_reports_of_disabled_modalities(case):
    prompt = assemble_prompt(None, TRACE, None, ModalityFlags.of([Modality.TRACE]), case)
    assert TRACE in prompt


def test_assemble_prompt_errors(case):
    with pytest.raises(AllModalitiesDisabled):
        assemble_prompt(LOG, TRACE, METRIC, ModalityFlags(False, False, False), case)
    with pytest.raises(ValueError):
        assemble_prompt(None, TRACE, METRIC, ModalityFlags(), case)


@pytest.mark.parametrize("text", [
    VERDICT,
    f"```json\n{VERDICT}\n```",
    f"Here is my analysis.\n{VERDICT}\nLet me know if you need more.",
    VERDICT[:-1],
    f"```json\n{VERDICT[:-1]}\n```",
    '{"component": "cartservice-1", "reason": "slow calls", "reasoning_trace": "1. trace", "confidence": 0.9}',
    '{"component": "cartservice-1", "reason": "slow {calls}", "reasoning_trace": "1. trace", "extra": {"a": 1}}',
    f'{{"note": "thinking"}} then {VERDICT}',
    '{"component": "  cartservice-1 ", "reason": "slow calls", "reasoning_trace": "1. trace"}',
])
def test_extraction_recovers_verdict(text):
    component, reason, trace = extract_structured(text)
    assert component == "cartservice-1"
    assert reason.startswith("slow")
    assert trace == "1. trace"


@pytest.mark.parametrize("text", [
    "",
    "the root cause is cartservice-1",
    '["cartservice-1"]',
    '{"component": "cartservice-1", "reason": "slow calls"}',
    '{"component": "", "reason": "slow calls", "reasoning_trace": "1. trace"}',
    '{"component": 3, "reason": "slow calls", "reasoning_trace": "1. trace"}',
    '{"component": "cartservice-1", "reason": "slow',
])
def test_extraction_failures(text):
    with pytest.raises(ExtractionFailure):
        extract_structured(text)


def test_result_json():
    result = RcaResult("u", "cartservice-1", "slow calls", "1. trace")
    assert extract_structured(result.to_json()) == ("cartservice-1", "slow calls", "1. trace")
    assert json.loads(result.to_json())["uuid"] == "u"
    assert not result.failed


def test_analyze_case_well_formed(case, gateway, mock_provider):
    transcript = []
    result = analyze_case(case, REPORTS, ModalityFlags(), gateway, transcript=transcript)
    assert result.uuid == case.uuid
    assert result.component == "cartservice-1"
    assert mock_provider.calls == ["rca"]
    assert len(transcript) == 1


def test_analyze_case_malformed_once(case, make_gateway):
    gateway = make_gateway(MockMode.MALFORMED_ONCE)
    transcript = []
    result = analyze_case(case, REPORTS, ModalityFlags(), gateway, transcript=transcript)
    assert not result.failed
    assert gateway.provider.calls == ["rca", "rca"]
    assert FORMAT_CORRECTION not in transcript[0][0]
    assert FORMAT_CORRECTION in transcript[1][0]


def test_analyze_case_always_malformed(case, make_gateway):
    gateway = make_gateway(MockMode.ALWAYS_MALFORMED)
    result = analyze_case(case, REPORTS, ModalityFlags(), gateway)
    assert result.component == UNKNOWN_COMPONENT
    assert result.reason == "extraction failed"
    assert gateway.provider.calls == ["rca"] * (MAX_REPROMPTS + 1)


def test_analyze_case_without_reprompts(case, make_gateway):
    gateway = make_gateway(MockMode.ALWAYS_MALFORMED)
    assert analyze_case(case, REPORTS, ModalityFlags(), gateway, max_reprompts=0).failed
    assert len(gateway.provider.calls) == 1


def test_analyze_case_llm_failure(case, make_gateway):
    gateway = make_gateway(MockMode.FAIL_N, fail_count=100, max_retries=1)
    result = analyze_case(case, REPORTS, ModalityFlags(), gateway)
    assert result.failed
    assert result.reason == "llm call failed"


def test_trace_only_suspect(case, gateway):
    reports = EvidenceReports(LOG, TRACE, "most affected entity: aiops-k8s-02")
    assert analyze_case(case, reports, ModalityFlags.of([Modality.TRACE]), gateway).component == "cartservice-1"
    assert analyze_case(case, reports, ModalityFlags(), gateway).component == "aiops-k8s-02"
