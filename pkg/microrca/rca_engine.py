"""
Cross-modal root cause prompt assembly, verdict extraction and the
re-prompting loop around it.
"""

import json
import logging
from dataclasses import asdict, dataclass
from itertools import combinations as _combinations
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

from .enums import Modality
from .error import AllModalitiesDisabled, ExtractionFailure, LlmError
from .ingest import FaultCase, ns_to_iso
from .llm_gateway import LlmRequest
from .resources import FORMAT_CORRECTION, OUTPUT_EXAMPLE, load_prompt, render_template

LOGGER = logging.getLogger(__name__)

REQUIRED_KEYS = ("component", "reason", "reasoning_trace")
MAX_REPROMPTS = 3
UNKNOWN_COMPONENT = "unknown"

SECTION_HEADERS = {
    Modality.LOG: (
        "[LOG EVIDENCE]\n"
        "Source: application logs containing errors inside the fault window. "
        "Content: one line per (pod, log template) with the first occurrence, "
        "a representative message and the number of occurrences. "
        "Focus: which pods report errors, how often, and what kind."
    ),
    Modality.TRACE: (
        "[TRACE EVIDENCE]\n"
        "Source: distributed traces inside the fault window. "
        "Content: call edges whose average latency was flagged by per-edge "
        "anomaly detectors trained on normal periods, and call edges with a "
        "non-zero status code. "
        "Focus: which calls slowed down or failed and where in the call chain."
    ),
    Modality.METRIC: (
        "[METRIC EVIDENCE]\n"
        "Source: application, database, pod and node metrics compared between "
        "normal periods and the fault window. "
        "Content: descriptions of the significant changes, service level first, "
        "then infrastructure. "
        "Focus: resource saturation and latency or error changes per component."
    ),
}


@dataclass(frozen=True)
class ModalityFlags:
    use_log: bool = True
    use_trace: bool = True
    use_metric: bool = True

    @classmethod
    def of(cls, modalities: Iterable[Modality]) -> "ModalityFlags":
        modalities = {Modality(m) for m in modalities}
        return cls(
            use_log=Modality.LOG in modalities,
            use_trace=Modality.TRACE in modalities,
            use_metric=Modality.METRIC in modalities,
        )

    @classmethod
    def combinations(cls) -> List["ModalityFlags"]:
        """The seven non-empty modality subsets, singles first."""
        modalities = list(Modality)
        return [
            cls.of(subset)
            for size in range(1, len(modalities) + 1)
            for subset in _combinations(modalities, size)
        ]

    @property
    def enabled(self) -> Tuple[Modality, ...]:
        flags = (self.use_log, self.use_trace, self.use_metric)
        return tuple(m for m, on in zip(Modality, flags) if on)

    @property
    def label(self) -> str:
        return "+".join(m.value for m in self.enabled) or "none"

    def __bool__(self) -> bool:
        return bool(self.enabled)


@dataclass(frozen=True)
class EvidenceReports:
    log: Optional[str] = None
    trace: Optional[str] = None
    metric: Optional[str] = None

    def for_modality(self, modality: Modality) -> Optional[str]:
        return getattr(self, Modality(modality).value)


@dataclass(frozen=True)
class RcaResult:
    uuid: str
    component: str
    reason: str
    reasoning_trace: str

    @property
    def failed(self) -> bool:
        return self.component == UNKNOWN_COMPONENT

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)


def assemble_prompt(log_report: Optional[str], trace_report: Optional[str],
                    metric_summary: Optional[str], flags: ModalityFlags,
                    case: FaultCase = None, prompts_dir: Optional[Path] = None) -> str:
    if not flags:
        raise AllModalitiesDisabled("At least one of log, trace and metric evidence must be enabled")
    reports = EvidenceReports(log_report, trace_report, metric_summary)
    sections = []
    for modality in flags.enabled:
        report = reports.for_modality(modality)
        if report is None:
            raise ValueError(f"{modality.value} evidence is enabled but no report was given")
        sections.append(f"{SECTION_HEADERS[modality]}\n{report}")

    window = f"{ns_to_iso(case.start_ns)} to {ns_to_iso(case.end_ns)}" if case else "unknown"
    prompt = render_template(
        load_prompt("rca", prompts_dir),
        uuid=case.uuid if case else "unknown",
        window=window,
        evidence="\n\n".join(sections),
    )
    return prompt.rstrip("\n") + "\n" + OUTPUT_EXAMPLE + "\n"


def _object_end(text: str, start: int) -> Optional[int]:
    """Index one past the brace closing the object opened at `start`, or None."""
    depth = 0
    in_string = escaped = False
    for i in range(start, len(text)):
        c = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif c == "\\":
                escaped = True
            elif c == '"':
                in_string = False
        elif c == '"':
            in_string = True
        elif c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
            if depth == 0:
                return i + 1
    return None


def _candidates(text: str) -> Iterable[str]:
    start = text.find("{")
    while start != -1:
        end = _object_end(text, start)
        if end is not None:
            yield text[start:end]
        else:
            # a truncated object may only be missing its final brace
            yield text[start:].rstrip().rstrip("`").rstrip() + "}"
        start = text.find("{", start + 1)


def _validate(obj: dict) -> Tuple[str, str, str]:
    missing = [k for k in REQUIRED_KEYS if k not in obj]
    if missing:
        raise ExtractionFailure(f"Verdict lacks key(s): {', '.join(missing)}")
    values = []
    for key in REQUIRED_KEYS:
        value = obj[key]
        if not isinstance(value, str) or not value.strip():
            raise ExtractionFailure(f"Verdict field '{key}' must be a non-empty string, got {value!r}")
        values.append(value.strip())
    return values[0], values[1], values[2]


def extract_structured(llm_text: str) -> Tuple[str, str, str]:
    """Finds the first JSON object in free text carrying a complete verdict."""
    if not llm_text or "{" not in llm_text:
        raise ExtractionFailure("No JSON object in the model output")
    problem = "no candidate object parsed as JSON"
    for candidate in _candidates(llm_text):
        try:
            obj = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if not isinstance(obj, dict):
            continue
        if not any(k in obj for k in REQUIRED_KEYS):
            continue
        try:
            return _validate(obj)
        except ExtractionFailure as e:
            problem = str(e)
    raise ExtractionFailure(problem)


def analyze_case(case: FaultCase, reports: EvidenceReports, flags: ModalityFlags, gateway,
                 prompts_dir: Optional[Path] = None, max_reprompts: int = MAX_REPROMPTS,
                 transcript: Optional[List[Tuple[str, str]]] = None) -> RcaResult:
    """Asks for a verdict, re-prompting with a format correction when it cannot be parsed.

    Never raises for model misbehaviour: a case that yields no verdict gets
    component "unknown". Every (prompt, answer) pair is appended to
    `transcript` when given.
    """
    prompt = assemble_prompt(reports.log, reports.trace, reports.metric, flags, case, prompts_dir)
    text = ""
    for attempt in range(max_reprompts + 1):
        current = prompt if attempt == 0 else f"{prompt}\n{FORMAT_CORRECTION}\n"
        try:
            text = gateway.complete(LlmRequest(prompt=current, tag="rca"))
        except LlmError as e:
            LOGGER.error("Case %s: root cause call failed: %s", case.uuid, e)
            return RcaResult(case.uuid, UNKNOWN_COMPONENT, "llm call failed", str(e) or type(e).__name__)
        if transcript is not None:
            transcript.append((current, text))
        try:
            component, reason, trace = extract_structured(text)
        except ExtractionFailure as e:
            LOGGER.warning("Case %s: unusable verdict on attempt %d: %s", case.uuid, attempt + 1, e)
            continue
        return RcaResult(case.uuid, component, reason, trace)

    return RcaResult(
        uuid=case.uuid,
        component=UNKNOWN_COMPONENT,
        reason="extraction failed",
        reasoning_trace=text or "no output",
    )
