"""
Trace fault detection.

Duration anomalies come from one Isolation Forest per invocation key
(parent pod, child pod, operation) fitted on 30-second window averages of
normal-period durations. Status anomalies come from spans whose
status.code is not 0, no training involved.
"""

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from . import iforest
from .error import CorruptModelFile, TooFewSamples
from .iforest import ForestModel, ForestParams
from .ingest import TraceSpan
from .log_extract import pod_to_service
from .settings import NS_PER_SECOND

LOGGER = logging.getLogger(__name__)

DEFAULT_WINDOW_SECONDS = 30
MIN_WINDOWS = iforest.MIN_SAMPLES
TOP_N = 20
# parent_pod used for failing spans without a resolvable parent
ROOT_PARENT = "<root>"

NO_DURATION_ANOMALIES = "NO DURATION ANOMALIES IN WINDOW"
NO_STATUS_ANOMALIES = "NO STATUS ANOMALIES IN WINDOW"

DETECTORS_MAGIC = "microrca-trace-detectors"
DETECTORS_VERSION = 1


class InvocationKey(NamedTuple):
    parent_pod: str
    child_pod: str
    operation_name: str


class Invocation(NamedTuple):
    key: InvocationKey
    start_ns: int
    duration_us: int
    node_name: str
    service_name: str


@dataclass
class InvocationBatch:
    invocations: List[Invocation] = field(default_factory=list)
    roots: int = 0
    dangling: int = 0


@dataclass
class KeyDetector:
    model: ForestModel
    normal_avg_duration: float
    node_name: str
    service_name: str


@dataclass
class DetectorSet:
    detectors: Dict[InvocationKey, KeyDetector] = field(default_factory=dict)
    window_seconds: int = DEFAULT_WINDOW_SECONDS

    def __len__(self) -> int:
        return len(self.detectors)

    def __contains__(self, key: InvocationKey) -> bool:
        return key in self.detectors


@dataclass(frozen=True)
class DurationAnomaly:
    node_name: str
    service_name: str
    parent_pod: str
    child_pod: str
    operation_name: str
    normal_avg_duration: float
    anomaly_avg_duration: float
    anomaly_count: int

    @property
    def key(self) -> InvocationKey:
        return InvocationKey(self.parent_pod, self.child_pod, self.operation_name)


@dataclass(frozen=True)
class StatusAnomaly:
    node_name: str
    service_name: str
    parent_pod: str
    child_pod: str
    operation_name: str
    status_code: int
    status_message: str
    occurrence_count: int

    @property
    def key(self) -> InvocationKey:
        return InvocationKey(self.parent_pod, self.child_pod, self.operation_name)


def span_service(span: TraceSpan) -> str:
    if span.pod_name.startswith("redis"):
        return "redis-cart"
    return span.service_name or pod_to_service(span.pod_name)


def _span_index(spans: Iterable[TraceSpan]) -> Dict[Tuple[str, str], TraceSpan]:
    return {(s.trace_id, s.span_id): s for s in spans}


def build_invocations(spans: Sequence[TraceSpan],
                      context: Sequence[TraceSpan] = ()) -> InvocationBatch:
    """Maps every span with a resolvable parent to its invocation key.

    Parents are looked up by span id within the same trace, among `spans`
    and the optional `context` spans.
    """
    index = _span_index(context)
    index.update(_span_index(spans))
    batch = InvocationBatch()
    for span in spans:
        if span.parent_span_id is None:
            batch.roots += 1
            continue
        parent = index.get((span.trace_id, span.parent_span_id))
        if parent is None:
            batch.dangling += 1
            continue
        batch.invocations.append(Invocation(
            key=InvocationKey(parent.pod_name, span.pod_name, span.operation_name),
            start_ns=span.start_ns,
            duration_us=span.duration_us,
            node_name=span.node_name,
            service_name=span_service(span),
        ))
    if batch.dangling:
        LOGGER.debug("%d span(s) reference a parent outside the batch", batch.dangling)
    return batch


def invocations_in_window(invocations: Iterable[Invocation], start_ns: int, end_ns: int) -> List[Invocation]:
    return [i for i in invocations if start_ns <= i.start_ns <= end_ns]


def window_features(invocations: Iterable[Invocation],
                    window_s: int = DEFAULT_WINDOW_SECONDS) -> Dict[InvocationKey, List[Tuple[int, float]]]:
    """Per key, the mean duration of each epoch-aligned bucket the key appears in."""
    width = window_s * NS_PER_SECOND
    sums: Dict[InvocationKey, Dict[int, List[int]]] = defaultdict(lambda: defaultdict(list))
    for inv in invocations:
        sums[inv.key][(inv.start_ns // width) * width].append(inv.duration_us)
    return {
        key: [(bucket, float(np.mean(durations))) for bucket, durations in sorted(buckets.items())]
        for key, buckets in sums.items()
    }


def key_metadata(invocations: Iterable[Invocation]) -> Dict[InvocationKey, Tuple[str, str]]:
    """Majority node and service of each key's child spans, earliest value on ties."""
    nodes: Dict[InvocationKey, Counter] = defaultdict(Counter)
    services: Dict[InvocationKey, Counter] = defaultdict(Counter)
    first_seen: Dict[Tuple[InvocationKey, str, str], int] = {}
    for inv in sorted(invocations, key=lambda i: i.start_ns):
        nodes[inv.key][inv.node_name] += 1
        services[inv.key][inv.service_name] += 1
        first_seen.setdefault((inv.key, "node", inv.node_name), inv.start_ns)
        first_seen.setdefault((inv.key, "service", inv.service_name), inv.start_ns)

    def majority(key: InvocationKey, kind: str, counter: Counter) -> str:
        return min(counter, key=lambda v: (-counter[v], first_seen[(key, kind, v)]))

    return {
        key: (majority(key, "node", nodes[key]), majority(key, "service", services[key]))
        for key in nodes
    }


def train_detectors(normal_windows: Dict[InvocationKey, Sequence[Tuple[int, float]]],
                    params: ForestParams = None,
                    metadata: Dict[InvocationKey, Tuple[str, str]] = None,
                    window_s: int = DEFAULT_WINDOW_SECONDS) -> DetectorSet:
    """Fits one forest per key with at least MIN_WINDOWS window averages."""
    params = params or ForestParams()
    metadata = metadata or {}
    detectors = DetectorSet(window_seconds=window_s)
    skipped = []
    for key in sorted(normal_windows):
        averages = [avg for _, avg in normal_windows[key]]
        if len(averages) < MIN_WINDOWS:
            skipped.append(key)
            continue
        try:
            model = iforest.fit([[a] for a in averages], params)
        except TooFewSamples:
            skipped.append(key)
            continue
        node, service = metadata.get(key, ("", pod_to_service(key.child_pod)))
        detectors.detectors[key] = KeyDetector(
            model=model,
            normal_avg_duration=float(np.mean(averages)),
            node_name=node,
            service_name=service,
        )
    for key in skipped:
        LOGGER.warning(
            "Not enough normal windows to train %s -> %s (%s)",
            key.parent_pod, key.child_pod, key.operation_name,
        )
    LOGGER.info("Trained %d trace detector(s), skipped %d key(s)", len(detectors), len(skipped))
    return detectors


def anomaly_sort_key(anomaly: Union[DurationAnomaly, StatusAnomaly]) -> tuple:
    count = anomaly.anomaly_count if isinstance(anomaly, DurationAnomaly) else anomaly.occurrence_count
    extra = () if isinstance(anomaly, DurationAnomaly) else (anomaly.status_code, anomaly.status_message)
    return (-count, anomaly.parent_pod, anomaly.child_pod, anomaly.operation_name) + extra


def detect_duration(fault_windows: Dict[InvocationKey, Sequence[Tuple[int, float]]],
                    detectors: DetectorSet,
                    metadata: Dict[InvocationKey, Tuple[str, str]] = None,
                    top_n: int = TOP_N) -> List[DurationAnomaly]:
    """Scores every fault-period window average with its key's detector.

    Keys without a detector are ignored.
    """
    metadata = metadata or {}
    anomalies = []
    for key, windows in fault_windows.items():
        detector = detectors.detectors.get(key)
        if detector is None or not windows:
            continue
        averages = np.array([[avg] for _, avg in windows], dtype=float)
        labels = iforest.predict_samples(detector.model, averages)
        flagged = averages[labels == -1, 0]
        if flagged.size == 0:
            continue
        node, service = metadata.get(key, (detector.node_name, detector.service_name))
        anomalies.append(DurationAnomaly(
            node_name=node or detector.node_name,
            service_name=service or detector.service_name,
            parent_pod=key.parent_pod,
            child_pod=key.child_pod,
            operation_name=key.operation_name,
            normal_avg_duration=detector.normal_avg_duration,
            anomaly_avg_duration=float(flagged.mean()),
            anomaly_count=int(flagged.size),
        ))
    anomalies.sort(key=anomaly_sort_key)
    return anomalies[:top_n]


def detect_status(spans: Sequence[TraceSpan], context: Sequence[TraceSpan] = (),
                  top_n: int = TOP_N) -> List[StatusAnomaly]:
    """Groups failing spans (status.code != 0) by key, code and message."""
    index = _span_index(context)
    index.update(_span_index(spans))
    counts: Counter = Counter()
    first: Dict[tuple, TraceSpan] = {}
    for span in sorted(spans, key=lambda s: (s.start_ns, s.trace_id, s.span_id)):
        if span.status_code == 0:
            continue
        parent = index.get((span.trace_id, span.parent_span_id)) if span.parent_span_id else None
        key = InvocationKey(parent.pod_name if parent else ROOT_PARENT,
                            span.pod_name, span.operation_name)
        group = (key, span.status_code, span.status_message)
        counts[group] += 1
        first.setdefault(group, span)

    anomalies = [
        StatusAnomaly(
            node_name=first[group].node_name,
            service_name=span_service(first[group]),
            parent_pod=key.parent_pod,
            child_pod=key.child_pod,
            operation_name=key.operation_name,
            status_code=code,
            status_message=message,
            occurrence_count=count,
        )
        for group, count in counts.items()
        for key, code, message in [group]
    ]
    anomalies.sort(key=anomaly_sort_key)
    return anomalies[:top_n]


def render_trace_report(duration_list: Sequence[DurationAnomaly],
                        status_list: Sequence[StatusAnomaly],
                        limit: int = TOP_N) -> str:
    lines = [f"Duration anomalies (Isolation Forest, top {limit}):"]
    if duration_list:
        for a in sorted(duration_list, key=anomaly_sort_key)[:limit]:
            lines.append(
                f"node_name: {a.node_name} | service_name: {a.service_name} | "
                f"parent_pod: {a.parent_pod} | child_pod: {a.child_pod} | "
                f"operation_name: {a.operation_name} | "
                f"normal_avg_duration: {a.normal_avg_duration:.2f}us | "
                f"anomaly_avg_duration: {a.anomaly_avg_duration:.2f}us | "
                f"Number of occurrences: {a.anomaly_count}"
            )
    else:
        lines.append(NO_DURATION_ANOMALIES)

    lines.append("")
    lines.append(f"Status anomalies (status.code != 0, top {limit}):")
    if status_list:
        for a in sorted(status_list, key=anomaly_sort_key)[:limit]:
            lines.append(
                f"node_name: {a.node_name} | service_name: {a.service_name} | "
                f"parent_pod: {a.parent_pod} | child_pod: {a.child_pod} | "
                f"operation_name: {a.operation_name} | status_code: {a.status_code} | "
                f"status_message: {a.status_message} | "
                f"Number of occurrences: {a.occurrence_count}"
            )
    else:
        lines.append(NO_STATUS_ANOMALIES)
    return "\n".join(lines)


def save_detectors(detectors: DetectorSet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {
        "magic": DETECTORS_MAGIC,
        "version": DETECTORS_VERSION,
        "window_seconds": detectors.window_seconds,
        "detectors": [
            {
                "parent_pod": key.parent_pod,
                "child_pod": key.child_pod,
                "operation_name": key.operation_name,
                "normal_avg_duration": d.normal_avg_duration,
                "node_name": d.node_name,
                "service_name": d.service_name,
                "forest": d.model.to_dict(),
            }
            for key, d in sorted(detectors.detectors.items())
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, sort_keys=True)
    return path


def load_detectors(path: Union[str, Path]) -> DetectorSet:
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise CorruptModelFile(f"{path} is not valid JSON: {e}") from e
    if not isinstance(document, dict) or document.get("magic") != DETECTORS_MAGIC:
        raise CorruptModelFile(f"{path} is not a trace detector file")
    if document.get("version") != DETECTORS_VERSION:
        raise CorruptModelFile(f"Unsupported trace detector version {document.get('version')!r}")
    detectors = DetectorSet(window_seconds=int(document.get("window_seconds", DEFAULT_WINDOW_SECONDS)))
    try:
        for entry in document["detectors"]:
            key = InvocationKey(entry["parent_pod"], entry["child_pod"], entry["operation_name"])
            detectors.detectors[key] = KeyDetector(
                model=ForestModel.from_dict(entry["forest"]),
                normal_avg_duration=float(entry["normal_avg_duration"]),
                node_name=entry["node_name"],
                service_name=entry["service_name"],
            )
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptModelFile(f"Malformed trace detector entry: {e}") from e
    return detectors


def detect_trace_anomalies(spans: Sequence[TraceSpan], start_ns: int, end_ns: int,
                           detectors: Optional[DetectorSet],
                           top_n: int = TOP_N) -> Tuple[List[DurationAnomaly], List[StatusAnomaly], str]:
    """Runs both detection strategies on the spans of one fault window."""
    batch = build_invocations(spans)
    fault_invocations = invocations_in_window(batch.invocations, start_ns, end_ns)
    window_s = detectors.window_seconds if detectors else DEFAULT_WINDOW_SECONDS
    durations = []
    if detectors is not None:
        durations = detect_duration(
            window_features(fault_invocations, window_s), detectors,
            key_metadata(fault_invocations), top_n,
        )
    fault_spans = [s for s in spans if start_ns <= s.start_ns <= end_ns]
    statuses = detect_status(fault_spans, context=spans, top_n=top_n)
    return durations, statuses, render_trace_report(durations, statuses, top_n)
