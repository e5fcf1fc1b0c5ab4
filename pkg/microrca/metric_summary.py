"""
Metric evidence: normal-window selection, extreme-value trimming, the
symmetric change ratio filter and the two-stage phenomenon summary.

Stage one covers service-level metrics (apm and tidb), stage two covers
infrastructure metrics grouped node first, then the pods placed on it.
"""

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .enums import MetricLevel
from .error import LlmError, MissingTopology, NoNormalWindow
from .ingest import FaultCase, LogRecord, MetricPoint, TraceSpan, ns_to_iso
from .llm_gateway import LlmRequest
from .log_extract import pod_to_service
from .resources import TIDB_COMPONENTS, load_prompt, render_template
from .settings import NS_PER_MINUTE

LOGGER = logging.getLogger(__name__)

EPS = 1e-9
SIGNIFICANCE = 0.05
EXCLUSION_NS = 10 * NS_PER_MINUTE
FALLBACK_NS = 60 * NS_PER_MINUTE
TRIM_MIN_COUNT = 10
TRIM_EACH_SIDE = 2
PERCENTILES = (25, 50, 75, 99)

NO_SIGNIFICANT_METRICS = "NO SIGNIFICANT METRIC CHANGES IN WINDOW"
METRIC_SUMMARY_UNAVAILABLE = "METRIC SUMMARY UNAVAILABLE"
NO_NORMAL_WINDOW = "NO NORMAL WINDOW AVAILABLE FOR METRIC COMPARISON"
TOPOLOGY_UNAVAILABLE = "pod placement unknown, pods listed without their nodes"

SERVICE_LEVELS = (MetricLevel.APM, MetricLevel.INFRA_TIDB)
INFRA_LEVELS = (MetricLevel.INFRA_NODE, MetricLevel.INFRA_POD)

Window = Tuple[int, int]


@dataclass(frozen=True)
class Stats:
    count: int
    mean: float
    std: float
    min: float
    p25: float
    p50: float
    p75: float
    p99: float
    max: float

    @classmethod
    def of(cls, values: Sequence[float]) -> "Stats":
        if len(values) == 0:
            return cls(0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        arr = np.asarray(values, dtype=float)
        p25, p50, p75, p99 = np.percentile(arr, PERCENTILES)
        return cls(
            count=int(arr.size),
            mean=float(arr.mean()),
            std=float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
            min=float(arr.min()),
            p25=float(p25),
            p50=float(p50),
            p75=float(p75),
            p99=float(p99),
            max=float(arr.max()),
        )

    def rounded(self, digits: int = 4) -> dict:
        return {k: (round(v, digits) if isinstance(v, float) else v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class MetricComparison:
    level: MetricLevel
    entity: str
    kpi_key: str
    normal: Stats
    fault: Stats
    p50_ratio: float
    p99_ratio: float
    significant: bool

    @property
    def strength(self) -> float:
        return max(self.p50_ratio, self.p99_ratio)


@dataclass(frozen=True)
class PhenomenonSummary:
    stage1_text: str
    stage2_text: str


def normal_windows(schedule: Sequence[FaultCase], case: FaultCase) -> List[Window]:
    """Fault-free comparison windows before and after a case.

    The ten minutes before the fault and after the previous fault are left
    out. A case without a neighbour falls back to an hour on that side.
    """
    ordered = sorted(schedule, key=lambda c: (c.start_ns, c.uuid))
    index = next((i for i, c in enumerate(ordered) if c.uuid == case.uuid), None)
    if index is None:
        raise ValueError(f"Case {case.uuid} is not part of the schedule")
    prev = ordered[index - 1] if index > 0 else None
    nxt = ordered[index + 1] if index + 1 < len(ordered) else None

    before_start = prev.end_ns + EXCLUSION_NS if prev else case.start_ns - FALLBACK_NS
    before = (before_start, case.start_ns - EXCLUSION_NS)
    after = (case.end_ns + EXCLUSION_NS, nxt.start_ns if nxt else case.end_ns + FALLBACK_NS)

    windows = [w for w in (before, after) if w[1] > w[0]]
    if not windows:
        raise NoNormalWindow(
            f"Case {case.uuid}: neighbouring faults leave no normal period around "
            f"{ns_to_iso(case.start_ns)} - {ns_to_iso(case.end_ns)}"
        )
    return windows


def trim_extremes(values: Sequence[float]) -> List[float]:
    """Drops the two smallest and two largest values once there are at least ten."""
    values = list(values)
    if len(values) < TRIM_MIN_COUNT:
        return values
    ranked = sorted(range(len(values)), key=lambda i: (values[i], i))
    dropped = set(ranked[:TRIM_EACH_SIDE] + ranked[-TRIM_EACH_SIDE:])
    return [v for i, v in enumerate(values) if i not in dropped]


def symmetric_ratio(fault_stat: float, normal_stat: float, eps: float = EPS) -> float:
    return abs(fault_stat - normal_stat) / ((fault_stat + normal_stat) / 2 + eps)


def _in_windows(t: int, windows: Iterable[Window]) -> bool:
    return any(start <= t <= end for start, end in windows)


def compare_metrics(points: Iterable[MetricPoint], case: FaultCase, windows: Sequence[Window],
                    eps: float = EPS,
                    threshold: float = SIGNIFICANCE) -> Tuple[List[MetricComparison], List[str]]:
    """Compares every (level, entity, kpi) series between the normal and fault periods."""
    normal: Dict[tuple, List[float]] = defaultdict(list)
    fault: Dict[tuple, List[float]] = defaultdict(list)
    for p in sorted(points, key=lambda p: (p.time_ns, p.level.value, p.entity, p.kpi_key)):
        series = (p.level, p.entity, p.kpi_key)
        if case.start_ns <= p.time_ns <= case.end_ns:
            fault[series].append(p.value)
        elif _in_windows(p.time_ns, windows):
            normal[series].append(p.value)

    comparisons, notes = [], []
    for series in sorted(set(normal) | set(fault), key=lambda s: (s[0].value, s[1], s[2])):
        level, entity, kpi = series
        if not fault.get(series):
            notes.append(f"{level.value} {entity} {kpi}: no samples in the fault window")
            continue
        if not normal.get(series):
            notes.append(f"{level.value} {entity} {kpi}: no samples in the normal window")
            continue
        n = Stats.of(trim_extremes(normal[series]))
        f = Stats.of(fault[series])
        p50_ratio = symmetric_ratio(f.p50, n.p50, eps)
        p99_ratio = symmetric_ratio(f.p99, n.p99, eps)
        comparisons.append(MetricComparison(
            level=level,
            entity=entity,
            kpi_key=kpi,
            normal=n,
            fault=f,
            p50_ratio=p50_ratio,
            p99_ratio=p99_ratio,
            significant=max(p50_ratio, p99_ratio) >= threshold,
        ))
    return comparisons, notes


def compare_and_filter(points: Iterable[MetricPoint], case: FaultCase, windows: Sequence[Window],
                       eps: float = EPS, threshold: float = SIGNIFICANCE,
                       notes: Optional[List[str]] = None) -> List[MetricComparison]:
    comparisons, skipped = compare_metrics(points, case, windows, eps, threshold)
    if notes is not None:
        notes.extend(skipped)
    kept = [c for c in comparisons if c.significant]
    LOGGER.info(
        "Case %s: %d of %d metric series changed significantly",
        case.uuid, len(kept), len(comparisons),
    )
    return kept


def _kpi_block(comparisons: Iterable[MetricComparison]) -> Dict[str, dict]:
    return {
        c.kpi_key: {
            "normal": c.normal.rounded(),
            "fault": c.fault.rounded(),
            "p50_ratio": round(c.p50_ratio, 4),
            "p99_ratio": round(c.p99_ratio, 4),
        }
        for c in sorted(comparisons, key=lambda c: c.kpi_key)
    }


def _dumps(document: dict) -> str:
    return json.dumps(document, sort_keys=True, separators=(",", ":"))


def _service_of(comparison: MetricComparison) -> str:
    if comparison.level is MetricLevel.INFRA_TIDB:
        # tidb-tidb-0 -> tidb-tidb
        for component in TIDB_COMPONENTS:
            if comparison.entity.startswith(component):
                return component
        return comparison.entity
    return pod_to_service(comparison.entity)


def build_stage1_payload(comparisons: Sequence[MetricComparison]) -> str:
    """service -> pod -> kpi -> {normal, fault}, for apm and tidb metrics."""
    grouped: Dict[str, Dict[str, List[MetricComparison]]] = defaultdict(lambda: defaultdict(list))
    for c in comparisons:
        if c.level in SERVICE_LEVELS:
            grouped[_service_of(c)][c.entity].append(c)

    document = {
        "empty": not grouped,
        "services": [
            {
                "service": service,
                "pods": [
                    {"pod": pod, "metrics": _kpi_block(grouped[service][pod])}
                    for pod in sorted(grouped[service])
                ],
            }
            for service in sorted(grouped)
        ],
    }
    if not grouped:
        document["note"] = NO_SIGNIFICANT_METRICS
    return _dumps(document)


def _require_topology(topology: Optional[Mapping[str, str]]) -> Mapping[str, str]:
    if not topology:
        raise MissingTopology("No pod to node placement known for this window")
    return topology


def build_stage2_payload(comparisons: Sequence[MetricComparison], stage1_text: str,
                         topology: Optional[Mapping[str, str]]) -> str:
    """Node metrics followed by the metrics of the pods placed on that node.

    Nodes are ordered by their strongest change, pods by name.
    """
    node_metrics: Dict[str, List[MetricComparison]] = defaultdict(list)
    pod_metrics: Dict[str, List[MetricComparison]] = defaultdict(list)
    for c in comparisons:
        if c.level is MetricLevel.INFRA_NODE:
            node_metrics[c.entity].append(c)
        elif c.level is MetricLevel.INFRA_POD:
            pod_metrics[c.entity].append(c)

    document = {
        "empty": not node_metrics and not pod_metrics,
        "stage1_summary": stage1_text,
    }
    try:
        placement = _require_topology(topology)
    except MissingTopology as e:
        LOGGER.warning("%s", e)
        document["nodes"] = []
        document["unassigned"] = [
            {"pod": pod, "metrics": _kpi_block(pod_metrics[pod])} for pod in sorted(pod_metrics)
        ]
        document["note"] = TOPOLOGY_UNAVAILABLE
        return _dumps(document)

    pods_by_node: Dict[str, List[str]] = defaultdict(list)
    unassigned = []
    for pod in sorted(pod_metrics):
        node = placement.get(pod)
        if node is None:
            unassigned.append(pod)
        else:
            pods_by_node[node].append(pod)

    def strength(node: str) -> float:
        changes = node_metrics.get(node, []) + [
            c for pod in pods_by_node.get(node, []) for c in pod_metrics[pod]
        ]
        return max((c.strength for c in changes), default=0.0)

    nodes = sorted(set(node_metrics) | set(pods_by_node), key=lambda n: (-strength(n), n))
    document["nodes"] = [
        {
            "node": node,
            "metrics": _kpi_block(node_metrics.get(node, [])),
            "pods": [
                {"pod": pod, "metrics": _kpi_block(pod_metrics[pod])}
                for pod in pods_by_node.get(node, [])
            ],
        }
        for node in nodes
    ]
    document["unassigned"] = [
        {"pod": pod, "metrics": _kpi_block(pod_metrics[pod])} for pod in unassigned
    ]
    if document["empty"]:
        document["note"] = NO_SIGNIFICANT_METRICS
    return _dumps(document)


def payload_is_empty(payload: str) -> bool:
    return bool(json.loads(payload).get("empty"))


def summarize(gateway, stage: int, payload: str, stage1_summary: str = "",
              prompts_dir: Optional[Path] = None) -> str:
    """Asks the model to describe the changes in a payload, without judging the cause."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if payload_is_empty(payload):
        return NO_SIGNIFICANT_METRICS
    prompt = render_template(
        load_prompt(f"stage{stage}", prompts_dir),
        payload=payload,
        stage1_summary=stage1_summary,
    )
    try:
        return gateway.complete(LlmRequest(prompt=prompt, tag=f"stage{stage}"))
    except LlmError as e:
        LOGGER.error("Stage %d metric summary failed: %s", stage, e)
        return METRIC_SUMMARY_UNAVAILABLE


def derive_topology(log_records: Iterable[LogRecord] = (),
                    spans: Iterable[TraceSpan] = (),
                    fallback: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    """Pod placement seen in the telemetry, completed from a fallback map."""
    topology = dict(fallback or {})
    for record in log_records:
        if record.k8_node_name:
            topology[record.k8_pod] = record.k8_node_name
    for span in spans:
        if span.node_name:
            topology[span.pod_name] = span.node_name
    return topology


def load_topology(path: Union[str, Path, None]) -> Dict[str, str]:
    if not path or not Path(path).exists():
        return {}
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        LOGGER.warning("Ignoring topology file %s: expected a pod to node object", path)
        return {}
    return {str(k): str(v) for k, v in data.items()}


def render_metric_report(summary: PhenomenonSummary, notes: Sequence[str] = ()) -> str:
    lines = [
        "Service level phenomena:",
        summary.stage1_text,
        "",
        "Infrastructure phenomena:",
        summary.stage2_text,
    ]
    if notes:
        lines += ["", f"Notes ({len(notes)} series skipped):"] + [f"- {n}" for n in notes]
    return "\n".join(lines)


def extract_metric_evidence(points: Sequence[MetricPoint], schedule: Sequence[FaultCase],
                            case: FaultCase, gateway,
                            topology: Optional[Mapping[str, str]] = None,
                            eps: float = EPS, threshold: float = SIGNIFICANCE,
                            prompts_dir: Optional[Path] = None,
                            ) -> Tuple[List[MetricComparison], PhenomenonSummary, str]:
    """Runs the whole metric pipeline for one case."""
    try:
        windows = normal_windows(schedule, case)
    except NoNormalWindow as e:
        LOGGER.warning("%s", e)
        summary = PhenomenonSummary(NO_NORMAL_WINDOW, NO_NORMAL_WINDOW)
        return [], summary, render_metric_report(summary)

    notes: List[str] = []
    kept = compare_and_filter(points, case, windows, eps, threshold, notes)
    stage1 = summarize(gateway, 1, build_stage1_payload(kept), prompts_dir=prompts_dir)
    stage2 = summarize(
        gateway, 2, build_stage2_payload(kept, stage1, topology),
        stage1_summary=stage1, prompts_dir=prompts_dir,
    )
    summary = PhenomenonSummary(stage1, stage2)
    return kept, summary, render_metric_report(summary, notes)
