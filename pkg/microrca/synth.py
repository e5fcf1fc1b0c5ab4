"""
Synthetic telemetry for a small microservice shop.

Generates hour-keyed log and trace files, per-entity metric files, an
input.json fault schedule, the matching ground truth and the pod placement.
Every random draw comes from one seeded generator, so a spec always
produces the same bytes.
"""

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .enums import FaultType, MetricLevel
from .error import InvalidSpec, MalformedTimestamp
from .ingest import hour_key, iso_to_ns, ns_to_iso
from .resources import (APM_KPIS, INFRA_NODE_KPIS, INFRA_POD_KPIS, TIDB_COMPONENTS,
                        TIDB_KPIS)
from .settings import (GROUND_TRUTH_FILE, INPUT_FILE, NS_PER_HOUR, NS_PER_SECOND,
                       NS_PER_US, TOPOLOGY_FILE)

LOGGER = logging.getLogger(__name__)

METRIC_NOISE = 0.01
DURATION_SIGMA = 0.1
BACKGROUND_STATUS = (2, "Unknown: internal error")
STORM_STATUS = (14, "Unavailable: connection refused")

# Error log templates; every variable part is a number, address or hex id
LOG_TEMPLATES = (
    "error connecting to redis at {ip} timeout {n} ms",
    "error rpc GetCart failed with code {code} after {n} ms",
    "error parsing request body of {n} bytes from {ip}",
    "error writing order {hex} to database attempt {n}",
    "error loading product catalog version {n} from cache",
    "error sending email to customer {hex} status {code}",
    "error converting currency amount {f} for request {hex}",
    "error payment charge declined for card ending {n}",
    "error shipping quote unavailable for {n} items",
    "error ad request exceeded deadline of {n} ms on shard {n}",
)

INFO_TEMPLATES = (
    "GET /product/{hex} 200 in {n} ms",
    "POST /cart 200 in {n} ms",
    "request served from cache in {n} ms",
    "health check ok after {n} ms",
)

STORM_LOG = "error rpc call to {service} failed: code = Unavailable desc = connection refused from {ip}"

APM_BASELINE = {
    "client_error_ratio": 1.0,
    "error_ratio": 1.0,
    "request": 120.0,
    "response": 120.0,
    "rrt": 25.0,
    "server_error_ratio": 1.0,
    "timeout": 1.0,
}
INFRA_POD_BASELINE = {
    "pod_cpu_usage": 20.0,
    "pod_memory_working_set_bytes": 5.0e8,
    "pod_fs_reads_bytes": 2.0e4,
    "pod_fs_writes_bytes": 4.0e4,
    "pod_network_receive_bytes": 3.0e5,
    "pod_network_receive_packets": 900.0,
    "pod_network_transmit_bytes": 2.5e5,
    "pod_network_transmit_packets": 800.0,
    "pod_processes": 12.0,
}
INFRA_NODE_BASELINE = {
    "node_cpu_usage_rate": 25.0,
    "node_memory_usage_rate": 45.0,
    "node_disk_read_bytes_total": 1.0e6,
    "node_disk_written_bytes_total": 3.0e6,
    "node_disk_read_time_seconds_total": 2.0,
    "node_disk_write_time_seconds_total": 5.0,
    "node_filesystem_usage_rate": 60.0,
    "node_network_receive_bytes_total": 4.0e6,
    "node_network_transmit_bytes_total": 3.5e6,
    "node_network_receive_packets_total": 9.0e3,
    "node_network_transmit_packets_total": 8.5e3,
    "node_sockstat_TCP_inuse": 300.0,
}
TIDB_BASELINE = {kpi: 50.0 for kpi in TIDB_KPIS}


@dataclass(frozen=True)
class Edge:
    parent: str
    child: str
    operation: str
    baseline_us: int


@dataclass(frozen=True)
class Injection:
    uuid: str
    type: FaultType
    start_ns: int
    end_ns: int
    parent: Optional[str] = None
    child: Optional[str] = None
    operation: Optional[str] = None
    node: Optional[str] = None
    multiplier: float = 1.0
    rate: float = 0.0

    def active(self, t_ns: int) -> bool:
        return self.start_ns <= t_ns <= self.end_ns

    @property
    def component(self) -> str:
        return self.node if self.type is FaultType.NODE_CPU_SATURATION else self.child

    @property
    def reason(self) -> str:
        if self.type is FaultType.LATENCY_SPIKE:
            return f"latency of {self.operation} calls from {self.parent} increased {self.multiplier:g}x"
        if self.type is FaultType.ERROR_STORM:
            return f"{self.operation} calls from {self.parent} failing at rate {self.rate:g}"
        return f"cpu saturation on node {self.node}"


@dataclass
class SynthSpec:
    seed: int
    start_ns: int
    end_ns: int
    trace_interval_s: int
    log_interval_s: int
    metric_interval_s: int
    background_error_rate: float
    nodes: List[str]
    services: Dict[str, int]
    entry: str
    edges: List[Edge]
    faults: List[Injection] = field(default_factory=list)

    @property
    def pods(self) -> Dict[str, List[str]]:
        return {s: [f"{s}-{i}" for i in range(n)] for s, n in self.services.items()}

    @property
    def placement(self) -> Dict[str, str]:
        """Round-robin pod placement over the nodes, in declaration order."""
        all_pods = [p for pods in self.pods.values() for p in pods]
        return {pod: self.nodes[i % len(self.nodes)] for i, pod in enumerate(all_pods)}


@dataclass
class SynthResult:
    out_dir: Path
    files: List[Path]
    spans: int = 0
    log_lines: int = 0
    metric_points: int = 0


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise InvalidSpec(message)


def _time(value, what: str) -> int:
    try:
        return iso_to_ns(value)
    except MalformedTimestamp as e:
        raise InvalidSpec(f"{what}: {e}") from e


def _check_acyclic(edges: Sequence[Edge]) -> None:
    graph = defaultdict(list)
    for e in edges:
        graph[e.parent].append(e.child)
    state: Dict[str, int] = {}

    def visit(node: str) -> None:
        state[node] = 1
        for child in graph[node]:
            _require(state.get(child) != 1, f"call edges form a cycle through '{child}'")
            if child not in state:
                visit(child)
        state[node] = 2

    for node in list(graph):
        if node not in state:
            visit(node)


def parse_spec(raw: Mapping) -> SynthSpec:
    """Validates a raw spec mapping."""
    _require(isinstance(raw, Mapping), "spec must be a mapping")
    try:
        topo = raw["topology"]
        start_ns = _time(raw["start"], "start")
        hours = raw["hours"]
        _require(isinstance(hours, int) and hours > 0, f"hours must be a positive integer, got {hours!r}")
        spec = SynthSpec(
            seed=int(raw.get("seed", 0)),
            start_ns=start_ns,
            end_ns=start_ns + hours * NS_PER_HOUR,
            trace_interval_s=int(raw.get("trace_interval_s", 3)),
            log_interval_s=int(raw.get("log_interval_s", 20)),
            metric_interval_s=int(raw.get("metric_interval_s", 60)),
            background_error_rate=float(raw.get("background_error_rate", 0.0)),
            nodes=list(topo["nodes"]),
            services={str(k): int(v) for k, v in topo["services"].items()},
            entry=topo["entry"],
            edges=[
                Edge(e["parent"], e["child"], e["operation"], int(e["baseline_us"]))
                for e in topo["edges"]
            ],
        )
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise InvalidSpec(f"malformed spec: {type(e).__name__}: {e}") from e

    for name in ("trace_interval_s", "log_interval_s", "metric_interval_s"):
        _require(getattr(spec, name) > 0, f"{name} must be positive")
    _require(0.0 <= spec.background_error_rate < 1.0, "background_error_rate must be in [0, 1)")
    _require(bool(spec.nodes), "topology needs at least one node")
    _require(all(n > 0 for n in spec.services.values()), "every service needs at least one pod")
    _require(spec.entry in spec.services, f"entry service '{spec.entry}' is not a service")
    for e in spec.edges:
        _require(e.parent in spec.services and e.child in spec.services,
                 f"edge {e.parent} -> {e.child} references an unknown service")
        _require(e.baseline_us > 0, f"edge {e.parent} -> {e.child} needs a positive baseline")
    _check_acyclic(spec.edges)

    pods = {p for ps in spec.pods.values() for p in ps}
    seen = set()
    for i, f in enumerate(raw.get("faults", [])):
        try:
            fault_type = FaultType(f["type"])
            target = f["target"]
            injection = Injection(
                uuid=str(f["uuid"]),
                type=fault_type,
                start_ns=_time(f["start"], f"fault {i} start"),
                end_ns=_time(f["end"], f"fault {i} end"),
                parent=target.get("parent"),
                child=target.get("child"),
                operation=target.get("operation"),
                node=target.get("node"),
                multiplier=float(f.get("multiplier", 1.0)),
                rate=float(f.get("rate", 0.0)),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise InvalidSpec(f"fault {i} is malformed: {type(e).__name__}: {e}") from e

        _require(injection.uuid not in seen, f"duplicate fault uuid '{injection.uuid}'")
        seen.add(injection.uuid)
        _require(injection.start_ns < injection.end_ns, f"fault {injection.uuid} ends before it starts")
        _require(spec.start_ns <= injection.start_ns and injection.end_ns < spec.end_ns,
                 f"fault {injection.uuid} window lies outside the generated time range")
        if fault_type is FaultType.NODE_CPU_SATURATION:
            _require(injection.node in spec.nodes, f"fault {injection.uuid}: unknown node {injection.node!r}")
            _require(injection.multiplier > 1.0, f"fault {injection.uuid}: multiplier must exceed 1")
        else:
            _require(injection.parent in pods and injection.child in pods,
                     f"fault {injection.uuid}: unknown pods {injection.parent!r} -> {injection.child!r}")
            _require(
                any(e.operation == injection.operation for e in spec.edges),
                f"fault {injection.uuid}: unknown operation {injection.operation!r}",
            )
            if fault_type is FaultType.LATENCY_SPIKE:
                _require(injection.multiplier > 0, f"fault {injection.uuid}: multiplier must be positive")
            else:
                _require(0.0 < injection.rate <= 1.0, f"fault {injection.uuid}: rate must be in (0, 1]")
        spec.faults.append(injection)
    return spec


class _Writer:
    """Buffers JSONL lines per file."""

    def __init__(self) -> None:
        self.lines: Dict[Path, List[Tuple[tuple, str]]] = defaultdict(list)

    def add(self, path: Path, sort_key: tuple, obj: dict) -> None:
        self.lines[path].append((sort_key, json.dumps(obj, sort_keys=True)))

    def flush(self) -> List[Path]:
        for path, entries in self.lines.items():
            path.parent.mkdir(parents=True, exist_ok=True)
            entries.sort(key=lambda e: e[0])
            with open(path, "w", encoding="utf-8") as f:
                f.writelines(line + "\n" for _, line in entries)
        return sorted(self.lines, key=str)


def _fill(template: str, rng: np.random.Generator, **fixed: str) -> str:
    values = {
        "n": lambda: str(int(rng.integers(1, 5000))),
        "code": lambda: str(int(rng.integers(400, 600))),
        "ip": lambda: f"10.233.{int(rng.integers(0, 256))}.{int(rng.integers(1, 255))}",
        "hex": lambda: "".join("0123456789abcdef"[i] for i in rng.integers(0, 16, size=12)),
        "f": lambda: f"{rng.uniform(1, 1000):.2f}",
    }
    out = template
    for key, value in fixed.items():
        out = out.replace("{" + key + "}", value)
    while "{" in out:
        start = out.index("{")
        end = out.index("}", start)
        out = out[:start] + values[out[start + 1:end]]() + out[end + 1:]
    return out


def synth_log_corpus(per_template: int, seed: int = 0) -> List[Tuple[int, str]]:
    """(template index, message) pairs, interleaved in a seeded random order."""
    rng = np.random.default_rng(seed)
    corpus = [(i, _fill(t, rng)) for i, t in enumerate(LOG_TEMPLATES) for _ in range(per_template)]
    order = rng.permutation(len(corpus))
    return [corpus[i] for i in order]


def _date_dir(out_dir: Path, t_ns: int) -> Path:
    return out_dir / hour_key(t_ns)[:10]


def _noisy(rng: np.random.Generator, baseline: float) -> float:
    return round(float(baseline * (1.0 + METRIC_NOISE * rng.standard_normal())), 4)


class _TraceBuilder:
    def __init__(self, spec: SynthSpec, rng: np.random.Generator, writer: _Writer, out_dir: Path) -> None:
        self.spec = spec
        self.rng = rng
        self.writer = writer
        self.out_dir = out_dir
        self.pods = spec.pods
        self.placement = spec.placement
        self.children = defaultdict(list)
        for e in spec.edges:
            self.children[e.parent].append(e)
        self.spans = 0
        self.storm_logs: List[Tuple[int, str, str]] = []

    def _emit(self, trace_id: str, span_id: str, parent_id: Optional[str], pod: str,
              service: str, operation: str, start_us: int, duration_us: int,
              status: Tuple[int, str]) -> None:
        start_ns = start_us * NS_PER_US
        path = _date_dir(self.out_dir, start_ns) / "trace" / f"trace_{hour_key(start_ns)}.jsonl"
        obj = {
            "traceID": trace_id,
            "spanID": span_id,
            "parentSpanID": parent_id or "",
            "startTime": start_us,
            "duration": duration_us,
            "operationName": operation,
            "process": {
                "pod_name": pod,
                "service_name": service,
                "node_name": self.placement[pod],
            },
            "tags": {"status.code": status[0], "status.message": status[1] if status[0] else ""},
        }
        self.writer.add(path, (start_us, trace_id, span_id), obj)
        self.spans += 1

    def _status(self, parent_pod: str, child_pod: str, operation: str, t_ns: int) -> Tuple[int, str]:
        for f in self.spec.faults:
            if (f.type is FaultType.ERROR_STORM and f.active(t_ns) and f.parent == parent_pod
                    and f.child == child_pod and f.operation == operation):
                if self.rng.random() < f.rate:
                    return STORM_STATUS
                return 0, ""
        if self.rng.random() < self.spec.background_error_rate:
            return BACKGROUND_STATUS
        return 0, ""

    def _duration(self, edge: Edge, parent_pod: str, child_pod: str, t_ns: int) -> int:
        duration = edge.baseline_us * float(np.exp(DURATION_SIGMA * self.rng.standard_normal()))
        for f in self.spec.faults:
            if (f.type is FaultType.LATENCY_SPIKE and f.active(t_ns) and f.parent == parent_pod
                    and f.child == child_pod and f.operation == edge.operation):
                duration *= f.multiplier
        return max(1, int(round(duration)))

    def _calls(self, trace_id: str, ids: List[int], parent_id: str, service: str,
               pod: str, start_us: int) -> int:
        """Emits the downstream spans of one pod and returns their total duration."""
        total = 0
        for edge in self.children[service]:
            child_pods = self.pods[edge.child]
            child_pod = child_pods[int(self.rng.integers(len(child_pods)))]
            ids[0] += 1
            span_id = f"{trace_id[:8]}{ids[0]:08x}"
            span_start = start_us + 50 + total
            t_ns = span_start * NS_PER_US
            duration = self._duration(edge, pod, child_pod, t_ns)
            status = self._status(pod, child_pod, edge.operation, t_ns)
            self._emit(trace_id, span_id, parent_id, child_pod, edge.child, edge.operation,
                       span_start, duration, status)
            if status == STORM_STATUS:
                self.storm_logs.append((t_ns, pod, edge.child))
            self._calls(trace_id, ids, span_id, edge.child, child_pod, span_start + 10)
            total += duration + 50
        return total

    def build(self) -> None:
        entry_pods = self.pods[self.spec.entry]
        step = self.spec.trace_interval_s * NS_PER_SECOND
        for tick, t_ns in enumerate(range(self.spec.start_ns, self.spec.end_ns, step)):
            for i, pod in enumerate(entry_pods):
                trace_id = f"{tick:08x}{i:08x}"
                start_us = t_ns // NS_PER_US + int(self.rng.integers(0, 1_000_000))
                ids = [0]
                root_id = f"{trace_id[:8]}{0:08x}"
                total = self._calls(trace_id, ids, root_id, self.spec.entry, pod, start_us)
                self._emit(trace_id, root_id, None, pod, self.spec.entry,
                           f"{self.spec.entry}/handle", start_us, total + 200, (0, ""))


def _write_logs(spec: SynthSpec, rng: np.random.Generator, writer: _Writer, out_dir: Path,
                storm_logs: Sequence[Tuple[int, str, str]]) -> int:
    placement = spec.placement
    count = 0

    def add(t_ns: int, pod: str, message: str) -> None:
        nonlocal count
        t_ns -= t_ns % NS_PER_SECOND
        path = _date_dir(out_dir, t_ns) / "log" / f"log_{hour_key(t_ns)}.jsonl"
        obj = {
            "@timestamp": ns_to_iso(t_ns),
            "k8_pod": pod,
            "k8_node_name": placement[pod],
            "message": message,
        }
        writer.add(path, (t_ns, pod, message), obj)
        count += 1

    step = spec.log_interval_s * NS_PER_SECOND
    for t_ns in range(spec.start_ns, spec.end_ns, step):
        for pod in placement:
            if rng.random() < spec.background_error_rate:
                template = LOG_TEMPLATES[int(rng.integers(len(LOG_TEMPLATES)))]
            else:
                template = INFO_TEMPLATES[int(rng.integers(len(INFO_TEMPLATES)))]
            add(t_ns, pod, _fill(template, rng))
    for t_ns, pod, child_service in storm_logs:
        add(t_ns, pod, _fill(STORM_LOG, rng, service=child_service))
    return count


def _metric_value(spec: SynthSpec, level: MetricLevel, entity: str, kpi: str,
                  baseline: float, t_ns: int) -> float:
    placement = spec.placement
    for f in spec.faults:
        if not f.active(t_ns):
            continue
        if f.type is FaultType.LATENCY_SPIKE and level is MetricLevel.APM \
                and entity == f.child and kpi == "rrt":
            baseline *= f.multiplier
        elif f.type is FaultType.ERROR_STORM and level is MetricLevel.APM \
                and entity == f.child and kpi in ("error_ratio", "server_error_ratio"):
            baseline += 100.0 * f.rate
        elif f.type is FaultType.NODE_CPU_SATURATION:
            if level is MetricLevel.INFRA_NODE and entity == f.node and kpi == "node_cpu_usage_rate":
                baseline *= f.multiplier
            elif level is MetricLevel.INFRA_POD and placement.get(entity) == f.node \
                    and kpi == "pod_cpu_usage":
                baseline *= f.multiplier
    return baseline


def _write_metrics(spec: SynthSpec, rng: np.random.Generator, writer: _Writer, out_dir: Path) -> int:
    pods = list(spec.placement)
    series: List[Tuple[MetricLevel, str, str, float]] = []
    series += [(MetricLevel.APM, p, k, APM_BASELINE[k]) for p in pods for k in APM_KPIS]
    series += [(MetricLevel.INFRA_POD, p, k, INFRA_POD_BASELINE[k]) for p in pods for k in INFRA_POD_KPIS]
    series += [(MetricLevel.INFRA_NODE, n, k, INFRA_NODE_BASELINE[k]) for n in spec.nodes for k in INFRA_NODE_KPIS]
    series += [(MetricLevel.INFRA_TIDB, c, k, TIDB_BASELINE[k]) for c in TIDB_COMPONENTS for k in TIDB_KPIS]

    count = 0
    step = spec.metric_interval_s * NS_PER_SECOND
    for t_ns in range(spec.start_ns, spec.end_ns, step):
        for level, entity, kpi, baseline in series:
            value = _noisy(rng, _metric_value(spec, level, entity, kpi, baseline, t_ns))
            path = _date_dir(out_dir, t_ns) / "metric" / level.value / f"{entity}.jsonl"
            obj = {"time": ns_to_iso(t_ns), "level": level.value, "entity": entity,
                   "kpi_key": kpi, "value": value}
            writer.add(path, (t_ns, kpi), obj)
            count += 1
    return count


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def fault_description(injection: Injection) -> str:
    return (
        f"The system experienced an anomaly from {ns_to_iso(injection.start_ns)} "
        f"to {ns_to_iso(injection.end_ns)}. Please infer the possible cause."
    )


def generate_dataset(raw_spec: Union[Mapping, SynthSpec], out_dir: Union[str, Path]) -> SynthResult:
    spec = raw_spec if isinstance(raw_spec, SynthSpec) else parse_spec(raw_spec)
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    writer = _Writer()

    traces = _TraceBuilder(spec, rng, writer, out_dir)
    traces.build()
    log_lines = _write_logs(spec, rng, writer, out_dir, traces.storm_logs)
    metric_points = _write_metrics(spec, rng, writer, out_dir)
    files = writer.flush()

    faults = sorted(spec.faults, key=lambda f: (f.start_ns, f.uuid))
    files.append(_write_json(out_dir / INPUT_FILE, [
        {"Anomaly Description": fault_description(f), "uuid": f.uuid} for f in faults
    ]))
    files.append(_write_json(out_dir / GROUND_TRUTH_FILE, [
        {"uuid": f.uuid, "component": f.component, "fault_type": f.type.value, "reason": f.reason}
        for f in faults
    ]))
    files.append(_write_json(out_dir / TOPOLOGY_FILE, spec.placement))

    LOGGER.info(
        "Generated %d spans, %d log lines and %d metric points under %s",
        traces.spans, log_lines, metric_points, out_dir,
    )
    return SynthResult(out_dir, files, traces.spans, log_lines, metric_points)
