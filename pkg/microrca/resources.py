"""
Static reference data: metric catalogs, default masking rules, prompt
templates and the default synthetic dataset description.
"""

from copy import deepcopy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Optional, Tuple

from .enums import MetricLevel
from .error import ConfigError
from .settings import PROMPTS_DIR


APM_KPIS = (
    "client_error_ratio",
    "error_ratio",
    "request",
    "response",
    "rrt",
    "server_error_ratio",
    "timeout",
)

INFRA_POD_KPIS = (
    "pod_cpu_usage",
    "pod_memory_working_set_bytes",
    "pod_fs_reads_bytes",
    "pod_fs_writes_bytes",
    "pod_network_receive_bytes",
    "pod_network_receive_packets",
    "pod_network_transmit_bytes",
    "pod_network_transmit_packets",
    "pod_processes",
)

INFRA_NODE_KPIS = (
    "node_cpu_usage_rate",
    "node_memory_usage_rate",
    "node_disk_read_bytes_total",
    "node_disk_written_bytes_total",
    "node_disk_read_time_seconds_total",
    "node_disk_write_time_seconds_total",
    "node_filesystem_usage_rate",
    "node_network_receive_bytes_total",
    "node_network_transmit_bytes_total",
    "node_network_receive_packets_total",
    "node_network_transmit_packets_total",
    "node_sockstat_TCP_inuse",
)

# Four node slots are left open for deployment-specific keys
NODE_KPI_SLOTS = 16

TIDB_KPIS = (
    "failed_query_ops",
    "duration_99th",
    "connection_count",
    "server_is_up",
    "cpu_usage",
    "memory_usage",
    "store_up_count",
    "store_down_count",
    "store_unhealth_count",
    "storage_used_ratio",
    "available_size",
    "raft_propose_wait",
    "raft_apply_wait",
    "rocksdb_write_stall",
)

TIDB_COMPONENTS = ("tidb-tidb", "tidb-tikv", "tidb-pd")


@dataclass(frozen=True)
class MetricCatalog:
    """Closed per-level sets of accepted kpi keys."""
    apm: FrozenSet[str] = frozenset(APM_KPIS)
    infra_pod: FrozenSet[str] = frozenset(INFRA_POD_KPIS)
    infra_node: FrozenSet[str] = frozenset(INFRA_NODE_KPIS)
    tidb: FrozenSet[str] = frozenset(TIDB_KPIS)

    def keys_for(self, level: MetricLevel) -> FrozenSet[str]:
        return {
            MetricLevel.APM: self.apm,
            MetricLevel.INFRA_POD: self.infra_pod,
            MetricLevel.INFRA_NODE: self.infra_node,
            MetricLevel.INFRA_TIDB: self.tidb,
        }[MetricLevel(level)]

    def accepts(self, level: MetricLevel, kpi_key: str) -> bool:
        return kpi_key in self.keys_for(level)

    def with_extra_node_kpis(self, extra: Iterable[str]) -> "MetricCatalog":
        extra = [k for k in extra if k not in self.infra_node]
        if len(self.infra_node) + len(extra) > NODE_KPI_SLOTS:
            raise ConfigError(
                f"At most {NODE_KPI_SLOTS - len(INFRA_NODE_KPIS)} extra node kpis "
                f"can be configured, got {len(extra)}"
            )
        return MetricCatalog(
            apm=self.apm,
            infra_pod=self.infra_pod,
            infra_node=self.infra_node | frozenset(extra),
            tidb=self.tidb,
        )


DEFAULT_CATALOG = MetricCatalog()


# (pattern, replacement) pairs applied to whole whitespace-separated tokens
DEFAULT_MASKING_RULES: Tuple[Tuple[str, str], ...] = (
    (r"\d{1,3}(?:\.\d{1,3}){3}(?::\d+)?[,;.]?", "<*>"),   # IPv4, optional port
    (r"(?:0x)?[0-9a-fA-F]{8,}[,;.]?", "<*>"),             # hex ids
    (r"[-+]?\d+(?:\.\d+)?[,;.]?", "<*>"),                 # numbers
    (r"\S*=\S*\d\S*", "<*>"),                             # key=value with digits
)


PROMPT_NAMES = ("stage1", "stage2", "rca")


def load_prompt(name: str, prompts_dir: Optional[Path] = None) -> str:
    """Loads a prompt template, preferring an override directory."""
    if name not in PROMPT_NAMES:
        raise ConfigError(f"Unknown prompt template: '{name}'")
    candidates = []
    if prompts_dir:
        candidates.append(Path(prompts_dir) / f"{name}.txt")
    candidates.append(PROMPTS_DIR / f"{name}.txt")
    for path in candidates:
        if path.exists():
            return path.read_text(encoding="utf-8")
    raise ConfigError(f"Prompt template '{name}' not found in {candidates}")


def render_template(template: str, **values: str) -> str:
    """Fills {UPPERCASE} placeholders. Other braces are left untouched."""
    for key, value in values.items():
        template = template.replace("{" + key.upper() + "}", value)
    return template


# Appended to the root cause prompt. Also the shape the mock provider emits.
OUTPUT_EXAMPLE = """{
  "component": "checkoutservice-1",
  "reason": "network delay between checkoutservice-1 and cartservice",
  "reasoning_trace": "1. trace: checkoutservice-1 -> cartservice calls 6x slower. 2. metric: rrt of checkoutservice-1 doubled. 3. log: timeout errors on checkoutservice-1."
}"""

FORMAT_CORRECTION = (
    "Your previous answer could not be parsed. Reply with exactly one JSON "
    "object with the non-empty string keys \"component\", \"reason\" and "
    "\"reasoning_trace\", and nothing else."
)


DEFAULT_SYNTH_SPEC: Dict = {
    "seed": 7,
    "start": "2025-06-06T00:00:00Z",
    "hours": 3,
    "trace_interval_s": 3,
    "log_interval_s": 20,
    "metric_interval_s": 60,
    "background_error_rate": 0.02,
    "topology": {
        "nodes": ["aiops-k8s-01", "aiops-k8s-02", "aiops-k8s-03"],
        "services": {
            "frontend": 2,
            "cartservice": 2,
            "productcatalogservice": 2,
            "checkoutservice": 1,
            "redis-cart": 1,
        },
        "entry": "frontend",
        "edges": [
            {"parent": "frontend", "child": "cartservice",
             "operation": "hipstershop.CartService/GetCart", "baseline_us": 1500},
            {"parent": "frontend", "child": "productcatalogservice",
             "operation": "hipstershop.ProductCatalogService/ListProducts", "baseline_us": 800},
            {"parent": "frontend", "child": "checkoutservice",
             "operation": "hipstershop.CheckoutService/PlaceOrder", "baseline_us": 3000},
            {"parent": "checkoutservice", "child": "cartservice",
             "operation": "hipstershop.CartService/EmptyCart", "baseline_us": 1200},
            {"parent": "cartservice", "child": "redis-cart",
             "operation": "HGET", "baseline_us": 300},
        ],
    },
    "faults": [
        {"uuid": "345fbe93-80", "type": "latency_spike",
         "target": {"parent": "frontend-0", "child": "cartservice-1",
                    "operation": "hipstershop.CartService/GetCart"},
         "multiplier": 5.0,
         "start": "2025-06-06T00:20:00Z", "end": "2025-06-06T00:30:00Z"},
        {"uuid": "74a44ae7-81", "type": "error_storm",
         "target": {"parent": "frontend-1", "child": "productcatalogservice-0",
                    "operation": "hipstershop.ProductCatalogService/ListProducts"},
         "rate": 0.3,
         "start": "2025-06-06T01:20:00Z", "end": "2025-06-06T01:30:00Z"},
        {"uuid": "8c1d0f5a-82", "type": "node_cpu_saturation",
         "target": {"node": "aiops-k8s-02"},
         "multiplier": 3.0,
         "start": "2025-06-06T02:10:00Z", "end": "2025-06-06T02:20:00Z"},
    ],
}


def get_default_synth_spec() -> Dict:
    return deepcopy(DEFAULT_SYNTH_SPEC)
