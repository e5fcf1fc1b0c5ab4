from enum import Enum
from typing import List, Type


class Modality(str, Enum):
    LOG = "log"
    TRACE = "trace"
    METRIC = "metric"


class MetricLevel(str, Enum):
    APM = "apm"
    INFRA_POD = "infra_pod"
    INFRA_NODE = "infra_node"
    INFRA_TIDB = "infra_tidb"


class FaultType(str, Enum):
    LATENCY_SPIKE = "latency_spike"
    ERROR_STORM = "error_storm"
    NODE_CPU_SATURATION = "node_cpu_saturation"


class MockMode(str, Enum):
    WELL_FORMED = "well-formed"
    MALFORMED_ONCE = "malformed-once"
    ALWAYS_MALFORMED = "always-malformed"
    FAIL_N = "fail-n"

    # default mode of the offline provider
    DEFAULT = WELL_FORMED


def enum_values(enum: Type[Enum]) -> List[str]:
    """Distinct member values, aliases excluded."""
    return [e.value for e in enum]
