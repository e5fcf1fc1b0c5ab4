"""
Log fault extraction: window and keyword filtering, template matching,
(pod, template) deduplication and rendering of the log evidence block.
"""

import logging
import re
from dataclasses import dataclass
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

from .drain import DrainModel, mask
from .ingest import FaultCase, LogRecord, ns_to_display

LOGGER = logging.getLogger(__name__)

ERROR_KEYWORD = "error"
DEFAULT_REPORT_LIMIT = 50
NO_LOG_FEATURES = "NO LOG FAULT FEATURES IN WINDOW"

_POD_ORDINAL = re.compile(r"-\d+$")


@dataclass(frozen=True)
class LogFaultFeature:
    node_name: str
    service_name: str
    pod_name: str
    template_id: Optional[int]  # None when the message matched no trained template
    template: str
    first_seen_ns: int
    representative_message: str
    occurrence_count: int

    @property
    def is_synthetic(self) -> bool:
        return self.template_id is None


def pod_to_service(pod_name: str) -> str:
    """frontend-0 -> frontend; any redis pod -> redis-cart."""
    if pod_name.startswith("redis"):
        return "redis-cart"
    return _POD_ORDINAL.sub("", pod_name)


def filter_error_logs(records: Sequence[LogRecord], case: FaultCase) -> List[LogRecord]:
    """Records inside [start, end] whose message mentions "error" in any case."""
    return [
        r for r in records
        if case.start_ns <= r.timestamp_ns <= case.end_ns
        and ERROR_KEYWORD in r.message.lower()
    ]


def _template_for(message: str, model: Optional[DrainModel]) -> Tuple[Optional[int], str]:
    if model is not None:
        match = model.match(message)
        if match is not None:
            return match.template_id, match.template
        return None, " ".join(model.mask(message))
    return None, " ".join(mask(message))


def feature_sort_key(feature: LogFaultFeature) -> tuple:
    return (
        -feature.occurrence_count,
        feature.pod_name,
        feature.is_synthetic,
        -1 if feature.is_synthetic else feature.template_id,
        feature.template,
    )


def featurize(filtered: Sequence[LogRecord], model: Optional[DrainModel]) -> List[LogFaultFeature]:
    """Groups records by (pod, template), keeping the first record and a count."""
    first: Dict[Hashable, Tuple[LogRecord, Optional[int], str]] = {}
    counts: Dict[Hashable, int] = {}
    for record in sorted(filtered, key=lambda r: r.timestamp_ns):
        template_id, template = _template_for(record.message, model)
        identity = template_id if template_id is not None else ("masked", template)
        key = (record.k8_pod, identity)
        if key not in first:
            first[key] = (record, template_id, template)
            counts[key] = 0
        counts[key] += 1

    features = [
        LogFaultFeature(
            node_name=record.k8_node_name,
            service_name=pod_to_service(record.k8_pod),
            pod_name=record.k8_pod,
            template_id=template_id,
            template=template,
            first_seen_ns=record.timestamp_ns,
            representative_message=record.message,
            occurrence_count=counts[key],
        )
        for key, (record, template_id, template) in first.items()
    ]
    features.sort(key=feature_sort_key)
    return features


def render_log_report(features: Sequence[LogFaultFeature], limit: int = DEFAULT_REPORT_LIMIT) -> str:
    if not features:
        return NO_LOG_FEATURES
    lines = []
    for f in sorted(features, key=feature_sort_key)[:limit]:
        template_label = "unmatched" if f.is_synthetic else f"template{f.template_id}"
        lines.append(
            f"node_name: {f.node_name} | service_name: {f.service_name} | "
            f"pod_name: {f.pod_name} | first_seen: {ns_to_display(f.first_seen_ns)} | "
            f"{template_label}: {f.template} | message: {f.representative_message} | "
            f"Occurrence Count: {f.occurrence_count}"
        )
    return "\n".join(lines)


def extract_log_evidence(records: Sequence[LogRecord], case: FaultCase,
                         model: Optional[DrainModel],
                         limit: int = DEFAULT_REPORT_LIMIT) -> Tuple[List[LogFaultFeature], str]:
    """Runs the whole log pipeline for one case."""
    filtered = filter_error_logs(records, case)
    features = featurize(filtered, model)
    LOGGER.info(
        "Case %s: %d error log(s) compressed into %d feature(s)",
        case.uuid, len(filtered), len(features),
    )
    return features, render_log_report(features, limit)
