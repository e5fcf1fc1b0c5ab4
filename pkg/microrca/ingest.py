"""
Input parsing and telemetry loading.

All internal time is UTC nanoseconds since the epoch held in a plain int.
Log and metric records carry second-precision ISO-8601 "Z" timestamps,
trace spans carry integer microseconds.
"""

import calendar
import json
import logging
import math
import re
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Union

from .enums import MetricLevel, Modality
from .error import (FewerThanTwoTimestamps, MalformedTimestamp, MissingUuid,
                    NoFilesFound, SchemaViolation, StartNotBeforeEnd,
                    TimestampOverflow, UnknownKpi, UnreadableFile)
from .resources import DEFAULT_CATALOG, MetricCatalog
from .settings import (DISPLAY_UTC_OFFSET_HOURS, NS_MAX, NS_PER_HOUR,
                       NS_PER_SECOND, NS_PER_US)

LOGGER = logging.getLogger(__name__)

# Fault windows are announced in the case description with this pattern;
# the first match opens the window and the second closes it.
ISO_PATTERN = re.compile(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z")

HOUR_KEY_FORMAT = "%Y-%m-%d_%H"
DATE_FORMAT = "%Y-%m-%d"


@dataclass(frozen=True)
class FaultCase:
    uuid: str
    description: str
    start_ns: int
    end_ns: int
    hour_keys: Tuple[str, ...]

    @property
    def dates(self) -> Tuple[str, ...]:
        return tuple(sorted({key[:10] for key in self.hour_keys}))


@dataclass(frozen=True)
class LogRecord:
    timestamp_ns: int
    k8_pod: str
    k8_node_name: str
    message: str


@dataclass(frozen=True)
class TraceSpan:
    trace_id: str
    span_id: str
    parent_span_id: Optional[str]
    start_ns: int
    duration_us: int
    pod_name: str
    service_name: str
    node_name: str
    operation_name: str
    status_code: int
    status_message: str


@dataclass(frozen=True)
class MetricPoint:
    time_ns: int
    level: MetricLevel
    entity: str
    kpi_key: str
    value: float


Record = Union[LogRecord, TraceSpan, MetricPoint]


@dataclass
class RecordBatch:
    """Records read from one or more files, with the lines that were skipped."""
    records: List[Record] = field(default_factory=list)
    skipped: int = 0
    violations: List[str] = field(default_factory=list)

    def extend(self, other: "RecordBatch") -> None:
        self.records.extend(other.records)
        self.skipped += other.skipped
        self.violations.extend(other.violations)


def iso_to_ns(iso: str) -> int:
    """Converts a second-precision "YYYY-MM-DDTHH:MM:SSZ" string to UTC nanoseconds."""
    if not isinstance(iso, str) or not ISO_PATTERN.fullmatch(iso):
        raise MalformedTimestamp(f"Not a Z-suffixed second-precision timestamp: {iso!r}")
    try:
        dt = datetime.strptime(iso, "%Y-%m-%dT%H:%M:%SZ")
    except ValueError as e:
        raise MalformedTimestamp(f"Invalid calendar timestamp {iso!r}: {e}") from e
    ns = calendar.timegm(dt.timetuple()) * NS_PER_SECOND
    if not -NS_MAX - 1 <= ns <= NS_MAX:
        raise TimestampOverflow(f"{iso} does not fit in signed 64-bit nanoseconds")
    return ns


def ns_to_datetime(ns: int) -> datetime:
    seconds, _ = divmod(ns, NS_PER_SECOND)
    return datetime(1970, 1, 1, tzinfo=timezone.utc) + timedelta(seconds=seconds)


def ns_to_iso(ns: int) -> str:
    """Renders nanoseconds as a second-precision ISO-8601 "Z" string (truncating)."""
    return ns_to_datetime(ns).strftime("%Y-%m-%dT%H:%M:%SZ")


def ns_to_display(ns: int) -> str:
    """Renders nanoseconds on the UTC+8 display clock used in reports."""
    shifted = ns_to_datetime(ns) + timedelta(hours=DISPLAY_UTC_OFFSET_HOURS)
    return shifted.strftime("%Y-%m-%d %H:%M:%S")


def hour_key(ns: int) -> str:
    return ns_to_datetime(ns).strftime(HOUR_KEY_FORMAT)


def hour_keys(start_ns: int, end_ns: int) -> Tuple[str, ...]:
    """Every UTC hour intersecting [start_ns, end_ns], ascending."""
    first, last = start_ns // NS_PER_HOUR, end_ns // NS_PER_HOUR
    return tuple(hour_key(h * NS_PER_HOUR) for h in range(first, last + 1))


def make_case(uuid: str, start_ns: int, end_ns: int, description: str = "") -> FaultCase:
    if start_ns >= end_ns:
        raise StartNotBeforeEnd(
            f"Case {uuid}: start {ns_to_iso(start_ns)} is not before end {ns_to_iso(end_ns)}"
        )
    return FaultCase(
        uuid=uuid,
        description=description,
        start_ns=start_ns,
        end_ns=end_ns,
        hour_keys=hour_keys(start_ns, end_ns),
    )


def parse_input_case(raw: Union[str, Mapping[str, Any]]) -> FaultCase:
    """Parses one input entry, given as JSON text or as an already decoded mapping."""
    if isinstance(raw, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as e:
            raise SchemaViolation(f"Input case is not valid JSON: {e}") from e
    if not isinstance(raw, Mapping):
        raise SchemaViolation(f"Input case must be an object, got {type(raw).__name__}")

    uuid = raw.get("uuid")
    if not isinstance(uuid, str) or not uuid.strip():
        raise MissingUuid(f"Input case has no uuid: {dict(raw)!r}")

    description = raw.get("Anomaly Description", raw.get("description", ""))
    if not isinstance(description, str):
        description = str(description)
    matches = ISO_PATTERN.findall(description)
    if len(matches) < 2:
        raise FewerThanTwoTimestamps(
            f"Case {uuid}: expected two timestamps in the description, found {len(matches)}"
        )
    return make_case(uuid, iso_to_ns(matches[0]), iso_to_ns(matches[1]), description)


def read_input(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """Reads the raw entries of an input.json file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            entries = json.load(f)
    except (OSError, UnicodeDecodeError) as e:
        raise UnreadableFile(f"Cannot read input file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise SchemaViolation(f"Input file {path} is not valid JSON: {e}") from e
    if not isinstance(entries, list):
        raise SchemaViolation(f"Input file {path} must hold a JSON array")
    return entries


def normalize_trace_time(start_us: int) -> int:
    """Microseconds to nanoseconds, exactly."""
    if isinstance(start_us, bool) or not isinstance(start_us, int):
        raise MalformedTimestamp(f"Trace start time must be an integer, got {start_us!r}")
    if start_us < 0:
        raise MalformedTimestamp(f"Trace start time must be non-negative, got {start_us}")
    ns = start_us * NS_PER_US
    if ns > NS_MAX:
        raise TimestampOverflow(f"{start_us}us does not fit in signed 64-bit nanoseconds")
    return ns


def locate_files(data_root: Union[str, Path], modality: Modality, case: FaultCase) -> List[Path]:
    """Finds the telemetry files of one modality covering a case.

    Log and trace files are hour-keyed (`log_<YYYY-MM-DD_HH>.jsonl`); metric
    files live anywhere below `<YYYY-MM-DD>/metric/`.
    """
    root = Path(data_root)
    modality = Modality(modality)
    if not root.is_dir():
        raise NoFilesFound(f"Data root {root} does not exist")

    if modality is Modality.METRIC:
        files = []
        for date in case.dates:
            metric_dir = root / date / "metric"
            if metric_dir.is_dir():
                files.extend(p for p in metric_dir.rglob("*.jsonl") if p.is_file())
    else:
        wanted = {f"{modality.value}_{key}.jsonl" for key in case.hour_keys}
        files = [p for p in root.rglob(f"{modality.value}_*.jsonl") if p.name in wanted]

    files = sorted(set(files), key=str)
    if not files:
        raise NoFilesFound(
            f"No {modality.value} files under {root} for hours {', '.join(case.hour_keys)}"
        )
    LOGGER.debug("Located %d %s file(s) for %s", len(files), modality.value, case.uuid)
    return files


def _require_str(obj: Mapping, key: str, allow_empty: bool = False) -> str:
    value = obj.get(key)
    if not isinstance(value, str) or (not allow_empty and not value):
        raise SchemaViolation(f"field '{key}' must be a non-empty string")
    return value


def _require_int(obj: Mapping, key: str) -> int:
    value = obj.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaViolation(f"field '{key}' must be an integer")
    return value


def parse_log_line(obj: Mapping, catalog: MetricCatalog = None) -> LogRecord:
    timestamp_ns = iso_to_ns(obj.get("@timestamp"))
    if timestamp_ns <= 0:
        raise SchemaViolation("field '@timestamp' must be after the epoch")
    return LogRecord(
        timestamp_ns=timestamp_ns,
        k8_pod=_require_str(obj, "k8_pod"),
        k8_node_name=_require_str(obj, "k8_node_name", allow_empty=True),
        message=_require_str(obj, "message", allow_empty=True),
    )


def parse_trace_line(obj: Mapping, catalog: MetricCatalog = None) -> TraceSpan:
    process = obj.get("process")
    if not isinstance(process, Mapping):
        raise SchemaViolation("field 'process' must be an object")
    tags = obj.get("tags") or {}
    if not isinstance(tags, Mapping):
        raise SchemaViolation("field 'tags' must be an object")

    status_code = tags.get("status.code", 0)
    if isinstance(status_code, bool) or not isinstance(status_code, int):
        raise SchemaViolation("tag 'status.code' must be an integer")
    duration = _require_int(obj, "duration")
    if duration < 0:
        raise SchemaViolation("field 'duration' must be non-negative")

    parent = obj.get("parentSpanID") or None
    if parent is not None and not isinstance(parent, str):
        raise SchemaViolation("field 'parentSpanID' must be a string")

    return TraceSpan(
        trace_id=_require_str(obj, "traceID"),
        span_id=_require_str(obj, "spanID"),
        parent_span_id=parent,
        start_ns=normalize_trace_time(_require_int(obj, "startTime")),
        duration_us=duration,
        pod_name=_require_str(process, "pod_name"),
        service_name=_require_str(process, "service_name", allow_empty=True),
        node_name=_require_str(process, "node_name", allow_empty=True),
        operation_name=_require_str(obj, "operationName"),
        status_code=status_code,
        status_message=str(tags.get("status.message", "") or ""),
    )


def parse_metric_line(obj: Mapping, catalog: MetricCatalog = None) -> MetricPoint:
    catalog = catalog or DEFAULT_CATALOG
    try:
        level = MetricLevel(obj.get("level"))
    except ValueError as e:
        raise SchemaViolation(f"unknown metric level {obj.get('level')!r}") from e
    kpi_key = _require_str(obj, "kpi_key")
    if not catalog.accepts(level, kpi_key):
        raise UnknownKpi(f"kpi '{kpi_key}' is not in the {level.value} catalog")
    value = obj.get("value")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaViolation(f"field 'value' must be a finite number, got {value!r}")
    try:
        value = float(value)
    except OverflowError as e:
        raise SchemaViolation("field 'value' does not fit in a float") from e
    if not math.isfinite(value):
        raise SchemaViolation(f"field 'value' must be a finite number, got {value!r}")
    return MetricPoint(
        time_ns=iso_to_ns(obj.get("time")),
        level=level,
        entity=_require_str(obj, "entity"),
        kpi_key=kpi_key,
        value=value,
    )


LINE_PARSERS: Dict[Modality, Callable[[Mapping, Optional[MetricCatalog]], Record]] = {
    Modality.LOG: parse_log_line,
    Modality.TRACE: parse_trace_line,
    Modality.METRIC: parse_metric_line,
}


def record_sort_key(record: Record) -> tuple:
    """Total order: time first, then every remaining field."""
    if isinstance(record, LogRecord):
        return (record.timestamp_ns, record.k8_pod, record.k8_node_name, record.message)
    if isinstance(record, TraceSpan):
        return (record.start_ns, record.trace_id, record.span_id,
                record.parent_span_id or "", record.pod_name, record.operation_name,
                record.duration_us, record.status_code, record.status_message,
                record.service_name, record.node_name)
    return (record.time_ns, record.level.value, record.entity, record.kpi_key, record.value)


def read_records(path: Union[str, Path], modality: Modality,
                 catalog: MetricCatalog = None) -> RecordBatch:
    """Reads one JSONL telemetry file.

    Malformed lines are counted and skipped; records come back sorted by time.
    """
    parser = LINE_PARSERS[Modality(modality)]
    batch = RecordBatch()
    try:
        with open(path, "rb") as f:
            lines = f.readlines()
    except OSError as e:
        raise UnreadableFile(f"Cannot read {path}: {e}") from e

    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw.decode("utf-8"))
            if not isinstance(obj, Mapping):
                raise SchemaViolation("line is not a JSON object")
            batch.records.append(parser(obj, catalog))
        except (UnicodeDecodeError, json.JSONDecodeError, SchemaViolation,
                MalformedTimestamp, TimestampOverflow, OverflowError) as e:
            batch.skipped += 1
            batch.violations.append(f"{path}:{lineno}: {e}")

    if batch.skipped:
        LOGGER.warning("Skipped %d malformed line(s) in %s", batch.skipped, path)
    batch.records.sort(key=record_sort_key)
    return batch


def load_modality(data_root: Union[str, Path], modality: Modality, case: FaultCase,
                  catalog: MetricCatalog = None,
                  reader: Callable[[Path, Modality], RecordBatch] = None) -> List[Record]:
    """Locates and reads every file of a modality for a case.

    A modality without files is treated as empty.
    """
    reader = reader or (lambda p, m: read_records(p, m, catalog))
    try:
        paths = locate_files(data_root, modality, case)
    except NoFilesFound as e:
        LOGGER.warning("%s", e)
        return []
    batch = RecordBatch()
    for path in paths:
        batch.extend(reader(path, modality))
    batch.records.sort(key=record_sort_key)
    return batch.records
