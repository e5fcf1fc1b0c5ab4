"""
Batch orchestration: model training, per-case evidence extraction and
root cause analysis, the modality ablation harness and answer scoring.
"""

import json
import logging
import random
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import yaml

from . import drain, trace_detect
from .config import PipelineConfig
from .drain import DrainModel, TemplateCluster
from .enums import Modality
from .error import (EmptyCorpus, InsufficientNormalData, InvalidSpec, NoNormalWindow,
                    RcaError, SchemaViolation, UnreadableFile)
from .ingest import (FaultCase, LogRecord, Record, TraceSpan, load_modality, make_case,
                     parse_input_case, read_input, read_records)
from .llm_gateway import LlmGateway
from .log_extract import ERROR_KEYWORD, extract_log_evidence, pod_to_service
from .metric_summary import derive_topology, extract_metric_evidence, load_topology, normal_windows
from .rca_engine import UNKNOWN_COMPONENT, EvidenceReports, ModalityFlags, RcaResult, analyze_case
from .resources import get_default_synth_spec
from .settings import (ANSWER_FILE, DRAIN_MODEL_FILE, LLM_CALL_LOG, NS_PER_MINUTE,
                       TOPOLOGY_FILE, TRACE_DETECTORS_FILE)
from .synth import SynthResult, generate_dataset
from .trace_detect import DetectorSet

LOGGER = logging.getLogger(__name__)

ABLATION_DIR = "ablation"
ABLATION_REPORT = "ablation_report.json"

_UNSAFE_PATH_CHARS = re.compile(r"[^\w.\-]")


@dataclass(frozen=True)
class InvalidCase:
    """An input entry that carries a uuid but cannot be turned into a FaultCase."""
    uuid: str
    error: str


@dataclass
class Evaluation:
    total: int
    correct: int
    misses: List[Tuple[str, str, str]] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


@dataclass
class RunResult:
    answer_file: Path
    results: List[RcaResult]


@dataclass
class AblationRow:
    flags: ModalityFlags
    answer_file: Path
    results: List[RcaResult]
    evaluation: Optional[Evaluation] = None

    @property
    def label(self) -> str:
        return self.flags.label


def load_cases(input_path: Union[str, Path]) -> List[Union[FaultCase, InvalidCase]]:
    """Parses input.json in order. Entries without a uuid are dropped with a warning."""
    entries = []
    for i, raw in enumerate(read_input(input_path)):
        try:
            entries.append(parse_input_case(raw))
        except RcaError as e:
            uuid = raw.get("uuid") if isinstance(raw, Mapping) else None
            if isinstance(uuid, str) and uuid.strip():
                LOGGER.warning("Case %s cannot be analysed: %s", uuid, e)
                entries.append(InvalidCase(uuid, str(e)))
            else:
                LOGGER.warning("Dropping input entry %d: %s", i, e)
    return entries


def _valid(entries: Sequence[Union[FaultCase, InvalidCase]]) -> List[FaultCase]:
    return [e for e in entries if isinstance(e, FaultCase)]


def _safe_name(uuid: str) -> str:
    return _UNSAFE_PATH_CHARS.sub("_", uuid) or "_"


class PipelineContext:
    """Shared state of one batch: config, models, gateway and a record cache."""

    def __init__(self, config: PipelineConfig, schedule: Sequence[FaultCase],
                 gateway: LlmGateway = None) -> None:
        self.config = config
        self.schedule = sorted(schedule, key=lambda c: (c.start_ns, c.uuid))
        self._owns_gateway = gateway is None
        self.gateway = gateway or LlmGateway(config.llm, call_log=config.output_dir / LLM_CALL_LOG)
        self.catalog = config.catalog
        self.drain_model = self._load_drain_model()
        self.detectors = self._load_detectors()
        self.topology_fallback = load_topology(
            config.topology_file or config.data_root / TOPOLOGY_FILE
        )
        self._cache: Dict[tuple, List[Record]] = {}
        self._lock = threading.Lock()

    def _load_drain_model(self) -> Optional[DrainModel]:
        path = self.config.model_dir / DRAIN_MODEL_FILE
        if Modality.LOG not in self.config.modalities:
            return None
        if not path.exists():
            LOGGER.warning("No log template model at %s, log lines keep their masked text", path)
            return None
        return drain.load_model(path)

    def _load_detectors(self) -> Optional[DetectorSet]:
        path = self.config.model_dir / TRACE_DETECTORS_FILE
        if Modality.TRACE not in self.config.modalities:
            return None
        if not path.exists():
            LOGGER.warning("No trace detectors at %s, only status codes are checked", path)
            return None
        return trace_detect.load_detectors(path)

    def close(self) -> None:
        if self._owns_gateway:
            self.gateway.close()

    def records(self, modality: Modality, case: FaultCase) -> List[Record]:
        key = (modality, case.hour_keys)
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            return cached
        # two workers may load the same hours; the first to publish wins
        loaded = load_modality(self.config.data_root, modality, case, self.catalog)
        with self._lock:
            return self._cache.setdefault(key, loaded)

    def metric_case(self, case: FaultCase) -> FaultCase:
        """The case widened to its normal windows, for locating metric files."""
        try:
            windows = normal_windows(self.schedule, case)
        except (NoNormalWindow, ValueError):
            return case
        start = min([case.start_ns] + [w[0] for w in windows])
        end = max([case.end_ns] + [w[1] for w in windows])
        return make_case(case.uuid, start, end, case.description)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n", encoding="utf-8")


def run_case(ctx: PipelineContext, case: FaultCase, flags: ModalityFlags, audit_dir: Path) -> RcaResult:
    """ingest -> evidence per enabled modality -> root cause verdict, with an audit trail."""
    config = ctx.config
    audit_dir.mkdir(parents=True, exist_ok=True)
    logs: List[LogRecord] = []
    spans: List[TraceSpan] = []
    reports = {}

    if flags.use_log:
        logs = ctx.records(Modality.LOG, case)
        _, reports["log"] = extract_log_evidence(logs, case, ctx.drain_model, config.reports.log_lines)
    if flags.use_trace:
        spans = ctx.records(Modality.TRACE, case)
        _, _, reports["trace"] = trace_detect.detect_trace_anomalies(
            spans, case.start_ns, case.end_ns, ctx.detectors, config.reports.trace_top_n,
        )
    if flags.use_metric:
        points = ctx.records(Modality.METRIC, ctx.metric_case(case))
        topology = derive_topology(logs, spans, ctx.topology_fallback)
        _, _, reports["metric"] = extract_metric_evidence(
            points, ctx.schedule, case, ctx.gateway, topology,
            config.metric.eps, config.metric.threshold, config.prompts_dir,
        )

    for name, text in reports.items():
        _write_text(audit_dir / f"{name}_report.txt", text)

    transcript: List[Tuple[str, str]] = []
    result = analyze_case(
        case, EvidenceReports(**reports), flags, ctx.gateway,
        prompts_dir=config.prompts_dir, transcript=transcript,
    )
    if transcript:
        _write_text(audit_dir / "rca_prompt.txt", transcript[0][0])
    with open(audit_dir / "llm_responses.jsonl", "w", encoding="utf-8") as f:
        for attempt, (prompt, response) in enumerate(transcript, start=1):
            f.write(json.dumps({"attempt": attempt, "prompt_chars": len(prompt), "response": response}) + "\n")
    _write_text(audit_dir / "result.json", json.dumps(result.to_dict(), indent=2, ensure_ascii=False))
    return result


def _unknown(uuid: str, reason: str, detail: str) -> RcaResult:
    return RcaResult(uuid, UNKNOWN_COMPONENT, reason, detail or reason)


def run_cases(ctx: PipelineContext, entries: Sequence[Union[FaultCase, InvalidCase]],
              flags: ModalityFlags, output_dir: Path) -> List[RcaResult]:
    """Runs every case on the worker pool. Results come back in input order."""

    def work(entry: Union[FaultCase, InvalidCase]) -> RcaResult:
        if isinstance(entry, InvalidCase):
            return _unknown(entry.uuid, "invalid input case", entry.error)
        try:
            return run_case(ctx, entry, flags, output_dir / _safe_name(entry.uuid))
        except Exception as e:
            LOGGER.exception("Case %s failed", entry.uuid)
            return _unknown(entry.uuid, "pipeline error", f"{type(e).__name__}: {e}")

    with ThreadPoolExecutor(max_workers=ctx.config.worker_pool_size) as pool:
        return list(pool.map(work, entries))


def write_answers(results: Sequence[RcaResult], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for result in results:
            f.write(result.to_json() + "\n")
    return path


def cmd_run(config: PipelineConfig, input_path: Union[str, Path],
            flags: ModalityFlags = None, output_dir: Union[str, Path] = None,
            gateway: LlmGateway = None) -> RunResult:
    flags = flags or ModalityFlags.of(config.modalities)
    output_dir = Path(output_dir or config.output_dir)
    entries = load_cases(input_path)
    config = config.with_overrides(modalities=list(flags.enabled), output_dir=output_dir)
    ctx = PipelineContext(config, _valid(entries), gateway)
    try:
        results = run_cases(ctx, entries, flags, output_dir)
    finally:
        ctx.close()
    answer_file = write_answers(results, output_dir / ANSWER_FILE)
    LOGGER.info("Wrote %d answer(s) to %s", len(results), answer_file)
    return RunResult(answer_file, results)


def read_ground_truth(path: Union[str, Path]) -> Dict[str, str]:
    """uuid -> component, from a JSON array or a JSONL file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise UnreadableFile(f"Cannot read ground truth {path}: {e}") from e
    try:
        data = json.loads(text)
        rows = data if isinstance(data, list) else [data]
    except json.JSONDecodeError:
        try:
            rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        except json.JSONDecodeError as e:
            raise SchemaViolation(f"{path} is neither JSON nor JSONL: {e}") from e
    truth = {}
    for row in rows:
        if not isinstance(row, Mapping) or "uuid" not in row or "component" not in row:
            raise SchemaViolation(f"{path}: every entry needs 'uuid' and 'component', got {row!r}")
        truth[str(row["uuid"])] = str(row["component"])
    return truth


read_answers = read_ground_truth


def component_matches(answer: str, truth: str) -> bool:
    """Case-insensitive match; a pod also matches the service it belongs to."""
    answer, truth = answer.strip().lower(), truth.strip().lower()
    return answer == truth or pod_to_service(answer) == truth


def evaluate_answers(answers: Union[Mapping[str, str], Sequence[RcaResult]],
                     truth: Mapping[str, str]) -> Evaluation:
    if not isinstance(answers, Mapping):
        answers = {r.uuid: r.component for r in answers}
    evaluation = Evaluation(total=len(truth), correct=0)
    for uuid in sorted(truth):
        answer = answers.get(uuid, "")
        if component_matches(answer, truth[uuid]):
            evaluation.correct += 1
        else:
            evaluation.misses.append((uuid, answer or "<missing>", truth[uuid]))
    return evaluation


def cmd_ablate(config: PipelineConfig, input_path: Union[str, Path],
               ground_truth: Union[str, Path, None] = None,
               output_dir: Union[str, Path] = None,
               gateway: LlmGateway = None) -> List[AblationRow]:
    """Runs every non-empty modality combination over the same cases."""
    config = config.with_overrides(output_dir=output_dir)
    output_dir = config.output_dir / ABLATION_DIR
    truth = read_ground_truth(ground_truth) if ground_truth else None
    entries = load_cases(input_path)
    # every combination needs every model
    ctx = PipelineContext(config.with_overrides(modalities=list(Modality)), _valid(entries), gateway)

    rows = []
    try:
        for flags in ModalityFlags.combinations():
            combo_dir = output_dir / flags.label
            results = run_cases(ctx, entries, flags, combo_dir)
            row = AblationRow(flags, write_answers(results, combo_dir / ANSWER_FILE), results)
            if truth is not None:
                row.evaluation = evaluate_answers(results, truth)
            LOGGER.info("Ablation %s finished", flags.label)
            rows.append(row)
    finally:
        ctx.close()

    report = [
        {
            "modalities": row.label,
            "answers": str(row.answer_file),
            "cases": len(row.results),
            "unknown": sum(r.failed for r in row.results),
            **({"correct": row.evaluation.correct, "accuracy": row.evaluation.accuracy}
               if row.evaluation else {}),
        }
        for row in rows
    ]
    output_dir.mkdir(parents=True, exist_ok=True)
    with open(output_dir / ABLATION_REPORT, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
    return rows


def _error_messages(config: PipelineConfig) -> List[str]:
    paths = sorted(config.data_root.rglob("log_*.jsonl"), key=str)
    records: List[LogRecord] = []
    for path in paths:
        records.extend(read_records(path, Modality.LOG).records)
    records.sort(key=lambda r: (r.timestamp_ns, r.k8_pod, r.message))
    return [r.message for r in records if ERROR_KEYWORD in r.message.lower()]


def cmd_train_drain(config: PipelineConfig, corpus: Sequence[str] = None) -> Tuple[DrainModel, Path]:
    """Trains the template model on every error log message under data_root."""
    messages = list(corpus) if corpus is not None else _error_messages(config)
    if not messages:
        raise EmptyCorpus(f"No log messages containing '{ERROR_KEYWORD}' under {config.data_root}")
    model = drain.train(messages, config.drain)
    path = drain.save_model(model, config.model_dir / DRAIN_MODEL_FILE)
    return model, path


def cmd_templates(config: PipelineConfig) -> List[TemplateCluster]:
    return drain.load_model(config.model_dir / DRAIN_MODEL_FILE).templates()


def sample_training_cases(cases: Sequence[FaultCase], n_samples: int, seed: int) -> List[FaultCase]:
    ordered = sorted(cases, key=lambda c: (c.start_ns, c.uuid))
    if n_samples >= len(ordered):
        if n_samples > len(ordered):
            LOGGER.warning(
                "Asked for %d training cases but only %d exist, using all of them",
                n_samples, len(ordered),
            )
        return ordered
    return sorted(random.Random(seed).sample(ordered, n_samples), key=lambda c: (c.start_ns, c.uuid))


def cmd_train_trace(config: PipelineConfig, input_path: Union[str, Path],
                    n_samples: int = None, window_minutes: int = None) -> Tuple[DetectorSet, Path]:
    """Trains per-key duration detectors on the periods right after sampled faults."""
    n_samples = n_samples or config.train.samples
    window_ns = (window_minutes or config.train.window_minutes) * NS_PER_MINUTE
    window_s = config.train.window_seconds
    cases = sample_training_cases(_valid(load_cases(input_path)), n_samples, config.train.seed)

    windows: Dict[trace_detect.InvocationKey, list] = {}
    invocations = []
    for case in cases:
        normal = make_case(f"{case.uuid}-normal", case.end_ns, case.end_ns + window_ns)
        spans = load_modality(config.data_root, Modality.TRACE, normal, config.catalog)
        batch = trace_detect.build_invocations(spans)
        inside = trace_detect.invocations_in_window(batch.invocations, normal.start_ns, normal.end_ns)
        invocations.extend(inside)
        for key, averages in trace_detect.window_features(inside, window_s).items():
            windows.setdefault(key, []).extend(averages)

    detectors = trace_detect.train_detectors(
        windows, config.forest, trace_detect.key_metadata(invocations), window_s,
    )
    if not len(detectors):
        raise InsufficientNormalData(
            f"No invocation key reached {trace_detect.MIN_WINDOWS} normal windows "
            f"across {len(cases)} training case(s)"
        )
    path = trace_detect.save_detectors(detectors, config.model_dir / TRACE_DETECTORS_FILE)
    return detectors, path


def load_synth_spec(path: Union[str, Path, None]) -> dict:
    """Reads a YAML or JSON synthetic dataset spec; None gives the built-in one."""
    if path is None:
        return get_default_synth_spec()
    try:
        with open(path, "r", encoding="utf-8") as f:
            spec = yaml.safe_load(f)
    except OSError as e:
        raise InvalidSpec(f"Cannot read spec {path}: {e}") from e
    except yaml.YAMLError as e:
        raise InvalidSpec(f"{path} is not valid YAML or JSON: {e}") from e
    if not isinstance(spec, dict):
        raise InvalidSpec(f"{path} must contain a mapping")
    return spec


def cmd_synth(spec_path: Union[str, Path, None], out_dir: Union[str, Path]) -> SynthResult:
    return generate_dataset(load_synth_spec(spec_path), out_dir)
