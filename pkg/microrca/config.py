"""
This module implements loading, validating and writing the YAML pipeline
configuration (`~/.mrca/config.yml` unless another file is given).
"""

import logging
from copy import deepcopy
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml

from .drain import DrainParams
from .enums import Modality, MockMode, enum_values
from .error import ConfigError
from .iforest import ForestParams
from .llm_gateway import LlmConfig
from .resources import DEFAULT_CATALOG, DEFAULT_MASKING_RULES, MetricCatalog
from .settings import CONFIG

LOGGER = logging.getLogger(__name__)


CONFIG_BASE: Dict[str, Any] = {
    "data_root": "data",
    "output_dir": "output",
    "model_dir": "models",
    "prompts_dir": None,
    "topology_file": None,
    "worker_pool_size": 4,
    "modalities": enum_values(Modality),
    "drain": {
        "tree_depth": 4,
        "similarity_threshold": 0.4,
        "max_children_per_node": 100,
        "masking_rules": [list(rule) for rule in DEFAULT_MASKING_RULES],
    },
    "forest": {
        "n_trees": 100,
        "subsample_size": 256,
        "contamination": 0.01,
        "rng_seed": 42,
    },
    "metric": {
        "eps": 1e-9,
        "threshold": 0.05,
        "extra_node_kpis": [],
    },
    "llm": {
        "provider": "mock",
        "endpoint_url": "https://api.openai.com/v1/chat/completions",
        "model_name": "gpt-4o-mini",
        "api_key_env": "MRCA_API_KEY",
        "max_retries": 3,
        "backoff_base_ms": 500,
        "max_concurrent_requests": 4,
        "timeout_s": 120.0,
        "max_output_tokens": 2048,
        "temperature": 0.0,
        "max_prompt_chars": 200000,
        "mock_mode": MockMode.DEFAULT.value,
        "mock_fail_count": 0,
    },
    "reports": {
        "log_lines": 50,
        "trace_top_n": 20,
    },
    "train": {
        "samples": 50,
        "window_minutes": 40,
        "window_seconds": 30,
        "seed": 42,
    },
}


@dataclass(frozen=True)
class MetricParams:
    eps: float = 1e-9
    threshold: float = 0.05
    extra_node_kpis: Tuple[str, ...] = ()


@dataclass(frozen=True)
class ReportLimits:
    log_lines: int = 50
    trace_top_n: int = 20


@dataclass(frozen=True)
class TrainParams:
    samples: int = 50
    window_minutes: int = 40
    window_seconds: int = 30
    seed: int = 42


@dataclass(frozen=True)
class PipelineConfig:
    data_root: Path = Path("data")
    output_dir: Path = Path("output")
    model_dir: Path = Path("models")
    prompts_dir: Optional[Path] = None
    topology_file: Optional[Path] = None
    worker_pool_size: int = 4
    modalities: Tuple[Modality, ...] = tuple(Modality)
    drain: DrainParams = field(default_factory=DrainParams)
    forest: ForestParams = field(default_factory=ForestParams)
    metric: MetricParams = field(default_factory=MetricParams)
    llm: LlmConfig = field(default_factory=LlmConfig)
    reports: ReportLimits = field(default_factory=ReportLimits)
    train: TrainParams = field(default_factory=TrainParams)

    @property
    def catalog(self) -> MetricCatalog:
        return DEFAULT_CATALOG.with_extra_node_kpis(self.metric.extra_node_kpis)

    def with_overrides(self, **overrides) -> "PipelineConfig":
        """Returns a copy with top-level fields replaced; None values are ignored."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        for key in ("data_root", "output_dir", "model_dir", "prompts_dir", "topology_file"):
            if key in changes:
                changes[key] = Path(changes[key])
        if "modalities" in changes:
            changes["modalities"] = _parse_modalities(changes["modalities"], "modalities")
        return replace(self, **changes)


def _check_keys(config: dict, base: dict, prefix: str = "") -> dict:
    """Rejects unknown keys and fills missing ones from `base`, recursively."""
    if not isinstance(config, dict):
        raise ConfigError(f"'{prefix or '<root>'}' must be a mapping, got {type(config).__name__}")
    unknown = [k for k in config if k not in base]
    if unknown:
        path = ", ".join(f"{prefix}{k}" for k in sorted(map(str, unknown)))
        raise ConfigError(f"Unknown config key(s): {path}")
    checked = {}
    for key, default in base.items():
        if key not in config:
            checked[key] = deepcopy(default)
        elif isinstance(default, dict):
            checked[key] = _check_keys(config[key], default, f"{prefix}{key}.")
        else:
            checked[key] = config[key]
    return checked


def check_config_integrity(config: Optional[dict]) -> dict:
    """Inserts missing keys. Unknown keys are an error."""
    return _check_keys(config or {}, CONFIG_BASE)


def _parse_modalities(value, key: str) -> Tuple[Modality, ...]:
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    try:
        modalities = tuple(Modality(str(v).strip().lower()) for v in value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"'{key}': {e} (choose from {', '.join(enum_values(Modality))})") from e
    if not modalities:
        raise ConfigError(f"'{key}': at least one modality must be enabled")
    # config order does not matter, Modality order does
    return tuple(m for m in Modality if m in modalities)


def _optional_path(value) -> Optional[Path]:
    return Path(value).expanduser() if value else None


def _section(cls, values: dict, key: str):
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"'{key}': {e}") from e


def from_dict(raw: Optional[dict]) -> PipelineConfig:
    c = check_config_integrity(raw)
    drain = dict(c["drain"])
    drain["masking_rules"] = tuple(tuple(rule) for rule in drain["masking_rules"])
    metric = dict(c["metric"])
    metric["extra_node_kpis"] = tuple(metric["extra_node_kpis"] or ())

    workers = c["worker_pool_size"]
    if isinstance(workers, bool) or not isinstance(workers, int) or workers < 1:
        raise ConfigError(f"'worker_pool_size' must be a positive integer, got {workers!r}")

    config = PipelineConfig(
        data_root=Path(c["data_root"]).expanduser(),
        output_dir=Path(c["output_dir"]).expanduser(),
        model_dir=Path(c["model_dir"]).expanduser(),
        prompts_dir=_optional_path(c["prompts_dir"]),
        topology_file=_optional_path(c["topology_file"]),
        worker_pool_size=workers,
        modalities=_parse_modalities(c["modalities"], "modalities"),
        drain=_section(DrainParams, drain, "drain"),
        forest=_section(ForestParams, c["forest"], "forest"),
        metric=_section(MetricParams, metric, "metric"),
        llm=_section(LlmConfig, c["llm"], "llm"),
        reports=_section(ReportLimits, c["reports"], "reports"),
        train=_section(TrainParams, c["train"], "train"),
    )
    if not 0 < config.metric.threshold < 1 or config.metric.eps <= 0:
        raise ConfigError("'metric': threshold must be in (0, 1) and eps positive")
    if config.reports.log_lines < 1 or config.reports.trace_top_n < 1:
        raise ConfigError("'reports': limits must be positive")
    if config.train.samples < 1 or config.train.window_minutes < 1 or config.train.window_seconds < 1:
        raise ConfigError("'train': samples and window sizes must be positive")
    DEFAULT_CATALOG.with_extra_node_kpis(config.metric.extra_node_kpis)
    return config


def _do_load_config(*, filename: Union[str, Path] = None) -> dict:
    """Loads configuration file and returns it as a dict."""
    path = filename or CONFIG
    try:
        with open(path, "r", encoding="utf-8") as f:
            return yaml.safe_load(f.read()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path} is not valid YAML: {e}") from e


def load_config(filename: Union[str, Path] = None) -> PipelineConfig:
    """Loads the configuration file, or the defaults if it does not exist."""
    path = Path(filename or CONFIG)
    if not path.exists():
        if filename:
            raise ConfigError(f"Config file {path} does not exist")
        LOGGER.info("No config at %s, using defaults", path)
        return from_dict({})
    return from_dict(_do_load_config(filename=path))


def update_config(config: dict, *, filename: Union[str, Path] = None) -> Path:
    """Saves config as a YAML-formatted file."""
    path = Path(filename or CONFIG)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(yaml.safe_dump(config, default_flow_style=False, sort_keys=False))
    return path


def init_config(*, filename: Union[str, Path] = None, force: bool = False) -> Path:
    """Writes the default configuration."""
    path = Path(filename or CONFIG)
    if path.exists() and not force:
        raise ConfigError(f"{path} already exists (use --force to overwrite)")
    return update_config(deepcopy(CONFIG_BASE), filename=path)

