"""
Exception hierarchy for microrca, plus the crash-log handler used at the
command-line boundary.
"""

import inspect
import json
import sys
import traceback
from datetime import datetime
from pathlib import Path
from types import FrameType
from typing import Iterator, Optional

import click

from .settings import LOGS_DIR


class RcaError(Exception):
    """Base class for every error raised by microrca."""


# ingest
class MissingUuid(RcaError):
    pass


class FewerThanTwoTimestamps(RcaError):
    pass


class StartNotBeforeEnd(RcaError):
    pass


class MalformedTimestamp(RcaError):
    pass


class TimestampOverflow(RcaError):
    pass


class NoFilesFound(RcaError):
    """No telemetry file matched. Callers treat the modality as empty."""


class UnreadableFile(RcaError):
    pass


class SchemaViolation(RcaError):
    pass


class UnknownKpi(SchemaViolation):
    pass


# drain
class EmptyCorpus(RcaError):
    pass


class CorruptModelFile(RcaError):
    pass


# iforest
class TooFewSamples(RcaError):
    pass


class NonFiniteInput(RcaError):
    pass


class DimensionMismatch(RcaError):
    pass


# trace / metric
class InsufficientNormalData(RcaError):
    pass


class NoNormalWindow(RcaError):
    pass


class MissingTopology(RcaError):
    pass


# llm
class LlmError(RcaError):
    pass


class TransientLlmError(LlmError):
    """Transport failure, timeout or 5xx. Retried by the gateway."""


class LlmExhausted(LlmError):
    pass


class AuthError(LlmError):
    pass


class PayloadTooLarge(LlmError):
    pass


class UnknownTag(LlmError):
    pass


# rca
class AllModalitiesDisabled(RcaError):
    pass


class ExtractionFailure(RcaError):
    pass


# cli / config
class ConfigError(RcaError):
    pass


class InvalidSpec(RcaError):
    pass


def eprint(*args, **kwargs) -> None:
    """Click.echo to stderr."""
    # --quiet patches click.echo's default file, so stderr is passed
    # explicitly rather than with err=True
    click.echo(*args, file=sys.stderr, **kwargs)


def handle_exception(exception: Exception, logs_dir: Optional[Path] = None) -> Optional[Path]:
    """Reports an exception on stderr and dumps it to a crash log.
    
    Returns the path of the crash log, or None for ignored exceptions.
    """
    IGNORED = [SystemExit, KeyboardInterrupt]
    if any(isinstance(exception, e) for e in IGNORED):
        return None
    log_file = log(exception, logs_dir=logs_dir)
    eprint(f"ERROR: {exception}")
    eprint(f"Error log saved: {log_file}")
    return log_file


def make_log_file(log_type: str = None, logs_dir: Optional[Path] = None) -> Path:
    """Creates a new log file and returns its path."""
    directory = Path(logs_dir or LOGS_DIR)
    directory.mkdir(parents=True, exist_ok=True)

    date_fmt = datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
    ltype = f"{log_type}_" if log_type else ""

    log_file = directory / f"mrca_{ltype}{date_fmt}.log"
    log_file.touch()

    return log_file


def log(exception: Exception, logs_dir: Optional[Path] = None) -> Path:
    """
    Writes the traceback of `exception` and the locals of the
    interpreter's stack frames to a new log file.
    """
    log_file = make_log_file("error", logs_dir=logs_dir)
    with open(log_file, "w", encoding="utf-8") as f:
        exc = traceback.format_exception(
            type(exception), exception, exception.__traceback__
        )
        f.writelines(exc)
        f.write("\n\nStack dump:\n\n")
        for frame in get_stack_frames():
            stack_locals = json.dumps(
                {k: v for k, v in frame.f_locals.items() if not _is_secret(k)},
                indent=4,
                default=str,
            )
            f.write(f"{stack_locals}\n")
    return log_file


def _is_secret(name: str) -> bool:
    name = name.lower()
    return "key" in name or "secret" in name or "token" in name


def get_stack_frames() -> Iterator[FrameType]:
    """Generates stack frames, innermost first."""
    frame = inspect.currentframe()
    while frame:
        yield frame
        frame = frame.f_back
