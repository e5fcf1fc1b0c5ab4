import pytest

from microrca import error
from microrca.error import (AuthError, ConfigError, LlmError, LlmExhausted, RcaError,
                            SchemaViolation, UnknownKpi, get_stack_frames, handle_exception)


def test_get_stack_frames():
    assert next(get_stack_frames())
    for frame in get_stack_frames():
        assert frame


@pytest.mark.parametrize("exc", [ConfigError, SchemaViolation, UnknownKpi, LlmError, LlmExhausted, AuthError])
def test_hierarchy(exc):
    assert issubclass(exc, RcaError)


def test_handle_exception_writes_crash_log(tmp_path, capsys):
    api_key = "sk-do-not-log"
    visible = "plain-local-value"
    try:
        raise ConfigError("broken config")
    except ConfigError as e:
        log_file = handle_exception(e, logs_dir=tmp_path)

    assert log_file.parent == tmp_path
    assert log_file.name.startswith("mrca_error_")
    text = log_file.read_text()
    assert "ConfigError: broken config" in text
    assert visible in text
    assert api_key not in text
    err = capsys.readouterr().err
    assert "ERROR: broken config" in err
    assert str(log_file) in err


def test_handle_exception_ignores_interrupts(tmp_path):
    assert handle_exception(KeyboardInterrupt(), logs_dir=tmp_path) is None
    assert not list(tmp_path.iterdir())


@pytest.mark.parametrize("name,secret", [
    ("api_key", True),
    ("MRCA_API_KEY", True),
    ("client_secret", True),
    ("token", True),
    ("prompt", False),
    ("config", False),
])
def test_is_secret(name, secret):
    assert error._is_secret(name) is secret
