import functools
import os
from dataclasses import dataclass
from typing import Any, Iterable, List, Sequence, Type

import click


# since we can't subclass click.Parameter, we have to do this
@dataclass
class Param:
    """Describes an option shared by mrca subcommands."""

    # click.Parameter
    options: Iterable[str]
    default: Any = None
    is_flag: bool = False
    type: Type = None
    multiple: bool = False
    callback: Any = None

    # state
    enabled: bool = True
    group: str = "output"

    # Help text
    description: str = ""


# each command takes the options of the groups it uses
PARAM_GROUPS = ("output", "config", "data")


def get_click_params(groups: Sequence[str] = PARAM_GROUPS) -> List[click.Option]:
    return [
        click.Option(
            list(p.options),
            default=p.default,
            is_flag=p.is_flag,
            type=p.type,
            multiple=p.multiple,
            callback=p.callback,
            help=p.description or None,
        )
        for p in PARAMS
        if p.enabled and p.group in groups
    ]


def add_common_params(command: click.Command, groups: Sequence[str] = PARAM_GROUPS) -> click.Command:
    command.params.extend(get_click_params(groups))
    return command


_echo = click.echo


def quiet() -> None:
    """Patches click.echo to send standard output to /dev/null."""
    devnull = open(os.devnull, "w", encoding="utf-8")
    click.echo = functools.partial(click.echo, file=devnull)


def unquiet() -> None:
    """Undoes `quiet`."""
    click.echo = _echo


PARAMS = [
    Param(
        options=["-c", "--config", "config_path"],
        type=click.Path(dir_okay=False),
        group="config",
        description="Config file to use instead of ~/.mrca/config.yml.",
    ),
    Param(
        options=["-v", "--verbose"],
        is_flag=True,
        description="Log debug messages to stderr.",
    ),
    Param(
        options=["-q", "--quiet"],
        is_flag=True,
        description="Suppress all terminal output except errors.",
    ),
    Param(
        options=["--data-root"],
        type=click.Path(file_okay=False),
        group="data",
        description="Telemetry directory (overrides data_root).",
    ),
    Param(
        options=["--model-dir"],
        type=click.Path(file_okay=False),
        group="data",
        description="Model directory (overrides model_dir).",
    ),
]
