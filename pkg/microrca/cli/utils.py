import logging
from contextlib import contextmanager
from typing import List, Sequence

import click
from terminaltables import SingleTable

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@contextmanager
def progress(message: str,
             success: str = "done",
             width: int = 32,
             ljust: bool = True,
             ) -> None:
    message = message.ljust(width) if ljust else message.rjust(width)
    click.echo(message, nl=False)
    try:
        yield
    except Exception:
        click.echo("failed")
        raise
    click.echo(success)


def setup_logging(verbose: bool = False) -> None:
    """Configures the root logger once per process."""
    level = logging.DEBUG if verbose else logging.WARNING
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(level=level, format=LOG_FORMAT)
    root.setLevel(level)


def print_table(heading: Sequence[str], rows: Sequence[Sequence], title: str = None) -> None:
    data: List[List[str]] = [list(heading)] + [[str(c) for c in row] for row in rows]
    table = SingleTable(data, title)
    click.echo(table.table)
