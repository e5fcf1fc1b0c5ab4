import logging
import sys
from pathlib import Path
from typing import List

import click

from . import __version__
from .cli.params import PARAM_GROUPS, add_common_params, quiet, unquiet
from .cli.parse import modalities_callback
from .cli.utils import print_table, progress, setup_logging
from .config import PipelineConfig, init_config, load_config
from .error import handle_exception
from .pipeline import (AblationRow, cmd_ablate, cmd_run, cmd_synth, cmd_templates,
                       cmd_train_drain, cmd_train_trace, evaluate_answers, read_answers,
                       read_ground_truth)
from .settings import CONFIG

LOGGER = logging.getLogger(__name__)

# commands that do not read the config only take the output options
COMMAND_PARAM_GROUPS = {
    "synth": ("output",),
    "evaluate": ("output",),
    "init-config": ("output", "config"),
}


class MrcaGroup(click.Group):
    """Routes unhandled exceptions of every subcommand through handle_exception."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except (click.ClickException, click.exceptions.Abort, click.exceptions.Exit):
            raise
        except Exception as e:
            handle_exception(e)
            ctx.exit(1)
        finally:
            unquiet()

    def add_command(self, cmd: click.Command, name: str = None) -> None:
        groups = COMMAND_PARAM_GROUPS.get(name or cmd.name, PARAM_GROUPS)
        super().add_command(add_common_params(cmd, groups), name)


def apply_output_options(options: dict) -> None:
    setup_logging(options.pop("verbose", False))
    if options.pop("quiet", False):
        quiet()


def get_config_from_cli_args(options: dict) -> PipelineConfig:
    """Applies the common options and returns the effective config.

    Pops the common options from `options`, leaving the subcommand's own.
    """
    apply_output_options(options)
    config = load_config(options.pop("config_path", None))
    return config.with_overrides(
        data_root=options.pop("data_root", None),
        model_dir=options.pop("model_dir", None),
    )


def print_ablation(rows: List[AblationRow]) -> None:
    scored = any(row.evaluation for row in rows)
    heading = ["Modalities", "Cases", "Unknown"] + (["Correct", "Accuracy"] if scored else [])
    table = []
    for row in rows:
        line = [row.label, len(row.results), sum(r.failed for r in row.results)]
        if scored:
            line += [row.evaluation.correct, f"{row.evaluation.accuracy:.2%}"]
        table.append(line)
    print_table(heading, table, title="Ablation")


@click.group(cls=MrcaGroup)
@click.version_option(__version__, prog_name="mrca")
def main() -> None:
    """Root cause localization for microservice faults from logs, traces and metrics."""


@main.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False),
              help="YAML or JSON dataset spec (default: built-in three-fault spec).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True,
              help="Directory to write the dataset to.")
def synth(**options) -> None:
    """Generate a synthetic telemetry dataset with known faults."""
    apply_output_options(options)
    with progress("Generating dataset... "):
        result = cmd_synth(options["spec_path"], options["out_dir"])
    click.echo(
        f"{result.spans} spans, {result.log_lines} log lines and "
        f"{result.metric_points} metric points written to {result.out_dir}"
    )


@main.command("train-drain")
def train_drain(**options) -> None:
    """Train the log template model on the error logs under data_root."""
    config = get_config_from_cli_args(options)
    with progress("Mining log templates... "):
        model, path = cmd_train_drain(config)
    click.echo(f"{len(model.templates())} templates saved to {path}")


@main.command()
def templates(**options) -> None:
    """Show the templates of the trained log model."""
    config = get_config_from_cli_args(options)
    clusters = cmd_templates(config)
    print_table(
        ["ID", "Count", "Template"],
        [[c.template_id, c.match_count, c.template] for c in clusters],
        title="Log templates",
    )


@main.command("train-trace")
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="input.json with the fault cases to sample normal periods from.")
@click.option("--samples", type=click.IntRange(min=1), default=None,
              help="Number of fault cases to sample (default: train.samples).")
@click.option("--window-minutes", type=click.IntRange(min=1), default=None,
              help="Normal period after each sampled fault (default: train.window_minutes).")
def train_trace(**options) -> None:
    """Train per-call duration anomaly detectors."""
    config = get_config_from_cli_args(options)
    with progress("Training trace detectors... "):
        detectors, path = cmd_train_trace(
            config, options["input_path"], options["samples"], options["window_minutes"],
        )
    click.echo(f"{len(detectors)} detectors saved to {path}")


@main.command()
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="input.json with the fault cases to analyse.")
@click.option("-m", "--modalities", callback=modalities_callback, default=None,
              help="Comma-separated evidence sources, e.g. log,trace (default: config).")
@click.option("-o", "--output-dir", type=click.Path(file_okay=False), default=None,
              help="Directory for answers and audit files (default: output_dir).")
def run(**options) -> None:
    """Analyse every fault case and write answer.jsonl."""
    config = get_config_from_cli_args(options)
    with progress("Analysing cases... "):
        result = cmd_run(config, options["input_path"], options["modalities"], options["output_dir"])
    unknown = sum(r.failed for r in result.results)
    click.echo(f"{len(result.results)} answers ({unknown} unknown) written to {result.answer_file}")


@main.command()
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="input.json with the fault cases to analyse.")
@click.option("--ground-truth", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Ground truth file; adds accuracy columns.")
@click.option("-o", "--output-dir", type=click.Path(file_okay=False), default=None,
              help="Directory for the ablation results (default: output_dir).")
def ablate(**options) -> None:
    """Run every combination of evidence sources over the same cases."""
    config = get_config_from_cli_args(options)
    with progress("Running ablation... "):
        rows = cmd_ablate(config, options["input_path"], options["ground_truth"], options["output_dir"])
    print_ablation(rows)


@main.command()
@click.option("--answers", type=click.Path(exists=True, dir_okay=False), required=True,
              help="answer.jsonl to score.")
@click.option("--ground-truth", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Ground truth file (JSON or JSONL).")
def evaluate(**options) -> None:
    """Score an answer file against the ground truth."""
    apply_output_options(options)
    evaluation = evaluate_answers(read_answers(options["answers"]), read_ground_truth(options["ground_truth"]))
    if evaluation.misses:
        print_table(["UUID", "Answer", "Truth"], evaluation.misses, title="Misses")
    click.echo(f"Accuracy: {evaluation.correct}/{evaluation.total} ({evaluation.accuracy:.2%})")


@main.command("init-config")
@click.option("--force", is_flag=True, help="Overwrite an existing config file.")
def init_config_cmd(**options) -> None:
    """Write the default config file."""
    path = options.pop("config_path", None) or CONFIG
    apply_output_options(options)
    click.echo(f"Config written to {init_config(filename=Path(path), force=options['force'])}")


if __name__ == "__main__":
    sys.exit(main())
