#!/usr/bin/env python
# -*- coding: utf-8 -*-

from pathlib import Path
from typing import Callable, List, Optional, Text, Union

import click

from confsafe import __version__

DEFAULT_FILENAME = "confsafe.yml"

EXAMPLES = """
# Examples

The following commands print the final merged inputs rather than run the experiment.
Drop ``-p`` and the experiment should run.

The defaults are given by

> confsafe run-pipeline -p

We can override some or all of these inputs by specifying a yaml file to read from. The
file can contain any or all the sections printed above (though we recommend not
overriding "root" and "cwd").

> confsafe run-pipeline -p -i confsafe.yml

We can also override some inputs directly on the command-line using omegaconf's dot
syntax:

> confsafe run-pipeline -p environment.name=double_integrator episodes.count=5

In the latter case, the dot-syntax takes priority over the contents of the input file.

Stages can also run one at a time, each reading the artifacts of earlier stages from
the output directory:

> confsafe fit-model -i confsafe.yml
> confsafe learn-backup -i confsafe.yml
> confsafe solve-value -i confsafe.yml
> confsafe certify -i confsafe.yml
> confsafe rollout -i confsafe.yml

The same experiment without a filter, in another output directory:

> confsafe run-pipeline -i confsafe.yml filter.enabled=false output=unfiltered

Finally, runs are summarized with

> confsafe compare confsafe-run unfiltered

The keyword "cwd" refers to the current working directory (from which the command
confsafe is started). The keyword "root" refers to the directory where the input file
(`-i`) resides, or to the current working directory if no file is given.
"""


def get_default_yaml(name):
    from io import StringIO

    from omegaconf import OmegaConf

    from confsafe.simulation import INPUT_DEFAULTS

    stream = StringIO()
    OmegaConf.save({str(name): INPUT_DEFAULTS[name]}, stream)
    stream.seek(0)
    return stream.read()


def get_options():
    from confsafe.autoconf import confsafe_registries

    result = ""
    for yaml_name, registry in confsafe_registries().items():
        name = registry.name.title()
        result += name + "\n" + "-" * len(name) + "\n\n"
        result += "Defaults to:\n\n~~~yaml\n"
        result += get_default_yaml(yaml_name).strip()
        result += "\n~~~\n\n"
        result += registry.parameter_docs.rstrip() + "\n\n"
    return result.rstrip()


def fail(stage: Text, error: BaseException):
    """Prints a stage-tagged error and exits with a nonzero code."""
    click.echo(f"[{stage}] {type(error).__name__}: {error}", err=True)
    raise SystemExit(1)


def read_settings(input_file: Optional[Union[Text, Path]], inputs: List[Text]):
    from omegaconf import OmegaConf

    from confsafe.simulation import construct_input, load_initial_imports

    if input_file is not None and input_file != "-":
        input_file = Path(input_file)
        if input_file.is_dir():
            input_file /= DEFAULT_FILENAME
        if not input_file.exists():
            click.echo(f"No file {input_file} found, aborting.", err=True)
            raise SystemExit(1)

    try:
        if input_file:
            with click.open_file(str(input_file), "r") as fileobj:
                settings = construct_input(
                    fileobj, overrides=OmegaConf.from_cli(list(inputs))
                )
        else:
            settings = construct_input(overrides=OmegaConf.from_cli(list(inputs)))
        load_initial_imports(settings.imports)
    except Exception as error:
        fail("config", error)
    return settings


def make_pipeline(
    input_file: Optional[Union[Text, Path]], inputs: List[Text], settings=None
):
    from confsafe.simulation import Pipeline

    if settings is None:
        settings = read_settings(input_file, inputs)
    try:
        return Pipeline(settings)
    except Exception as error:
        fail("config", error)


def run_stages(pipeline, *stages: Text):
    from confsafe.simulation import PipelineError

    try:
        for stage in stages:
            pipeline.run_stage(stage)
    except PipelineError as error:
        fail(error.stage, error.cause)


def experiment_command(function: Callable) -> Callable:
    """Adds the input file option and the dot-syntax overrides."""
    function = click.argument("inputs", nargs=-1)(function)
    return click.option(
        "--input",
        "-i",
        "input_file",
        type=click.Path(exists=False, file_okay=True, dir_okay=True, readable=True),
        help=(
            "Path to an input file or a directory. "
            f"If the latter, a file {DEFAULT_FILENAME} must exist."
        ),
        default=None,
    )(function)


@click.group(context_settings=dict(help_option_names=["-h", "--help"]))
@click.option("--verbose", "-v", count=True, help="Log progress, twice for details.")
@click.version_option(version=__version__)
def confsafe(verbose: int):
    """Confidence-based safety filters.

    Commands accept their inputs from three locations with increasing priorities: (i)
    hard-coded defaults, (ii) an optional input file specified on the command-line,
    (iii) any number of modifiers also on the command-line. The latter follow the dot
    syntax implemented by omegaconf. See `run-pipeline --help-usage` and
    `run-pipeline --help-parameters` for more information.
    """
    from logging import DEBUG, INFO, WARNING, basicConfig

    level = {0: WARNING, 1: INFO}.get(verbose, DEBUG)
    basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s: %(message)s")


@confsafe.command(name="run-pipeline")
@experiment_command
@click.option(
    "--print-yaml",
    "-p",
    is_flag=True,
    help="""Prints input settings to the standard out.

    This option is mainly useful to ensure that the settings are correctly specified,
    including defaults and command-line arguments.
    """,
)
@click.option(
    "--print-interpolated",
    is_flag=True,
    help="Prints input settings to the standard out, including variable interpolation.",
)
@click.option(
    "--help-usage", is_flag=True, help="A few examples showing how to call confsafe."
)
@click.option(
    "--help-parameters", help="Print parameter description to screen.", is_flag=True
)
def run_pipeline(
    input_file: Optional[Union[Text, Path]],
    inputs: List[Text],
    print_yaml: bool,
    print_interpolated: bool,
    help_usage: bool,
    help_parameters: bool,
):
    """Runs every stage of an experiment."""
    from io import StringIO

    from omegaconf import OmegaConf
    from yaml import dump

    from confsafe.simulation import STAGES, resolved_settings

    if help_usage:
        click.echo(EXAMPLES)
        return

    settings = read_settings(input_file, inputs)

    if help_parameters:
        click.echo(get_options())
        return

    if print_interpolated:
        click.echo(dump(resolved_settings(settings)))
        return

    if print_yaml:
        stream = StringIO()
        OmegaConf.save(settings, stream)
        stream.seek(0)
        click.echo(stream.read())
        return

    pipeline = make_pipeline(input_file, inputs, settings)
    pipeline.output.mkdir(parents=True, exist_ok=True)
    OmegaConf.save(OmegaConf.create(pipeline.config), pipeline.path("config.yaml"))
    run_stages(pipeline, *STAGES)
    click.echo(f"Artifacts written to {pipeline.output}")


@confsafe.command(name="fit-model")
@experiment_command
def fit_model(input_file: Optional[Union[Text, Path]], inputs: List[Text]):
    """Collects warm-up data if needed, then fits the model set."""
    pipeline = make_pipeline(input_file, inputs)
    if pipeline.path("buffer.csv").exists():
        run_stages(pipeline, "fit_model")
    else:
        run_stages(pipeline, "warmup", "fit_model")


@confsafe.command(name="learn-backup")
@experiment_command
def learn_backup(input_file: Optional[Union[Text, Path]], inputs: List[Text]):
    """Learns the backup policy on a fitted model set."""
    run_stages(make_pipeline(input_file, inputs), "learn_backup")


@confsafe.command(name="solve-value")
@experiment_command
def solve_value(input_file: Optional[Union[Text, Path]], inputs: List[Text]):
    """Tabulates the pessimistic value of the backup policy."""
    run_stages(make_pipeline(input_file, inputs), "solve_value")


@confsafe.command(name="certify")
@experiment_command
def certify(input_file: Optional[Union[Text, Path]], inputs: List[Text]):
    """Checks the drift condition and computes the finite-horizon certificate."""
    pipeline = make_pipeline(input_file, inputs)
    run_stages(pipeline, "certify")
    report = pipeline.certificate
    if report is None:
        return
    if report.certified:
        click.echo(f"delta over {report.K} steps: {report.delta:.6g}")
    else:
        click.echo("Not certified: " + "; ".join(report.warnings))


@confsafe.command(name="rollout")
@experiment_command
def rollout(input_file: Optional[Union[Text, Path]], inputs: List[Text]):
    """Runs filtered episodes on the true environment."""
    pipeline = make_pipeline(input_file, inputs)
    run_stages(pipeline, "rollouts")
    metrics = pipeline.metrics
    click.echo(
        f"{len(metrics)} episodes: mean return {metrics['return'].mean():.4g},"
        f" {metrics['violations'].sum()} violations,"
        f" {metrics['interventions'].sum()} interventions"
    )


@confsafe.command(name="compare")
@click.argument(
    "run_dirs", nargs=-1, type=click.Path(file_okay=False, dir_okay=True)
)
@click.option(
    "--output",
    "-o",
    type=click.Path(dir_okay=False, writable=True),
    default="summary.csv",
    help="Where to write the summary table.",
)
def compare(run_dirs: List[Text], output: Text):
    """Summarizes the metrics of several runs."""
    from confsafe.simulation import compare as compare_runs

    try:
        summary = compare_runs(list(run_dirs), output)
    except (ValueError, FileNotFoundError) as error:
        fail("compare", error)
    click.echo(summary.to_string(index=False))
