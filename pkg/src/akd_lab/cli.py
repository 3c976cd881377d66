#!/usr/bin/env python3
"""
Command-line front door: ``akd-lab train-teacher | train-student | evaluate | analyze``.

Exit codes: 0 success, 2 invalid config, 3 missing or corrupt artifact,
4 numeric failure (NaN/Inf), 1 anything else.
"""

import functools
import logging
import sys

import click

from . import __version__
from .errors import AkdError
from .pipeline import cmd_analyze, cmd_evaluate, cmd_train_student, cmd_train_teacher

logger = logging.getLogger("akd-lab")


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logging.getLogger().setLevel(logging.DEBUG if verbose else logging.INFO)


def experiment_command(func):
    """Shared ``--config/--output-dir/--verbose`` options and error-to-exit-code mapping."""

    @click.option(
        "--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Experiment TOML file"
    )
    @click.option(
        "--output-dir", type=click.Path(file_okay=False), default=None, help="Override the config's output_dir"
    )
    @click.option("--verbose", "-v", is_flag=True, help="Debug logging")
    @click.pass_context
    @functools.wraps(func)
    def wrapper(ctx: click.Context, verbose: bool, **kwargs):
        _configure_logging(verbose)
        try:
            message = func(**kwargs)
        except AkdError as e:
            click.echo(f"❌ {e}", err=True)
            ctx.exit(e.exit_code)
        except Exception as e:
            logger.debug("unexpected failure", exc_info=True)
            click.echo(f"❌ Unexpected error: {e}", err=True)
            ctx.exit(1)
        click.echo(f"✅ {message}")

    return wrapper


@click.group()
@click.version_option(__version__, prog_name="akd-lab")
def main():
    """Adversarial knowledge distillation experiments at desk scale."""


@main.command("train-teacher")
@click.option("--jobs", "-j", type=int, default=1, show_default=True, help="Teacher members trained in parallel")
@experiment_command
def train_teacher(config_path: str, output_dir: str, jobs: int) -> str:
    """Train the teacher (or every ensemble member)."""
    entries = cmd_train_teacher(config_path, output_dir, jobs=jobs)
    chosen = ", ".join(f"{e.role}@ep{e.designated_epoch}" for e in entries if e.designated_epoch)
    summary = f"Trained {len(entries)} teacher(s)"
    return f"{summary}; early stopping: {chosen}" if chosen else summary


@main.command("train-student")
@experiment_command
def train_student(config_path: str, output_dir: str) -> str:
    """Distill a student from the trained teacher(s)."""
    entry = cmd_train_student(config_path, output_dir)
    return f"Trained student: {entry.checkpoints['final']}"


@main.command("evaluate")
@experiment_command
def evaluate(config_path: str, output_dir: str) -> str:
    """Clean and robust accuracy of every trained model."""
    paths = cmd_evaluate(config_path, output_dir)
    return "Wrote metrics: " + ", ".join(p.name for p in paths)


@main.command("analyze")
@experiment_command
def analyze(config_path: str, output_dir: str) -> str:
    """Difficulty ranking, trajectories and entropy series."""
    paths = cmd_analyze(config_path, output_dir)
    return f"Wrote {len(paths)} analysis tables"


if __name__ == "__main__":
    main()
