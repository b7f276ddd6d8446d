"""Command line interface: thin argument parsing over the pipeline."""

from __future__ import annotations

import logging
import sys

import click

from . import pipeline
from .config import load_config
from .errors import DyadgainError


def _load(config_path, seed):
    overrides = {"master_seed": int(seed)} if seed is not None else None
    return load_config(config_path, overrides=overrides)


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (DyadgainError, ValueError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc


def run_options(f):
    f = click.option("--jobs", type=int, default=1, show_default=True,
                     help="Parallel fit workers.")(f)
    f = click.option("--out", "out_dir", default="run", show_default=True,
                     type=click.Path(file_okay=False),
                     help="Run output directory.")(f)
    f = click.option("--seed", type=int, default=None,
                     help="Override the configured master seed.")(f)
    f = click.option("--config", "config_path", default=None,
                     type=click.Path(exists=True, dir_okay=False),
                     help="YAML configuration file.")(f)
    return f


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Chatty progress logs.")
def main(verbose):
    """Dyadic driver gain identification pipeline."""
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )


@main.command()
@click.argument("paths", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@run_options
def ingest(paths, config_path, seed, out_dir, jobs):
    """Validate trial CSVs into a run store."""
    config = _guard(_load, config_path, seed)
    store, report = _guard(pipeline.cmd_ingest, paths, config, out_dir)
    click.echo(f"store {store}: {report['n_trials']} trials, "
               f"{report['n_excluded']} excluded")


@main.command()
@click.option("--store", "store_dir", default=None,
              type=click.Path(file_okay=False),
              help="Trial store (defaults to OUT/store).")
@run_options
def fit(config_path, seed, out_dir, jobs, store_dir):
    """Fit gains for every populated distribution and driver."""
    config = _guard(_load, config_path, seed)
    store = store_dir if store_dir is not None else f"{out_dir}/store"
    report = _guard(pipeline.cmd_fit, store, config, out_dir, jobs=jobs)
    click.echo(f"fit {len(report['distributions'])} distribution rows, "
               f"{len(report['drivers'])} driver fits -> {out_dir}")


@main.command()
@run_options
def analyze(config_path, seed, out_dir, jobs):
    """SVD decompositions, permutation tests, and plot data."""
    config = _guard(_load, config_path, seed)
    analysis = _guard(pipeline.cmd_analyze, out_dir, config, out_dir)
    click.echo(f"analyze: {len(analysis['svd'])} decompositions, "
               f"{len(analysis['permutation_tests'])} tests -> {out_dir}")


@main.command()
@click.option("--count", type=int, default=None,
              help="Trial count (defaults to the configured n_trials).")
@run_options
def simulate(config_path, seed, out_dir, jobs, count):
    """Generate a synthetic corpus with the configured policy."""
    config = _guard(_load, config_path, seed)
    manifest = _guard(pipeline.cmd_simulate, config, config.master_seed,
                      out_dir, count=count)
    click.echo(f"simulated {manifest['n_trials']} trials -> {out_dir}")


@main.command()
@run_options
def nominal(config_path, seed, out_dir, jobs):
    """Solve the configured reference trajectory and write its CSV."""
    config = _guard(_load, config_path, seed)
    traj = _guard(pipeline.cmd_nominal, config, out_dir)
    click.echo(f"nominal: {traj.n} states, converged -> {out_dir}")


@main.command()
@run_options
def report(config_path, seed, out_dir, jobs):
    """Render a stored report as a readable table."""
    text = _guard(pipeline.cmd_report, out_dir, out_dir)
    click.echo(text, nl=False)


if __name__ == "__main__":
    main()
