from __future__ import annotations

import functools
import logging
from pathlib import Path
from typing import Optional

import click

from horizon.cli_features.occupancy import _occupancy
from horizon.cli_features.plots import PLOT_KINDS, _plot
from horizon.cli_features.sweeps import _sweep, parse_lrs
from horizon.cli_features.training import _train
from horizon.cli_features.verification import VERIFY_K, VERIFY_SEED, _verify
from horizon.models import ConfigurationError, DivergenceError, HorizonError

logger = logging.getLogger(__name__)

CONFIG_ERROR_EXIT = 2


class ConfigurationFailure(click.ClickException):
    exit_code = CONFIG_ERROR_EXIT


def _handle_errors(fn):
    """Map domain errors to exit codes: 2 for configuration, 1 for everything else."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigurationError as exc:
            key = f" (key: {exc.key})" if exc.key else ""
            raise ConfigurationFailure(f"invalid configuration{key}: {exc}")
        except HorizonError as exc:
            raise click.ClickException(str(exc))
    return wrapper


@click.group()
def cli() -> None:
    """Policy-gradient experiments on problems stopped at a random hitting time."""


# -----------------------------
# TRAINING
# -----------------------------
@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path),
              help="YAML experiment config, or a manifest.json to repeat a run.")
@click.option("--out", "output_dir", type=click.Path(path_type=Path), default=None,
              help="Output directory; defaults to output.dir of the config.")
@_handle_errors
def train(config_path: Path, output_dir: Optional[Path]) -> None:
    try:
        metrics = _train(config_path, output_dir)
    except DivergenceError as exc:
        raise click.ClickException(f"run diverged: {exc}")
    click.echo(f"completed {len(metrics)} iterations")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path))
@click.option("--lrs", required=True, help="Comma-separated learning rates, e.g. 5e-4,1e-3,2e-3.")
@click.option("--repeats", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True,
              help="Cells trained in parallel processes.")
@click.option("--out", "output_dir", type=click.Path(path_type=Path), default=None)
@_handle_errors
def sweep(config_path: Path, lrs: str, repeats: int, workers: int, output_dir: Optional[Path]) -> None:
    cells = _sweep(config_path, parse_lrs(lrs), repeats, workers, output_dir)
    for c in cells:
        click.echo(f"lr={c.lr:g} repeat={c.repeat} {c.status} "
                   f"final_neg_return={c.final_neg_return:.6g}")
    failed = [c for c in cells if c.failed]
    if failed:
        raise click.ClickException(f"{len(failed)} of {len(cells)} sweep cells failed")


# -----------------------------
# VERIFICATION
# -----------------------------
@cli.command()
@click.option("--k", type=click.IntRange(min=4000), default=VERIFY_K, show_default=True,
              help="Trajectories per Monte Carlo check.")
@click.option("--seed", type=int, default=VERIFY_SEED, show_default=True)
@click.option("--only", multiple=True, help="Run only the named checks.")
@_handle_errors
def verify(k: int, seed: int, only) -> None:
    results = _verify(k, seed, list(only) or None)
    for result in results:
        click.echo(str(result))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise click.ClickException(f"failed checks: {', '.join(failed)}")
    click.echo(f"all {len(results)} checks passed")


# -----------------------------
# ARTIFACTS
# -----------------------------
@cli.command()
@click.option("--input", "input_csv", required=True, type=click.Path(path_type=Path))
@click.option("--kind", required=True, type=click.Choice(PLOT_KINDS))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@_handle_errors
def plot(input_csv: Path, kind: str, out: Path) -> None:
    try:
        _plot(input_csv, kind, out)
    except OSError as exc:
        raise click.ClickException(f"cannot read {input_csv}: {exc.strerror}")
    click.echo(str(out))


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path))
@click.option("--k", type=click.IntRange(min=1), required=True, help="Trajectories to sample.")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--checkpoint", type=click.Path(path_type=Path), default=None,
              help="Policy checkpoint; the zero policy is used without one.")
@click.option("--bins", type=click.IntRange(min=1), default=50, show_default=True)
@_handle_errors
def occupancy(config_path: Path, k: int, out: Path, checkpoint: Optional[Path], bins: int) -> None:
    hist = _occupancy(config_path, k, out, checkpoint, bins)
    click.echo(f"{hist.total} visited states written to {out}")
