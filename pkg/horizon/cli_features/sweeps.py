from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence

from randomhorizons import settings

from ..models import ConfigurationError, SweepCell
from ..schemas import ExperimentConfig
from ..trainer import cell_config, cell_dir_name, lr_sweep
from ..utils import SWEEP_COLUMNS, format_number
from .training import write_manifest

logger = logging.getLogger(__name__)

SUMMARY_FILE = "summary.csv"


def parse_lrs(text: str) -> List[float]:
    """
    Parse a comma-separated list of learning rates such as "5e-4,1e-3,2e-3".

    Raises:
        ConfigurationError: If the list is empty or a rate is not a positive number.
    """
    lrs: List[float] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            lr = float(part)
        except ValueError:
            raise ConfigurationError(f"learning rate {part!r} is not a number.", "lrs")
        if not (math.isfinite(lr) and lr > 0):
            raise ConfigurationError(f"learning rate {part!r} must be positive.", "lrs")
        lrs.append(lr)
    if not lrs:
        raise ConfigurationError("at least one learning rate is required.", "lrs")
    return lrs


def write_summary(cells: Sequence[SweepCell], path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for c in cells:
            writer.writerow([format_number(c.lr), c.repeat, c.seed, c.status, c.iterations,
                             format_number(c.final_neg_return), format_number(c.final_hitting_time),
                             c.error])
    return path


def _sweep(config_path: Path, lrs: Sequence[float], repeats: int = 1, workers: int = 1,
           output_dir: Optional[Path] = None) -> List[SweepCell]:
    """
    Run one training per (learning rate, repeat) into its own subdirectory and
    write summary.csv next to them. Failed cells are listed, not raised.
    """
    config = ExperimentConfig.from_yaml(Path(config_path))
    out = Path(output_dir) if output_dir is not None else settings.resolve_output_dir(config.output.dir)
    out.mkdir(parents=True, exist_ok=True)

    cells = lr_sweep(config, lrs, repeats=repeats, output_dir=out, workers=workers)
    for c in cells:
        write_manifest(cell_config(config, c.lr, c.repeat), out / cell_dir_name(c.lr, c.repeat),
                       c.iterations, c.error or None)
    write_summary(cells, out / SUMMARY_FILE)
    logger.info("sweep of %d cells written to %s", len(cells), out)
    return cells
