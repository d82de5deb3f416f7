from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional

from randomhorizons import settings

from .. import __version__
from ..models import ConfigurationError, DivergenceError, RunMetrics
from ..schemas import ExperimentConfig, RunManifest
from ..trainer import train

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"


def write_manifest(config: ExperimentConfig, output_dir: Path, iterations_completed: int,
                   failed: Optional[str] = None) -> Path:
    """Resolved config, seed and version: enough to repeat the run exactly."""
    manifest = RunManifest(
        version=__version__,
        seed=config.train.seed,
        config=config.to_document(),
        iterations_completed=iterations_completed,
        failed=failed,
    )
    Path(output_dir).mkdir(parents=True, exist_ok=True)
    path = Path(output_dir) / MANIFEST_FILE
    path.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return path


def load_manifest_config(path: Path) -> ExperimentConfig:
    """Config stored in a run manifest, so a run can be repeated from its output directory."""
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read manifest {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or "config" not in payload:
        raise ConfigurationError(f"manifest {path} has no 'config' entry.", "config")
    return ExperimentConfig.from_document(payload["config"])


def _train(config_path: Path, output_dir: Optional[Path] = None) -> RunMetrics:
    """
    Train from a YAML config or a run manifest and write metrics.csv, the
    final checkpoint and manifest.json into the output directory.

    Raises:
        ConfigurationError: If the config cannot be read or validated.
        DivergenceError: After the manifest of the partial run has been written.
    """
    config_path = Path(config_path)
    if config_path.suffix == ".json":
        config = load_manifest_config(config_path)
    else:
        config = ExperimentConfig.from_yaml(config_path)
    out = Path(output_dir) if output_dir is not None else settings.resolve_output_dir(config.output.dir)

    try:
        metrics = train(config, out)
    except DivergenceError as exc:
        partial = getattr(exc, "metrics", RunMetrics())
        write_manifest(config, out, len(partial), str(exc))
        raise
    write_manifest(config, out, len(metrics))
    logger.info("wrote %d metrics rows to %s", len(metrics), out)
    return metrics
