from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

import numpy as np

from ..env import Environment, MountainCar, sample_batch
from ..estimators import occupancy_histogram, occupancy_to_csv
from ..models import ConfigurationError, GridSpec, OccupancyHistogram
from ..policy import MlpParams, load_checkpoint
from ..schemas import ExperimentConfig
from ..trainer import make_environment
from ..utils import trajectory_streams

logger = logging.getLogger(__name__)


def default_grid(env: Environment, bins: int) -> GridSpec:
    if isinstance(env, MountainCar):
        return GridSpec(coords=(0, 1), lower=(env.cfg.position_bounds[0], env.cfg.velocity_bounds[0]),
                        upper=(env.cfg.position_bounds[1], env.cfg.velocity_bounds[1]), bins=(bins, bins))
    coords = (0, 1) if env.d_s > 1 else (0, 0)
    return GridSpec(coords=coords, lower=(-2.0, -2.0), upper=(2.0, 2.0), bins=(bins, bins))


def zero_policy(env: Environment) -> MlpParams:
    """Deterministic policy whose action is always 0 (uncontrolled dynamics)."""
    dims = (env.d_s, env.d_a)
    return MlpParams.unflatten(dims, np.zeros(env.d_s * env.d_a + env.d_a))


def _occupancy(config_path: Path, k: int, out: Path, checkpoint: Optional[Path] = None,
               bins: int = 50) -> OccupancyHistogram:
    """Sample k trajectories and write the visit histogram of the first two coordinates."""
    if k < 1:
        raise ConfigurationError("k must be at least 1.", "k")
    if bins < 1:
        raise ConfigurationError("bins must be at least 1.", "bins")
    config = ExperimentConfig.from_yaml(Path(config_path))
    env = make_environment(config)
    policy = load_checkpoint(checkpoint) if checkpoint is not None else zero_policy(env)
    if policy.d_a != env.d_a:
        raise ConfigurationError("checkpoint does not match the configured environment.", "checkpoint")

    batch = sample_batch(env, policy, trajectory_streams(config.train.seed, 0, k))
    hist = occupancy_histogram(batch, default_grid(env, bins))
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(occupancy_to_csv(hist))
    logger.info("occupancy of %d states from %d trajectories written to %s", hist.total, k, out)
    return hist
