"""Stochastic gradient ascent over policy parameters."""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from randomhorizons import settings

from .env import (
    DoubleWell,
    DoubleWellConfig,
    Environment,
    FixedPoint,
    MountainCar,
    MountainCarConfig,
    UniformBox,
    sample_batch,
)
from .estimators import (
    build_buffer,
    estimate_z,
    state_space_dpg,
    state_space_pg,
    trajectory_dpg,
    trajectory_pg,
)
from .models import (
    DivergenceError,
    EstimatorKind,
    GradientEstimate,
    HorizonError,
    RunMetrics,
    RunMetricsRow,
    SweepCell,
    Trajectory,
)
from .policy import GaussianPolicy, Policy, init_params, save_checkpoint
from .schemas import ExperimentConfig, MountainCarEnv
from .utils import (
    METRICS_COLUMNS,
    derived_seed,
    format_number,
    init_rng,
    iteration_rng,
    moving_average,
    trajectory_streams,
)

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint"
FINAL_CHECKPOINT_FILE = "final_checkpoint"


# -------------------------
# Update rule
# -------------------------

def sgd_step(params, grad: np.ndarray, lr: float):
    """Ascent step theta + lr * grad on any policy exposing flatten/with_flat."""
    theta = params.flatten()
    grad = np.asarray(grad, dtype=float)
    if grad.shape != theta.shape:
        raise HorizonError(f"gradient has {grad.size} entries, parameters have {theta.size}.")
    updated = theta + lr * grad
    if not np.all(np.isfinite(updated)):
        raise DivergenceError("parameter update is not finite.")
    return params.with_flat(updated)


def effective_lr(lr: float, z_hat: float, biased: bool) -> float:
    """Rate at which a biased update follows the true gradient: lr / E[N + 1]."""
    return lr / z_hat if biased else lr


# -------------------------
# Factories
# -------------------------

def make_environment(config: ExperimentConfig) -> Environment:
    env_cfg = config.env
    initial = None
    if env_cfg.initial is not None:
        if env_cfg.initial.kind == "fixed":
            initial = FixedPoint(tuple(env_cfg.initial.point))
        else:
            initial = UniformBox(tuple(env_cfg.initial.lower), tuple(env_cfg.initial.upper))
    if isinstance(env_cfg, MountainCarEnv):
        cfg = MountainCarConfig(position_bounds=tuple(env_cfg.position_bounds),
                                velocity_bounds=tuple(env_cfg.velocity_bounds),
                                goal_position=env_cfg.goal_position,
                                action_cost=env_cfg.action_cost)
        return MountainCar(cfg, initial, env_cfg.max_steps)
    cfg = DoubleWellConfig(alphas=tuple(env_cfg.alphas), sigma=env_cfg.sigma, dt=env_cfg.dt,
                           target_level=env_cfg.target_level)
    return DoubleWell(cfg, initial, env_cfg.max_steps)


def make_policy(config: ExperimentConfig, env: Environment) -> Policy:
    dims = [env.d_s, *config.policy.layers, env.d_a]
    rng = init_rng(config.train.seed)
    if config.policy.kind == "gaussian":
        return GaussianPolicy.init(dims, rng)
    return init_params(dims, rng)


def estimate_gradient(config: ExperimentConfig, batch: Sequence[Trajectory], policy: Policy,
                      env: Environment, rng: np.random.Generator) -> GradientEstimate:
    est = config.estimator
    kind = est.kind
    variant = est.resolved_variant
    if kind == EstimatorKind.TRAJECTORY_PG:
        return trajectory_pg(batch, policy, variant, est.baseline)
    if kind == EstimatorKind.TRAJECTORY_DPG:
        return trajectory_dpg(batch, policy, env, variant)
    z_hat = estimate_z(batch)
    if kind.deterministic:
        return state_space_dpg(build_buffer(batch, deterministic=True), policy, env, z_hat,
                               est.m_fraction, kind.biased, rng)
    return state_space_pg(build_buffer(batch), policy, z_hat, est.m_fraction, kind.biased, rng)


# -------------------------
# Training loop
# -------------------------

class _MetricsWriter:
    """Appends rows to metrics.csv as they are produced."""

    def __init__(self, path: Optional[Path]) -> None:
        self.path = path
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh, lineterminator="\n")
            self._writer.writerow(METRICS_COLUMNS)

    def write(self, row: RunMetricsRow) -> None:
        if self._fh is None:
            return
        self._writer.writerow([format_number(getattr(row, c)) for c in METRICS_COLUMNS])
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _checkpoint(policy: Policy, output_dir: Optional[Path], name: str, fmt: str) -> None:
    if output_dir is None:
        return
    suffix = ".json" if fmt == "json" else ".bin"
    save_checkpoint(policy, output_dir / f"{name}{suffix}", fmt)


def train(config: ExperimentConfig, output_dir: Optional[Path] = None,
          policy: Optional[Policy] = None) -> RunMetrics:
    """
    Run `train.iterations` rounds of: sample K trajectories, estimate the
    gradient, take an ascent step, record one metrics row.

    With `output_dir`, metrics.csv is written row by row and the policy is
    checkpointed every `train.checkpoint_every` iterations and at the end.

    Raises:
        DivergenceError: After flushing the rows completed so far; the partial
            metrics are attached as `exc.metrics`.
    """
    env = make_environment(config)
    policy = policy if policy is not None else make_policy(config, env)
    seed = config.train.seed
    kind = config.estimator.kind
    fmt = config.policy.checkpoint_format
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)

    metrics = RunMetrics()
    writer = _MetricsWriter(output_dir / METRICS_FILE if output_dir is not None else None)
    logger.info("training %s on %s: K=%d, I=%d, lr=%g, seed=%d", kind.value, env.name,
                config.train.k, config.train.iterations, config.train.lr, seed)
    started = time.perf_counter()
    try:
        for it in range(config.train.iterations):
            batch = sample_batch(env, policy, trajectory_streams(seed, it, config.train.k))
            estimate = estimate_gradient(config, batch, policy, env, iteration_rng(seed, it))
            policy = sgd_step(policy, estimate.grad, config.train.lr)

            wall = time.perf_counter() - started if config.output.record_wall_time else 0.0
            row = RunMetricsRow(
                iter=it,
                mean_return=estimate.mean_return,
                mean_hitting_time=estimate.mean_hitting_time,
                z_hat=estimate.z_hat,
                effective_lr=effective_lr(config.train.lr, estimate.z_hat, kind.biased),
                grad_norm=estimate.grad_norm,
                censor_rate=estimate.censor_rate,
                wall_time_s=wall,
            )
            metrics.rows.append(row)
            writer.write(row)
            logger.debug("iter %d: %s", it, estimate)
            if (it + 1) % config.train.log_every == 0:
                logger.info("iter %d: mean return %.5g, z_hat %.5g, effective lr %.3g, censored %.2f",
                            it, row.mean_return, row.z_hat, row.effective_lr, row.censor_rate)
            if (it + 1) % config.train.checkpoint_every == 0:
                _checkpoint(policy, output_dir, CHECKPOINT_FILE, fmt)
    except DivergenceError as exc:
        metrics.failed = str(exc)
        logger.error("run diverged after %d iterations: %s", len(metrics), exc)
        exc.metrics = metrics
        raise
    finally:
        writer.close()

    _checkpoint(policy, output_dir, FINAL_CHECKPOINT_FILE, fmt)
    metrics.policy = policy
    return metrics


# -------------------------
# Learning-rate sweeps
# -------------------------

def repeat_seed(master_seed: int, repeat: int) -> int:
    """Repeat 0 keeps the master seed; the same seeds are reused across rates."""
    return master_seed if repeat == 0 else derived_seed(master_seed, repeat)


def final_smoothed(values: Iterable[float], window: int = settings.SMOOTHING_WINDOW) -> float:
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        return float("nan")
    return float(moving_average(values, window)[-1])


def cell_config(config: ExperimentConfig, lr: float, repeat: int) -> ExperimentConfig:
    """The config one sweep cell trains with."""
    return config.model_copy(update={
        "train": config.train.model_copy(update={"lr": lr, "seed": repeat_seed(config.train.seed, repeat)}),
    })


def _run_cell(config: ExperimentConfig, lr: float, repeat: int,
              output_dir: Optional[Path]) -> SweepCell:
    cell = cell_config(config, lr, repeat)
    seed = cell.train.seed
    try:
        metrics = train(cell, output_dir)
        status, error = "ok", ""
    except DivergenceError as exc:
        metrics = getattr(exc, "metrics", RunMetrics())
        status, error = "failed", str(exc)
    return SweepCell(
        lr=lr, repeat=repeat, seed=seed, status=status, iterations=len(metrics),
        final_neg_return=final_smoothed(-r.mean_return for r in metrics.rows),
        final_hitting_time=final_smoothed(r.mean_hitting_time for r in metrics.rows),
        error=error,
    )


def cell_dir_name(lr: float, repeat: int) -> str:
    return f"lr_{lr:g}_rep_{repeat}"


def lr_sweep(config: ExperimentConfig, lrs: Sequence[float], repeats: int = 1,
             output_dir: Optional[Path] = None, workers: int = 1) -> List[SweepCell]:
    """
    Train once per (learning rate, repeat). Diverged cells are recorded as
    failed and the sweep continues. Cells are returned in (lr, repeat) order
    whatever the number of workers.
    """
    if not lrs:
        raise HorizonError("a sweep needs at least one learning rate.")
    if repeats < 1:
        raise HorizonError("repeats must be at least 1.")
    jobs = []
    for lr in lrs:
        for repeat in range(repeats):
            cell_out = Path(output_dir) / cell_dir_name(lr, repeat) if output_dir is not None else None
            jobs.append((config, float(lr), repeat, cell_out))

    if workers <= 1:
        cells = [_run_cell(*job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, *zip(*jobs)))
    failed = sum(c.failed for c in cells)
    if failed:
        logger.warning("%d of %d sweep cells diverged.", failed, len(cells))
    return cells
