"""Policy-gradient estimators for objectives stopped at a random hitting time.

Trajectory estimators average over the K trajectories of a batch. State-space
estimators average over M experiences drawn from the flattened batch and are
rescaled by z_hat = mean(N + 1) unless the biased variant is requested.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from typing import Callable, Sequence, Union

import numpy as np

from .env import DoubleWell, DoubleWellConfig, Environment, RolloutPolicy, double_well_grad_U, sample_trajectory
from .models import (
    BaselineKind,
    ConfigurationError,
    DivergenceError,
    EmptyBatchError,
    ExperienceBuffer,
    GradientEstimate,
    GridSpec,
    MissingNoiseError,
    OccupancyHistogram,
    ReturnProfile,
    Trajectory,
    Variant,
)
from .policy import MlpParams, vjp_policy
from .utils import OCCUPANCY_COLUMNS, format_number

logger = logging.getLogger(__name__)

Baseline = Union[BaselineKind, Callable[[np.ndarray], np.ndarray], None]


# -------------------------
# Returns and batch statistics
# -------------------------

def returns_from_trajectory(traj: Trajectory) -> ReturnProfile:
    """G_n = r_n + G_{n+1} with G_{N+1} = 0."""
    return ReturnProfile(returns_to_go=np.cumsum(traj.rewards[::-1])[::-1].copy())


def estimate_z(batch: Sequence[Trajectory]) -> float:
    if not batch:
        raise EmptyBatchError("cannot estimate E[N+1] from an empty batch.")
    return float(np.mean([traj.hitting_step + 1 for traj in batch]))


def _require_batch(batch: Sequence[Trajectory]) -> None:
    if not batch:
        raise EmptyBatchError("gradient estimators need at least one trajectory.")


def _finite(grad: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("gradient estimate is not finite.")
    return grad


def _estimate(grad: np.ndarray, z_hat: float, hitting_steps: np.ndarray,
              initial_returns: np.ndarray, censored: np.ndarray) -> GradientEstimate:
    return GradientEstimate(
        grad=_finite(grad),
        z_hat=z_hat,
        mean_return=float(np.mean(initial_returns)),
        mean_hitting_time=float(np.mean(hitting_steps)),
        censor_rate=float(np.mean(censored)),
    )


def _batch_estimate(grad: np.ndarray, batch: Sequence[Trajectory]) -> GradientEstimate:
    return _estimate(
        grad,
        estimate_z(batch),
        np.array([t.hitting_step for t in batch]),
        np.array([t.rewards.sum() for t in batch]),
        np.array([t.censored for t in batch]),
    )


def _baseline_values(baseline: Baseline, states: np.ndarray, batch_mean: float) -> np.ndarray:
    if baseline is None or baseline == BaselineKind.NONE:
        return np.zeros(len(states))
    if baseline == BaselineKind.BATCH_MEAN_RETURN:
        return np.full(len(states), batch_mean)
    return np.asarray(baseline(states), dtype=float).reshape(len(states))


# -------------------------
# Stochastic policies
# -------------------------

def trajectory_pg(batch: Sequence[Trajectory], policy,
                  variant: Variant = Variant.REWARD_TO_GO,
                  baseline: Baseline = BaselineKind.NONE) -> GradientEstimate:
    """
    (1/K) sum_k sum_n grad log pi(S_n, A_n) (G - b(S_n)), with G the full return
    or the return-to-go.

    Raises:
        EmptyBatchError: If the batch is empty.
        DivergenceError: If the estimate is not finite.
    """
    _require_batch(batch)
    variant = Variant(variant)
    if variant == Variant.REWARD_TO_GO_NEXT:
        raise ConfigurationError("reward_to_go_next applies to deterministic estimators.",
                                 "estimator.variant")
    profiles = [returns_from_trajectory(t) for t in batch]
    batch_mean = float(np.mean([p.total for p in profiles]))

    states = np.concatenate([t.states for t in batch])
    actions = np.concatenate([t.actions for t in batch])
    if variant == Variant.FULL_RETURN:
        weights = np.concatenate([np.full(t.length, p.total) for t, p in zip(batch, profiles)])
    else:
        weights = np.concatenate([p.returns_to_go for p in profiles])
    weights = weights - _baseline_values(baseline, states, batch_mean)

    grad = policy.grad_log_prob(states, actions, weights=weights) / len(batch)
    return _batch_estimate(grad, batch)


def build_buffer(batch: Sequence[Trajectory], deterministic: bool = False) -> ExperienceBuffer:
    """
    Flatten a batch into experiences.

    Stochastic entries are (S_n, A_n, G_n). Deterministic entries are
    (S_n, S_{n+1}, xi_{n+1}, G_{n+1}); the stopped step n = N stores
    (S_N, S_N, 0, 0) since no transition follows it.
    """
    _require_batch(batch)
    profiles = [returns_from_trajectory(t) for t in batch]
    common = dict(
        deterministic=deterministic,
        states=np.concatenate([t.states for t in batch]),
        actions=np.concatenate([t.actions for t in batch]),
        hitting_steps=np.array([t.hitting_step for t in batch]),
        initial_returns=np.array([p.total for p in profiles]),
        censored=np.array([t.censored for t in batch]),
    )
    if not deterministic:
        return ExperienceBuffer(returns=np.concatenate([p.returns_to_go for p in profiles]), **common)

    next_states, noises, returns = [], [], []
    for t, p in zip(batch, profiles):
        _require_noise(t)
        next_states.append(np.concatenate([t.states[1:], t.states[-1:]]))
        noises.append(np.concatenate([t.noises, np.zeros((1, t.noises.shape[1]))]))
        returns.append(np.append(p.returns_to_go[1:], 0.0))
    return ExperienceBuffer(returns=np.concatenate(returns),
                            next_states=np.concatenate(next_states),
                            noises=np.concatenate(noises), **common)


def _subsample(buffer: ExperienceBuffer, m_fraction: float, rng: np.random.Generator) -> np.ndarray:
    if buffer.size == 0:
        raise EmptyBatchError("cannot sample experiences from an empty buffer.")
    if not 0.0 < m_fraction <= 1.0:
        raise ConfigurationError("m_fraction must lie in (0, 1].", "estimator.m_fraction")
    m = min(buffer.size, math.ceil(m_fraction * buffer.size))
    return rng.choice(buffer.size, size=m, replace=False)


def state_space_pg(buffer: ExperienceBuffer, policy, z_hat: float, m_fraction: float,
                   biased: bool, rng: np.random.Generator) -> GradientEstimate:
    """
    z_hat * (1/M) sum_m grad log pi(s_m, a_m) G_m over M experiences drawn
    without replacement; the biased variant omits z_hat.
    """
    idx = _subsample(buffer, m_fraction, rng)
    core = policy.grad_log_prob(buffer.states[idx], buffer.actions[idx],
                                weights=buffer.returns[idx]) / len(idx)
    grad = core if biased else z_hat * core
    return _estimate(grad, z_hat, buffer.hitting_steps, buffer.initial_returns, buffer.censored)


# -------------------------
# Deterministic policies, model-based
# -------------------------

def grad_a_log_p(s: np.ndarray, s_next: np.ndarray, a: np.ndarray,
                 cfg: DoubleWellConfig) -> np.ndarray:
    """grad_a log p(s_next | s, a) for p = N(s + (a - grad U(s)) dt, sigma^2 dt Id)."""
    s = np.asarray(s, dtype=float)
    mean = s + (np.asarray(a, dtype=float) - double_well_grad_U(s, cfg.alpha_array)) * cfg.dt
    return (np.asarray(s_next, dtype=float) - mean) / cfg.sigma ** 2


def noise_score(noises: np.ndarray, cfg: DoubleWellConfig) -> np.ndarray:
    """grad_a log p written through the generating noise: (sqrt(dt) / sigma) xi."""
    return np.sqrt(cfg.dt) / cfg.sigma * noises


def _require_noise(traj: Trajectory) -> None:
    if traj.hitting_step > 0 and traj.noises.shape[1] == 0:
        raise MissingNoiseError("model-based estimators need the stored dynamics noise.")


def _require_langevin(env: Environment) -> DoubleWell:
    if not isinstance(env, DoubleWell):
        raise ConfigurationError("model-based gradients need a Langevin environment.", "env.kind")
    return env


def trajectory_dpg(batch: Sequence[Trajectory], policy: MlpParams, env: DoubleWell,
                   variant: Variant = Variant.REWARD_TO_GO_NEXT) -> GradientEstimate:
    """
    (1/K) sum_k sum_n grad mu(S_n)^T (grad_a r(S_n, a) + G * grad_a log p),
    with G the full return or the return from step n + 1 on.
    """
    _require_batch(batch)
    env = _require_langevin(env)
    variant = Variant(variant)
    if variant == Variant.REWARD_TO_GO:
        raise ConfigurationError("deterministic estimators use full_return or reward_to_go_next.",
                                 "estimator.variant")
    states, seeds = [], []
    for t in batch:
        _require_noise(t)
        profile = returns_from_trajectory(t)
        score = np.concatenate([noise_score(t.noises, env.cfg), np.zeros((1, env.d_a))])
        if variant == Variant.FULL_RETURN:
            g = np.full(t.length, profile.total)
        else:
            g = np.append(profile.returns_to_go[1:], 0.0)
        states.append(t.states)
        seeds.append(env.grad_a_reward(t.states, t.actions) + g[:, None] * score)

    grad = vjp_policy(policy, np.concatenate(states), np.concatenate(seeds)) / len(batch)
    return _batch_estimate(grad, batch)


def state_space_dpg(buffer: ExperienceBuffer, policy: MlpParams, env: DoubleWell, z_hat: float,
                    m_fraction: float, biased: bool, rng: np.random.Generator) -> GradientEstimate:
    if not buffer.deterministic:
        raise MissingNoiseError("state-space DPG needs a deterministic (s, s', xi, G') buffer.")
    env = _require_langevin(env)
    idx = _subsample(buffer, m_fraction, rng)
    s, a = buffer.states[idx], buffer.actions[idx]
    seeds = env.grad_a_reward(s, a) + buffer.returns[idx, None] * noise_score(buffer.noises[idx], env.cfg)
    core = vjp_policy(policy, s, seeds) / len(idx)
    grad = core if biased else z_hat * core
    return _estimate(grad, z_hat, buffer.hitting_steps, buffer.initial_returns, buffer.censored)


# -------------------------
# Occupancy
# -------------------------

def occupancy_histogram(batch: Sequence[Trajectory], grid: GridSpec) -> OccupancyHistogram:
    """
    Count every visited state S_0..S_N (terminal included) per grid cell.

    States outside the grid are counted in the nearest border cell, so the total
    always equals sum_k (N_k + 1).
    """
    i, j = grid.coords
    edges_x, edges_y = grid.edges()
    if batch:
        states = np.concatenate([t.states for t in batch])
        x = np.clip(states[:, i], grid.lower[0], grid.upper[0])
        y = np.clip(states[:, j], grid.lower[1], grid.upper[1])
    else:
        x = y = np.zeros(0)
    counts, _, _ = np.histogram2d(x, y, bins=[edges_x, edges_y])
    return OccupancyHistogram(grid=grid, counts=counts.astype(np.int64))


def occupancy_to_csv(hist: OccupancyHistogram) -> str:
    edges_x, edges_y = hist.grid.edges()
    normalized = hist.normalized()
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(OCCUPANCY_COLUMNS)
    for r in range(hist.counts.shape[0]):
        for c in range(hist.counts.shape[1]):
            writer.writerow([r, c,
                             format_number(edges_x[r]), format_number(edges_x[r + 1]),
                             format_number(edges_y[c]), format_number(edges_y[c + 1]),
                             int(hist.counts[r, c]), format_number(normalized[r, c])])
    return out.getvalue()


# -------------------------
# Geometric horizons
# -------------------------

def geometric_horizon_return(env: Environment, policy: RolloutPolicy, gamma: float,
                             rng: np.random.Generator) -> float:
    """Undiscounted return of a rollout cut at N_gamma ~ Geom(1 - gamma) on {0, 1, ...}."""
    if not 0.0 < gamma < 1.0:
        raise ConfigurationError("gamma must lie in (0, 1).", "gamma")
    horizon = int(rng.geometric(1.0 - gamma)) - 1
    traj = sample_trajectory(env, policy, rng, max_steps=horizon)
    return float(traj.rewards.sum())

