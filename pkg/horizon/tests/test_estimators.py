from __future__ import annotations

import numpy as np
import pytest

from ..cli_features.verification import (
    affine_policy,
    check_collapse_dpg,
    check_collapse_pg,
    check_noise_reconstruction,
    check_scaling_identity,
    one_dim_double_well,
    relative_error,
)
from ..env import DoubleWell, DoubleWellConfig, FixedPoint, MountainCar, langevin_step, sample_batch
from ..estimators import (
    build_buffer,
    estimate_z,
    geometric_horizon_return,
    grad_a_log_p,
    occupancy_histogram,
    occupancy_to_csv,
    returns_from_trajectory,
    state_space_dpg,
    state_space_pg,
    trajectory_dpg,
    trajectory_pg,
)
from ..models import (
    BaselineKind,
    ConfigurationError,
    EmptyBatchError,
    GridSpec,
    MissingNoiseError,
    Trajectory,
    Variant,
)
from ..oracle import RewardStream, branching_mdp, finite_difference_grad
from ..policy import GaussianPolicy, init_params
from ..utils import parse_csv_bytes, trajectory_streams


def _trajectory(rewards, states=None) -> Trajectory:
    rewards = np.asarray(rewards, dtype=float)
    n = len(rewards) - 1
    states = np.zeros((n + 1, 1)) if states is None else np.asarray(states, dtype=float)
    return Trajectory(states=states, actions=np.zeros((n + 1, 1)), rewards=rewards,
                      noises=np.zeros((n, 1)), hitting_step=n, censored=False)


def _tabular_batch(seed: int, k: int):
    mdp, policy = branching_mdp()
    return policy, sample_batch(mdp, policy, trajectory_streams(seed, 0, k))


def _well_batch(seed: int, k: int):
    env = one_dim_double_well()
    mu = affine_policy(0.2, 0.5)
    return env, mu, sample_batch(env, mu, trajectory_streams(seed, 0, k))


# -------------------------
# Returns and Z
# -------------------------

def test_returns_to_go():
    assert returns_from_trajectory(_trajectory([-1, -1, 0])).returns_to_go.tolist() == [-2, -1, 0]
    assert returns_from_trajectory(_trajectory([0, 0, 0])).returns_to_go.tolist() == [0, 0, 0]
    rewards = np.random.default_rng(0).standard_normal(50)
    profile = returns_from_trajectory(_trajectory(rewards))
    assert abs(profile.total - sum(rewards.tolist())) <= 1e-12


def test_estimate_z_examples():
    batch = [_trajectory(np.zeros(n + 1)) for n in (3, 5, 1)]
    assert estimate_z(batch) == 4.0
    assert estimate_z([_trajectory([0.0])]) == 1.0
    with pytest.raises(EmptyBatchError):
        estimate_z([])


def test_estimate_z_on_geometric_hitting_times():
    n = np.random.default_rng(3).geometric(0.5, size=100_000) - 1
    batch = [_trajectory(np.zeros(k + 1)) for k in n]
    se = np.std(n + 1, ddof=1) / np.sqrt(len(n))
    assert abs(estimate_z(batch) - 2.0) < 3 * se


# -------------------------
# Stochastic policies
# -------------------------

def test_zero_rewards_give_zero_gradient():
    policy = GaussianPolicy.init([1, 3, 1], np.random.default_rng(0))
    rng = np.random.default_rng(1)
    batch = [Trajectory(states=rng.standard_normal((4, 1)), actions=rng.standard_normal((4, 1)),
                        rewards=np.zeros(4), noises=np.zeros((3, 0)), hitting_step=3, censored=False)]
    assert not np.any(trajectory_pg(batch, policy).grad)
    assert not np.any(trajectory_pg(batch, policy, Variant.FULL_RETURN).grad)


def test_trajectory_pg_rejects_bad_input():
    policy, batch = _tabular_batch(0, 5)
    with pytest.raises(EmptyBatchError):
        trajectory_pg([], policy)
    with pytest.raises(ConfigurationError):
        trajectory_pg(batch, policy, Variant.REWARD_TO_GO_NEXT)


def test_trajectory_pg_matches_per_step_sum():
    policy, batch = _tabular_batch(1, 30)
    expected = np.zeros(policy.size)
    for traj in batch:
        g = returns_from_trajectory(traj).returns_to_go
        rows = policy.grad_log_prob(traj.states, traj.actions, per_sample=True)
        expected += g @ rows
    assert relative_error(trajectory_pg(batch, policy).grad, expected / len(batch)) < 1e-12


def test_baseline_shifts_weights_by_batch_mean():
    policy, batch = _tabular_batch(2, 40)
    plain = trajectory_pg(batch, policy, Variant.FULL_RETURN)
    baselined = trajectory_pg(batch, policy, Variant.FULL_RETURN, BaselineKind.BATCH_MEAN_RETURN)
    mean_return = np.mean([t.rewards.sum() for t in batch])
    shift = np.zeros(policy.size)
    for traj in batch:
        shift += policy.grad_log_prob(traj.states, traj.actions)
    assert relative_error(baselined.grad, plain.grad - mean_return * shift / len(batch)) < 1e-10


def _batch_gradients(estimate, n_batches: int = 200, k: int = 100, seed: int = 40) -> np.ndarray:
    mdp, policy = branching_mdp()
    return np.array([estimate(sample_batch(mdp, policy, trajectory_streams(seed, b, k)), policy).grad
                     for b in range(n_batches)])


def _agree_within(a: np.ndarray, b: np.ndarray, n_se: float) -> bool:
    combined = np.sqrt(a.var(axis=0, ddof=1) / len(a) + b.var(axis=0, ddof=1) / len(b))
    return bool(np.all(np.abs(a.mean(axis=0) - b.mean(axis=0)) < n_se * combined))


def test_batch_mean_baseline_leaves_the_mean_gradient_unchanged():
    plain = _batch_gradients(lambda batch, p: trajectory_pg(batch, p, Variant.FULL_RETURN))
    baselined = _batch_gradients(
        lambda batch, p: trajectory_pg(batch, p, Variant.FULL_RETURN, BaselineKind.BATCH_MEAN_RETURN))
    assert _agree_within(baselined, plain, 4.0)


def test_full_return_and_reward_to_go_agree_in_mean():
    full = _batch_gradients(lambda batch, p: trajectory_pg(batch, p, Variant.FULL_RETURN))
    to_go = _batch_gradients(lambda batch, p: trajectory_pg(batch, p, Variant.REWARD_TO_GO))
    assert _agree_within(full, to_go, 4.0)
    assert not np.array_equal(full, to_go)


def test_state_space_scaling_identity():
    assert check_scaling_identity(seed=4) <= 1e-12


def test_state_space_collapses_to_trajectory_estimators():
    assert check_collapse_pg(n_batches=20, seed=5) <= 1e-10
    assert check_collapse_dpg(n_batches=20, seed=6) <= 1e-10


def test_state_space_subsample_size():
    policy, batch = _tabular_batch(3, 25)
    buffer = build_buffer(batch)
    assert buffer.size == sum(t.hitting_step + 1 for t in batch)
    z = estimate_z(batch)
    a = state_space_pg(buffer, policy, z, 0.3, False, np.random.default_rng(0))
    b = state_space_pg(buffer, policy, z, 0.3, False, np.random.default_rng(0))
    assert np.array_equal(a.grad, b.grad)
    with pytest.raises(ConfigurationError):
        state_space_pg(buffer, policy, z, 0.0, False, np.random.default_rng(0))


def test_estimate_reports_batch_statistics():
    policy, batch = _tabular_batch(7, 50)
    estimate = trajectory_pg(batch, policy)
    assert estimate.z_hat == estimate_z(batch)
    assert estimate.z_hat >= 1.0
    assert estimate.mean_hitting_time == pytest.approx(np.mean([t.hitting_step for t in batch]))
    assert estimate.mean_return == pytest.approx(np.mean([t.rewards.sum() for t in batch]))
    assert estimate.censor_rate == 0.0


# -------------------------
# Deterministic policies
# -------------------------

def test_grad_a_log_p_examples():
    cfg = DoubleWellConfig(alphas=(1.0, 2.0))
    s, a = np.array([0.3, -0.4]), np.array([0.5, 0.1])
    mean = langevin_step(s, a, np.zeros(2), cfg)
    assert np.max(np.abs(grad_a_log_p(s, mean, a, cfg))) <= 1e-15


def test_noise_reconstruction_identity():
    assert check_noise_reconstruction(n=10_000, seed=8) <= 1e-12


def test_grad_a_log_p_matches_finite_differences():
    cfg = DoubleWellConfig(alphas=(1.0, 2.0))
    rng = np.random.default_rng(9)
    s, a, s_next = rng.standard_normal(2), rng.standard_normal(2), rng.standard_normal(2)

    def log_p(action):
        mean = langevin_step(s, action, np.zeros(2), cfg)
        return float(-np.sum((s_next - mean) ** 2) / (2.0 * cfg.sigma ** 2 * cfg.dt))

    fd = finite_difference_grad(log_p, a, 1e-3)
    assert relative_error(grad_a_log_p(s, s_next, a, cfg), fd) < 1e-8


def test_zero_policy_with_zero_rewards_has_zero_dpg():
    env = DoubleWell(DoubleWellConfig(alphas=(1.0,)))
    mu = affine_policy(0.0, 0.0)
    xi = np.random.default_rng(0).standard_normal((5, 1))
    traj = Trajectory(states=np.zeros((6, 1)), actions=np.zeros((6, 1)), rewards=np.zeros(6),
                      noises=xi, hitting_step=5, censored=False)
    assert not np.any(trajectory_dpg([traj], mu, env).grad)


def test_trajectory_dpg_matches_frozen_batch_objective():
    """
    With the states and noises of a batch frozen, the estimator is the gradient
    of sum_n [r(S_n, mu(S_n)) + G * log p(S_{n+1} | S_n, mu(S_n))].
    """
    env, mu, batch = _well_batch(10, 6)
    cfg = env.cfg

    def frozen_objective(theta):
        policy = mu.with_flat(theta)
        total = 0.0
        for traj in batch:
            g_next = np.append(returns_from_trajectory(traj).returns_to_go[1:], 0.0)
            for n in range(traj.hitting_step):
                s, s_next = traj.states[n], traj.states[n + 1]
                a = policy.act(s[None, :], np.zeros((1, 0)))[0]
                mean = s + (a - 4.0 * cfg.alpha_array * s * (s ** 2 - 1.0)) * cfg.dt
                log_p = -np.sum((s_next - mean) ** 2) / (2.0 * cfg.sigma ** 2 * cfg.dt)
                total += -0.5 * float(a @ a) * cfg.dt + g_next[n] * log_p
        return total / len(batch)

    fd = finite_difference_grad(frozen_objective, mu.flatten(), 1e-6)
    assert relative_error(trajectory_dpg(batch, mu, env).grad, fd) < 1e-5


def test_dpg_requires_noise_and_langevin_dynamics():
    env, mu, batch = _well_batch(11, 3)
    with pytest.raises(ConfigurationError):
        trajectory_dpg(batch, mu, MountainCar())
    with pytest.raises(ConfigurationError):
        trajectory_dpg(batch, mu, env, Variant.REWARD_TO_GO)
    noiseless = [Trajectory(states=t.states, actions=t.actions, rewards=t.rewards,
                            noises=np.zeros((t.hitting_step, 0)), hitting_step=t.hitting_step,
                            censored=False) for t in batch if t.hitting_step > 0]
    with pytest.raises(MissingNoiseError):
        trajectory_dpg(noiseless, mu, env)
    with pytest.raises(MissingNoiseError):
        state_space_dpg(build_buffer(batch), mu, env, 1.0, 1.0, False, np.random.default_rng(0))


def test_deterministic_buffer_layout():
    _, _, batch = _well_batch(12, 4)
    buffer = build_buffer(batch, deterministic=True)
    assert buffer.size == sum(t.hitting_step + 1 for t in batch)
    end = batch[0].hitting_step
    assert np.array_equal(buffer.next_states[:end], batch[0].states[1:])
    assert np.array_equal(buffer.next_states[end], batch[0].states[-1])
    assert not np.any(buffer.noises[end])
    assert buffer.returns[end] == 0.0


# -------------------------
# Occupancy and geometric horizons
# -------------------------

def test_occupancy_single_cell():
    grid = GridSpec(coords=(0, 0), lower=(0.0, 0.0), upper=(1.0, 1.0), bins=(2, 2))
    traj = _trajectory(np.zeros(5), states=np.full((5, 1), 0.25))
    hist = occupancy_histogram([traj], grid)
    assert hist.counts[0, 0] == 5
    assert hist.total == 5
    assert hist.normalized().sum() == pytest.approx(1.0)


def test_occupancy_total_counts_every_visit():
    env = DoubleWell(DoubleWellConfig(alphas=(1.0, 1.0)), initial=FixedPoint((0.5, 0.5)))
    batch = sample_batch(env, init_params([2, 4, 2], np.random.default_rng(0)),
                         trajectory_streams(13, 0, 20))
    grid = GridSpec(coords=(0, 1), lower=(-0.5, -0.5), upper=(0.5, 0.5), bins=(4, 4))
    hist = occupancy_histogram(batch, grid)
    assert hist.total == sum(t.hitting_step + 1 for t in batch)


def test_occupancy_csv_schema():
    grid = GridSpec(coords=(0, 0), lower=(0.0, 0.0), upper=(1.0, 1.0), bins=(2, 3))
    hist = occupancy_histogram([_trajectory(np.zeros(3), states=np.full((3, 1), 0.9))], grid)
    rows = parse_csv_bytes(occupancy_to_csv(hist).encode(), "OCCUPANCY")
    assert len(rows) == 6
    assert sum(r["count"] for r in rows) == 3
    assert occupancy_to_csv(hist).splitlines()[0] == "row,col,x_low,x_high,y_low,y_high,count,normalized"


def test_geometric_horizon_return_constant_reward():
    stream = RewardStream(base=1.0)
    rng = np.random.default_rng(15)
    values = np.array([geometric_horizon_return(stream, affine_policy(0.0, 0.0), 0.5, rng)
                       for _ in range(4000)])
    se = values.std(ddof=1) / np.sqrt(len(values))
    assert abs(values.mean() - 2.0) < 3 * se
    assert geometric_horizon_return(stream, affine_policy(0.0, 0.0), 1e-9, rng) == 1.0
    with pytest.raises(ConfigurationError):
        geometric_horizon_return(stream, affine_policy(0.0, 0.0), 1.0, rng)
