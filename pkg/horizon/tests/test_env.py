from __future__ import annotations

import logging

import numpy as np
import pytest

from ..env import (
    DoubleWell,
    DoubleWellConfig,
    FixedPoint,
    MountainCar,
    MountainCarConfig,
    double_well_grad_U,
    double_well_is_terminal,
    double_well_reward,
    is_terminal,
    langevin_step,
    mountain_car_reward,
    mountain_car_step,
    sample_batch,
    sample_trajectory,
)
from ..models import ConfigurationError, DivergenceError, InvalidStateError
from ..policy import MlpParams, init_params
from ..utils import trajectory_streams


def _zero_policy(d_s: int, d_a: int) -> MlpParams:
    return MlpParams.unflatten((d_s, d_a), np.zeros(d_s * d_a + d_a))


# -------------------------
# Mountain car
# -------------------------

def test_mountain_car_step_from_rest():
    s = mountain_car_step(np.array([0.0, 0.0]), np.array([0.0]))
    assert s.tolist() == pytest.approx([-0.0025, -0.0025], abs=1e-15)


def test_mountain_car_step_into_goal_region():
    s = mountain_car_step(np.array([0.4, 0.05]), np.array([1.0]))
    assert s[1] == pytest.approx(0.05 + 0.0015 - 0.0025 * np.cos(1.2), abs=1e-15)
    assert s[1] == pytest.approx(0.0505941, abs=1e-7)
    assert s[0] == pytest.approx(0.4505941, abs=1e-7)


def test_mountain_car_left_wall_is_inelastic():
    s = mountain_car_step(np.array([-1.2, -0.07]), np.array([-1.0]))
    assert s.tolist() == [-1.2, 0.0]


def test_mountain_car_velocity_is_clipped():
    s = mountain_car_step(np.array([0.5, 0.07]), np.array([1.0]))
    assert s[1] == 0.07
    assert s[0] == pytest.approx(0.57)


def test_mountain_car_rejects_non_finite_state():
    with pytest.raises(InvalidStateError):
        mountain_car_step(np.array([np.nan, 0.0]), np.array([0.0]))


def test_mountain_car_reward():
    outside = np.array([0.0, 0.0])
    assert mountain_car_reward(outside, np.array([1.0])) == pytest.approx(-1.1)
    assert mountain_car_reward(outside, np.array([0.0])) == pytest.approx(-1.0)
    assert mountain_car_reward(np.array([0.5, 0.0]), np.array([0.7])) == 0.0


def test_mountain_car_clips_actions_in_reward_and_dynamics():
    env = MountainCar()
    s = np.array([[0.0, 0.0]])
    assert env.reward(s, np.array([[3.0]]))[0] == pytest.approx(-1.1)
    assert env.transition(s, np.array([[3.0]]), np.zeros((1, 0))).tolist() == \
        mountain_car_step(s, np.array([[1.0]])).tolist()


def test_mountain_car_target_set():
    env = MountainCar()
    assert is_terminal(np.array([0.45, 0.0]), env)
    assert not is_terminal(np.array([0.449, 0.07]), env)
    stacked = is_terminal(np.array([[0.45, 0.0], [0.449, 0.07], [0.6, -0.07]]), env)
    assert stacked.tolist() == [True, False, True]


def test_mountain_car_grad_a_reward():
    env = MountainCar(MountainCarConfig())
    assert env.grad_a_reward(np.array([0.0, 0.0]), np.array([0.5])).tolist() == pytest.approx([-0.1])
    assert env.grad_a_reward(np.array([0.5, 0.0]), np.array([0.5])).tolist() == [0.0]


# -------------------------
# Double well
# -------------------------

def test_double_well_gradient_examples():
    alphas = np.array([1.0, 1.0, 1.0])
    assert double_well_grad_U(np.zeros(3), alphas).tolist() == [0.0, 0.0, 0.0]
    assert double_well_grad_U(np.ones(3), alphas).tolist() == [0.0, 0.0, 0.0]
    assert double_well_grad_U(np.array([0.5]), np.array([5.0]))[0] == pytest.approx(-7.5)


def test_double_well_gradient_dimension_mismatch():
    with pytest.raises(InvalidStateError):
        double_well_grad_U(np.zeros(3), np.ones(2))


def test_langevin_step_examples():
    cfg = DoubleWellConfig(alphas=(1.0, 1.0))
    minimum = np.ones(2)
    assert langevin_step(minimum, np.zeros(2), np.zeros(2), cfg).tolist() == [1.0, 1.0]

    one_dim = DoubleWellConfig(alphas=(1.0,))
    s_next = langevin_step(np.zeros(1), np.zeros(1), np.ones(1), one_dim)
    assert s_next[0] == pytest.approx(np.sqrt(2.0) * np.sqrt(0.01))
    assert s_next[0] == pytest.approx(0.1414214, abs=1e-7)


def test_langevin_step_divergence():
    cfg = DoubleWellConfig(alphas=(1.0,))
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DivergenceError):
            langevin_step(np.array([1e200]), np.zeros(1), np.zeros(1), cfg)


def test_double_well_target_set_uses_first_two_coordinates():
    cfg = DoubleWellConfig(alphas=(5.0, 2.0, 0.5))
    assert double_well_is_terminal(np.array([1.0, 1.0, 1.0]), cfg)
    assert double_well_is_terminal(np.array([1.0, 1.0, -3.0]), cfg)
    assert not double_well_is_terminal(np.array([-1.0, 1.0, 1.0]), cfg)

    unit = DoubleWellConfig(alphas=(1.0, 1.0))
    assert double_well_is_terminal(np.array([0.9, 0.9]), unit)
    assert not double_well_is_terminal(np.array([0.8, 0.8]), unit)


def test_double_well_reward_examples():
    cfg = DoubleWellConfig(alphas=(1.0, 1.0))
    outside = np.array([-1.0, -1.0])
    assert double_well_reward(outside, np.array([2.0, 0.0]), cfg) == pytest.approx(-0.03)
    assert double_well_reward(outside, np.zeros(2), cfg) == pytest.approx(-0.01)
    assert double_well_reward(np.ones(2), np.array([2.0, 0.0]), cfg) == 0.0


def test_double_well_config_validation():
    with pytest.raises(ConfigurationError):
        DoubleWellConfig(alphas=())
    with pytest.raises(ConfigurationError):
        DoubleWellConfig(alphas=(1.0, -1.0))


# -------------------------
# Rollouts
# -------------------------

def test_rollout_from_target_set_stops_immediately():
    env = DoubleWell(initial=FixedPoint((1.0, 1.0)))
    traj = sample_trajectory(env, _zero_policy(2, 2), np.random.default_rng(0))
    assert traj.hitting_step == 0
    assert traj.rewards.tolist() == [0.0]
    assert traj.noises.shape == (0, 2)
    assert not traj.censored


def test_rollout_cap_censors(caplog):
    env = DoubleWell(max_steps=1)
    with caplog.at_level(logging.WARNING):
        batch = sample_batch(env, _zero_policy(2, 2), trajectory_streams(0, 0, 3))
    for traj in batch:
        assert traj.censored
        assert traj.hitting_step == 1
        assert traj.states.shape == (2, 2)
        assert traj.noises.shape == (1, 2)
    assert "3 of 3 trajectories" in caplog.text


def test_rollout_structure():
    env = DoubleWell(DoubleWellConfig(alphas=(1.0,)), initial=FixedPoint((0.3,)))
    batch = sample_batch(env, init_params([1, 3, 1], np.random.default_rng(2)),
                         trajectory_streams(5, 0, 8))
    for traj in batch:
        assert not traj.censored
        assert env.is_terminal(traj.states[-1])
        assert not np.any(env.is_terminal(traj.states[:-1]))
        assert traj.rewards[-1] == 0.0
        assert len(traj.rewards) == traj.hitting_step + 1


def test_rollout_noise_regenerates_states():
    env = DoubleWell(DoubleWellConfig(alphas=(1.0,)), initial=FixedPoint((0.0,)))
    policy = init_params([1, 3, 1], np.random.default_rng(4))
    traj = sample_trajectory(env, policy, np.random.default_rng(9))
    replay = langevin_step(traj.states[:-1], traj.actions[:-1], traj.noises, env.cfg)
    assert np.array_equal(replay, traj.states[1:])


def test_rollouts_are_reproducible_and_independent_of_batch_size():
    env = DoubleWell(DoubleWellConfig(alphas=(1.0,)), initial=FixedPoint((0.0,)))
    policy = init_params([1, 3, 1], np.random.default_rng(4))
    small = sample_batch(env, policy, trajectory_streams(11, 3, 2))
    large = sample_batch(env, policy, trajectory_streams(11, 3, 6))
    again = sample_batch(env, policy, trajectory_streams(11, 3, 6))
    for a, b in zip(small, large):
        assert a.hitting_step == b.hitting_step
        assert np.allclose(a.states, b.states, rtol=1e-12, atol=1e-14)
        assert np.array_equal(a.noises, b.noises)
    for a, b in zip(large, again):
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.rewards, b.rewards)


def test_rollout_rejects_policy_of_wrong_width():
    env = DoubleWell()
    with pytest.raises(ConfigurationError):
        sample_batch(env, _zero_policy(2, 1), trajectory_streams(0, 0, 1))


def test_is_terminal_checks_dimension():
    with pytest.raises(InvalidStateError):
        is_terminal(np.zeros(3), MountainCar())
