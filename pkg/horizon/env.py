"""Markov decision processes stopped at the first hitting time of a target set.

States and actions are float64 arrays. Every dynamics/reward function accepts a
single vector of shape (d,) or a stack of shape (n, d); rollouts advance a
whole batch in lockstep.
"""
from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from randomhorizons import settings

from .models import ConfigurationError, DivergenceError, InvalidStateError, Trajectory

logger = logging.getLogger(__name__)

# Per-trajectory draws are taken from each stream in blocks of this many steps.
DRAW_BLOCK = 256


# -------------------------
# Initial distributions
# -------------------------

@dataclass(frozen=True)
class FixedPoint:
    point: Tuple[float, ...]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return np.array(self.point, dtype=float)

    @property
    def dim(self) -> int:
        return len(self.point)


@dataclass(frozen=True)
class UniformBox:
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.lower) != len(self.upper):
            raise ConfigurationError("UniformBox bounds must have equal length.", "env.initial")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ConfigurationError("UniformBox lower bound exceeds upper bound.", "env.initial")

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(np.asarray(self.lower, float), np.asarray(self.upper, float))

    @property
    def dim(self) -> int:
        return len(self.lower)


InitialStateDistribution = Union[FixedPoint, UniformBox]


# -------------------------
# Environment configs
# -------------------------

@dataclass(frozen=True)
class MountainCarConfig:
    position_bounds: Tuple[float, float] = (-1.2, 0.6)
    velocity_bounds: Tuple[float, float] = (-0.07, 0.07)
    goal_position: float = 0.45
    action_cost: float = 0.1
    power: float = 0.0015
    gravity: float = 0.0025


@dataclass(frozen=True)
class DoubleWellConfig:
    alphas: Tuple[float, ...] = (1.0, 1.0)
    sigma: float = float(np.sqrt(2.0))
    dt: float = 1e-2
    target_level: float = 0.25

    def __post_init__(self) -> None:
        if not self.alphas:
            raise ConfigurationError("alphas must not be empty.", "env.alphas")
        if any(a <= 0 for a in self.alphas):
            raise ConfigurationError("every alpha must be positive.", "env.alphas")
        if self.sigma <= 0:
            raise ConfigurationError("sigma must be positive.", "env.sigma")
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive.", "env.dt")

    @property
    def dim(self) -> int:
        return len(self.alphas)

    @property
    def alpha_array(self) -> np.ndarray:
        return np.asarray(self.alphas, dtype=float)


# -------------------------
# Mountain car
# -------------------------

def mountain_car_step(s: np.ndarray, a: np.ndarray,
                      cfg: MountainCarConfig = MountainCarConfig()) -> np.ndarray:
    """Advance (x, v) by one step; `a` must already be clipped to [-1, 1]."""
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
        raise InvalidStateError("mountain car received a non-finite state or action.")
    x, v = s[..., 0], s[..., 1]
    v_next = np.clip(v + cfg.power * a[..., 0] - cfg.gravity * np.cos(3.0 * x),
                     cfg.velocity_bounds[0], cfg.velocity_bounds[1])
    x_next = x + v_next
    # inelastic left wall
    at_wall = x_next < cfg.position_bounds[0]
    x_next = np.where(at_wall, cfg.position_bounds[0], x_next)
    v_next = np.where(at_wall, 0.0, v_next)
    return np.stack([x_next, v_next], axis=-1)


def mountain_car_is_terminal(s: np.ndarray,
                             cfg: MountainCarConfig = MountainCarConfig()) -> np.ndarray:
    return np.asarray(s, dtype=float)[..., 0] >= cfg.goal_position


def mountain_car_reward(s: np.ndarray, a: np.ndarray,
                        cfg: MountainCarConfig = MountainCarConfig()) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    r = -1.0 - cfg.action_cost * np.sum(a ** 2, axis=-1)
    return np.where(mountain_car_is_terminal(s, cfg), 0.0, r)


# -------------------------
# Double well (overdamped Langevin)
# -------------------------

def double_well_potential(s: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return np.sum(np.asarray(alphas, float) * (s ** 2 - 1.0) ** 2, axis=-1)


def double_well_grad_U(s: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    if s.shape[-1] != alphas.shape[-1]:
        raise InvalidStateError(
            f"state has dimension {s.shape[-1]} but {alphas.shape[-1]} alphas were given.")
    return 4.0 * alphas * s * (s ** 2 - 1.0)


def langevin_step(s: np.ndarray, a: np.ndarray, xi: np.ndarray,
                  cfg: DoubleWellConfig) -> np.ndarray:
    """Euler-Maruyama step s + (a - grad U(s)) dt + sigma sqrt(dt) xi."""
    s = np.asarray(s, dtype=float)
    drift = np.asarray(a, dtype=float) - double_well_grad_U(s, cfg.alpha_array)
    s_next = s + drift * cfg.dt + cfg.sigma * np.sqrt(cfg.dt) * np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(s_next)):
        raise DivergenceError(
            "Langevin step produced a non-finite state; reduce dt or the learning rate.")
    return s_next


def double_well_is_terminal(s: np.ndarray, cfg: DoubleWellConfig) -> np.ndarray:
    """Target set T~ x R^(d-2): first two coordinates positive and inside the well."""
    s = np.asarray(s, dtype=float)
    head = min(2, cfg.dim)
    lead = s[..., :head]
    level = double_well_potential(lead, cfg.alpha_array[:head])
    return np.all(lead > 0.0, axis=-1) & (level <= cfg.target_level)


def double_well_reward(s: np.ndarray, a: np.ndarray, cfg: DoubleWellConfig) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    r = -cfg.dt - 0.5 * np.sum(a ** 2, axis=-1) * cfg.dt
    return np.where(double_well_is_terminal(s, cfg), 0.0, r)


# -------------------------
# Environment protocol
# -------------------------

class Environment(ABC):
    """Vectorized MDP stopped when a state enters the target set.

    `noise_dim` is the size of the per-step dynamics draw (0 for deterministic
    dynamics) and `noise_kind` is 'normal' or 'uniform'.
    """
    name: str = "environment"
    noise_kind: str = "normal"

    def __init__(self, d_s: int, d_a: int, noise_dim: int,
                 initial: InitialStateDistribution, max_steps: Optional[int] = None) -> None:
        max_steps = settings.DEFAULT_MAX_STEPS if max_steps is None else max_steps
        if max_steps < 1:
            raise ConfigurationError("max_steps must be at least 1.", "env.max_steps")
        if initial.dim != d_s:
            raise ConfigurationError(
                f"initial distribution has dimension {initial.dim}, expected {d_s}.", "env.initial")
        self.d_s = d_s
        self.d_a = d_a
        self.noise_dim = noise_dim
        self.initial = initial
        self.max_steps = max_steps

    def sample_initial(self, rng: np.random.Generator) -> np.ndarray:
        return self.initial.sample(rng)

    @abstractmethod
    def transition(self, states: np.ndarray, actions: np.ndarray, noises: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def reward(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def is_terminal(self, states: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def grad_a_reward(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        ...

    def __repr__(self) -> str:
        return f"{type(self).__name__}(d_s={self.d_s}, d_a={self.d_a}, max_steps={self.max_steps})"


class MountainCar(Environment):
    name = "mountain_car"

    def __init__(self, cfg: MountainCarConfig = MountainCarConfig(),
                 initial: Optional[InitialStateDistribution] = None,
                 max_steps: Optional[int] = None) -> None:
        initial = initial or UniformBox((-0.6, 0.0), (-0.4, 0.0))
        super().__init__(2, 1, 0, initial, max_steps)
        self.cfg = cfg

    @staticmethod
    def clip_action(actions: np.ndarray) -> np.ndarray:
        return np.clip(actions, -1.0, 1.0)

    def transition(self, states, actions, noises):
        return mountain_car_step(states, self.clip_action(actions), self.cfg)

    def reward(self, states, actions):
        return mountain_car_reward(states, self.clip_action(actions), self.cfg)

    def is_terminal(self, states):
        return mountain_car_is_terminal(states, self.cfg)

    def grad_a_reward(self, states, actions):
        grad = -2.0 * self.cfg.action_cost * np.asarray(actions, dtype=float)
        return np.where(self.is_terminal(states)[..., None], 0.0, grad)


class DoubleWell(Environment):
    name = "double_well"

    def __init__(self, cfg: DoubleWellConfig = DoubleWellConfig(),
                 initial: Optional[InitialStateDistribution] = None,
                 max_steps: Optional[int] = None) -> None:
        initial = initial or FixedPoint(tuple([-1.0] * cfg.dim))
        super().__init__(cfg.dim, cfg.dim, cfg.dim, initial, max_steps)
        self.cfg = cfg

    def transition(self, states, actions, noises):
        return langevin_step(states, actions, noises, self.cfg)

    def reward(self, states, actions):
        return double_well_reward(states, actions, self.cfg)

    def is_terminal(self, states):
        return double_well_is_terminal(states, self.cfg)

    def grad_a_reward(self, states, actions):
        grad = -np.asarray(actions, dtype=float) * self.cfg.dt
        return np.where(self.is_terminal(states)[..., None], 0.0, grad)


def is_terminal(s: np.ndarray, env: Environment) -> Union[bool, np.ndarray]:
    """A bool for a single state, a boolean array of shape (n,) for a stack."""
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != env.d_s:
        raise InvalidStateError(f"state has dimension {s.shape[-1]}, expected {env.d_s}.")
    terminal = env.is_terminal(s)
    return bool(terminal) if s.ndim == 1 else np.asarray(terminal, dtype=bool)


# -------------------------
# Rollouts
# -------------------------

class RolloutPolicy(Protocol):
    """Anything that maps a stack of states plus per-step draws to actions."""
    d_a: int
    draw_dim: int
    draw_kind: str

    def act(self, states: np.ndarray, draws: np.ndarray) -> np.ndarray:
        ...


def _draw(rng: np.random.Generator, kind: str, shape: Tuple[int, int]) -> np.ndarray:
    if kind == "uniform":
        return rng.random(shape)
    return rng.standard_normal(shape)


@dataclass
class _History:
    ids: List[np.ndarray] = field(default_factory=list)
    rows: List[np.ndarray] = field(default_factory=list)

    def add(self, ids: np.ndarray, rows: np.ndarray) -> None:
        self.ids.append(ids)
        self.rows.append(rows)

    def split(self, counts: np.ndarray, width: int) -> List[np.ndarray]:
        """Group rows by trajectory id, keeping time order within each group."""
        if not self.ids:
            return [np.zeros((0, width)) for _ in counts]
        ids = np.concatenate(self.ids)
        rows = np.concatenate(self.rows)
        order = np.argsort(ids, kind="stable")
        return np.split(rows[order], np.cumsum(counts)[:-1])


def sample_batch(env: Environment, policy: RolloutPolicy,
                 rngs: Sequence[np.random.Generator],
                 max_steps: Optional[int] = None) -> List[Trajectory]:
    """
    Roll out one trajectory per generator until the target set or the step cap.

    Each trajectory draws its initial state, its policy draws and its dynamics
    noise only from its own generator, in blocks of DRAW_BLOCK steps, so the
    result for trajectory k does not depend on the other streams.

    Raises:
        ConfigurationError: If the policy does not match the environment.
        DivergenceError: Propagated from the dynamics.
    """
    if policy.d_a != env.d_a:
        raise ConfigurationError(
            f"policy produces {policy.d_a} actions but the environment expects {env.d_a}.",
            "policy.layers")
    cap = env.max_steps if max_steps is None else max_steps
    k = len(rngs)
    if k == 0:
        return []

    states = np.stack([env.sample_initial(rng) for rng in rngs]).astype(float)
    alive = np.arange(k)
    hitting = np.zeros(k, dtype=int)
    censored = np.zeros(k, dtype=bool)
    hist_states, hist_actions, hist_rewards, hist_noises = _History(), _History(), _History(), _History()

    policy_draws = np.zeros((k, DRAW_BLOCK, policy.draw_dim))
    env_draws = np.zeros((k, DRAW_BLOCK, env.noise_dim))
    step = 0
    while alive.size:
        j = step % DRAW_BLOCK
        if j == 0:
            for idx in alive:
                if policy.draw_dim:
                    policy_draws[idx] = _draw(rngs[idx], policy.draw_kind, (DRAW_BLOCK, policy.draw_dim))
                if env.noise_dim:
                    env_draws[idx] = _draw(rngs[idx], env.noise_kind, (DRAW_BLOCK, env.noise_dim))

        s = states[alive]
        a = np.asarray(policy.act(s, policy_draws[alive, j]), dtype=float)
        r = env.reward(s, a)
        terminal = env.is_terminal(s)
        hist_states.add(alive, s)
        hist_actions.add(alive, a)
        hist_rewards.add(alive, r[:, None])

        done = terminal | (step >= cap)
        hitting[alive[done]] = step
        censored[alive[done & ~terminal]] = True

        keep = ~done
        survivors = alive[keep]
        if survivors.size:
            xi = env_draws[survivors, j]
            states[survivors] = env.transition(s[keep], a[keep], xi)
            hist_noises.add(survivors, xi)
        alive = survivors
        step += 1

    n_censored = int(censored.sum())
    if n_censored:
        logger.warning("%d of %d trajectories reached the %d-step cap before the target set.",
                       n_censored, k, cap)

    counts = hitting + 1
    all_states = hist_states.split(counts, env.d_s)
    all_actions = hist_actions.split(counts, env.d_a)
    all_rewards = hist_rewards.split(counts, 1)
    all_noises = hist_noises.split(hitting, env.noise_dim)
    return [
        Trajectory(states=all_states[i], actions=all_actions[i], rewards=all_rewards[i][:, 0],
                   noises=all_noises[i].reshape(hitting[i], env.noise_dim),
                   hitting_step=int(hitting[i]), censored=bool(censored[i]))
        for i in range(k)
    ]


def sample_trajectory(env: Environment, policy: RolloutPolicy, rng: np.random.Generator,
                      max_steps: Optional[int] = None) -> Trajectory:
    return sample_batch(env, policy, [rng], max_steps=max_steps)[0]
