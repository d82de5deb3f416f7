"""Ground truth for the estimators: finite differences, exact values on small
absorbing MDPs, and the geometric-horizon versus discounting comparison.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .env import Environment, FixedPoint, RolloutPolicy, sample_batch
from .models import ConfigurationError, DivergenceError, SingularSystemError, Trajectory
from .utils import iteration_rng, trajectory_streams

logger = logging.getLogger(__name__)

DISCOUNT_CUTOFF = 1e-12
EPS_NOISY = 1e-5
EPS_EXACT = 1e-6


# -------------------------
# Finite differences
# -------------------------

def finite_difference_grad(f: Callable[[np.ndarray], float], params: np.ndarray,
                           eps: float = EPS_NOISY) -> np.ndarray:
    """Central differences (f(theta + eps e_i) - f(theta - eps e_i)) / (2 eps)."""
    if eps <= 0:
        raise ConfigurationError("eps must be positive.", "eps")
    theta = np.asarray(params, dtype=float)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step.flat[i] = eps
        hi, lo = float(f(theta + step)), float(f(theta - step))
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise DivergenceError(f"objective is not finite around coordinate {i}.")
        grad.flat[i] = (hi - lo) / (2.0 * eps)
    return grad


# -------------------------
# Tabular absorbing MDP
# -------------------------

@dataclass(frozen=True)
class Categorical:
    """Initial distribution over state indices, as a 1-d state vector."""
    probs: Tuple[float, ...]

    @property
    def dim(self) -> int:
        return 1

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([float(rng.choice(len(self.probs), p=np.asarray(self.probs)))])


class TabularMdp(Environment):
    """
    Finite MDP whose last state is absorbing with zero reward.

    States and actions travel through the rollout code as 1-d float vectors
    holding the index; transitions use one uniform draw per step.
    """
    name = "tabular"
    noise_kind = "uniform"

    def __init__(self, transitions: np.ndarray, rewards: np.ndarray, initial: Sequence[float],
                 max_steps: Optional[int] = None) -> None:
        P = np.asarray(transitions, dtype=float)
        R = np.asarray(rewards, dtype=float)
        n_states, n_actions, _ = P.shape
        if n_states > 8 or n_actions > 3:
            raise ConfigurationError("tabular MDPs are limited to 8 states and 3 actions.", "mdp")
        if R.shape != (n_states, n_actions):
            raise ConfigurationError("reward table must be n_states x n_actions.", "mdp")
        if not np.allclose(P.sum(axis=2), 1.0):
            raise ConfigurationError("transition rows must sum to one.", "mdp")
        terminal = n_states - 1
        if not (np.allclose(P[terminal, :, terminal], 1.0) and np.allclose(R[terminal], 0.0)):
            raise ConfigurationError("the last state must be absorbing with zero reward.", "mdp")
        init = np.zeros(n_states)
        init[:len(initial)] = initial
        if init[terminal] != 0.0 or not np.isclose(init.sum(), 1.0):
            raise ConfigurationError("initial distribution must live on transient states.", "mdp")
        super().__init__(1, 1, 1, Categorical(tuple(init)), max_steps)
        self.P = P
        self.R = R
        self.n_states = n_states
        self.n_actions = n_actions
        self.terminal = terminal
        self.rho0 = init
        self._check_reachable()

    def _check_reachable(self) -> None:
        adjacency = self.P.sum(axis=1) > 0
        reach = {self.terminal}
        changed = True
        while changed:
            changed = False
            for s in range(self.n_states):
                if s not in reach and any(adjacency[s, t] for t in reach):
                    reach.add(s)
                    changed = True
        if len(reach) != self.n_states:
            raise ConfigurationError("terminal state is not reachable from every state.", "mdp")

    @property
    def n_transient(self) -> int:
        return self.n_states - 1

    def transition(self, states, actions, noises):
        s = states[:, 0].astype(int)
        a = actions[:, 0].astype(int)
        cum = np.cumsum(self.P[s, a], axis=1)
        nxt = np.minimum((cum <= noises[:, :1]).sum(axis=1), self.n_states - 1)
        return nxt[:, None].astype(float)

    def reward(self, states, actions):
        s = np.asarray(states, dtype=float)[..., 0].astype(int)
        a = np.asarray(actions, dtype=float)[..., 0].astype(int)
        return self.R[s, a]

    def is_terminal(self, states):
        return np.asarray(states, dtype=float)[..., 0].astype(int) == self.terminal

    def grad_a_reward(self, states, actions):
        return np.zeros_like(np.asarray(actions, dtype=float))


class SoftmaxTabularPolicy:
    """pi(s, a) proportional to exp(theta[s, a]) on transient states.

    The absorbing state always takes action 0, with zero score.
    """
    d_a = 1
    draw_dim = 1
    draw_kind = "uniform"

    def __init__(self, logits: np.ndarray) -> None:
        self.logits = np.asarray(logits, dtype=float)

    @property
    def n_transient(self) -> int:
        return self.logits.shape[0]

    @property
    def size(self) -> int:
        return self.logits.size

    def flatten(self) -> np.ndarray:
        return self.logits.ravel().copy()

    def with_flat(self, flat: np.ndarray) -> "SoftmaxTabularPolicy":
        return SoftmaxTabularPolicy(np.asarray(flat, dtype=float).reshape(self.logits.shape))

    def probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def act(self, states: np.ndarray, draws: np.ndarray) -> np.ndarray:
        s = states[:, 0].astype(int)
        transient = s < self.n_transient
        actions = np.zeros(len(s))
        if transient.any():
            cum = np.cumsum(self.probs()[s[transient]], axis=1)
            chosen = (cum <= draws[transient, :1]).sum(axis=1)
            actions[transient] = np.minimum(chosen, self.logits.shape[1] - 1)
        return actions[:, None]

    def grad_log_prob(self, s: np.ndarray, a: np.ndarray,
                      weights: Optional[np.ndarray] = None, per_sample: bool = False) -> np.ndarray:
        """Score e_a - pi(s, .) in row s of the logits, weighted and summed."""
        s = np.asarray(s, dtype=float).reshape(-1, 1)[:, 0].astype(int)
        a = np.asarray(a, dtype=float).reshape(-1, 1)[:, 0].astype(int)
        n = len(s)
        w = np.ones(n) if weights is None or per_sample else np.asarray(weights, float).reshape(n)
        transient = s < self.n_transient
        probs = self.probs()
        scores = np.zeros((n,) + self.logits.shape)
        rows = np.nonzero(transient)[0]
        scores[rows, s[rows]] = -probs[s[rows]]
        scores[rows, s[rows], a[rows]] += 1.0
        scores = scores.reshape(n, -1)
        if per_sample:
            return scores
        return w @ scores


def _policy_matrices(mdp: TabularMdp, policy: SoftmaxTabularPolicy):
    if policy.n_transient != mdp.n_transient or policy.logits.shape[1] != mdp.n_actions:
        raise ConfigurationError("policy logits do not match the MDP.", "policy")
    pi = policy.probs()
    t = mdp.n_transient
    Q = np.einsum("sa,sab->sb", pi, mdp.P[:t, :, :t])
    r = np.sum(pi * mdp.R[:t], axis=1)
    return Q, r


def _solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        x = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("absorbing system is singular; terminal unreachable.") from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("absorbing system has no finite solution.")
    return x


def exact_expected_return(mdp: TabularMdp, policy: SoftmaxTabularPolicy) -> float:
    """rho_0 . V where V = r_pi + P_pi V on transient states."""
    Q, r = _policy_matrices(mdp, policy)
    V = _solve(np.eye(len(Q)) - Q, r)
    return float(mdp.rho0[:mdp.n_transient] @ V)


def exact_discounted_return(mdp: TabularMdp, policy: SoftmaxTabularPolicy, gamma: float) -> float:
    """rho_0 . V_gamma where V_gamma = r_pi + gamma P_pi V_gamma."""
    Q, r = _policy_matrices(mdp, policy)
    V = _solve(np.eye(len(Q)) - gamma * Q, r)
    return float(mdp.rho0[:mdp.n_transient] @ V)


def exact_policy_gradient(mdp: TabularMdp, policy: SoftmaxTabularPolicy,
                          eps: float = EPS_EXACT) -> np.ndarray:
    return finite_difference_grad(
        lambda theta: exact_expected_return(mdp, policy.with_flat(theta)), policy.flatten(), eps)


def exact_expected_hitting_time(mdp: TabularMdp, policy: SoftmaxTabularPolicy) -> float:
    """E[N] + 1, with T = 1 + P_pi T giving the expected steps to absorption."""
    Q, _ = _policy_matrices(mdp, policy)
    T = _solve(np.eye(len(Q)) - Q, np.ones(len(Q)))
    return float(mdp.rho0[:mdp.n_transient] @ T) + 1.0


def geometric_chain(q: float, reward: float = -1.0) -> TabularMdp:
    """One transient state left with probability q per step, paying `reward` per step."""
    P = np.array([[[1.0 - q, q]], [[0.0, 1.0]]])
    R = np.array([[reward], [0.0]])
    return TabularMdp(P, R, [1.0])


# -------------------------
# Non-terminating reward stream
# -------------------------

class RewardStream(Environment):
    """Gaussian random walk that never stops, paying base + amplitude * cos(s)."""
    name = "reward_stream"

    def __init__(self, base: float = 1.0, amplitude: float = 0.0, scale: float = 0.3,
                 start: float = 0.0, max_steps: Optional[int] = None) -> None:
        super().__init__(1, 1, 1, FixedPoint((start,)), max_steps)
        self.base = base
        self.amplitude = amplitude
        self.scale = scale

    def transition(self, states, actions, noises):
        return states + self.scale * noises

    def _reward_of(self, positions: np.ndarray) -> np.ndarray:
        return self.base + self.amplitude * np.cos(positions)

    def reward(self, states, actions):
        return self._reward_of(np.asarray(states, dtype=float)[..., 0])

    def is_terminal(self, states):
        return np.zeros(np.asarray(states).shape[:-1], dtype=bool)

    def grad_a_reward(self, states, actions):
        return np.zeros_like(np.asarray(actions, dtype=float))


def reward_paths(env: Environment, policy: RolloutPolicy, k: int, length: int,
                 rng: np.random.Generator) -> np.ndarray:
    """
    Rewards r_0..r_{length-1} of k independent rollouts, zero after stopping.

    Reward streams and tabular chains are simulated as whole arrays; other
    environments go through `sample_batch`.
    """
    if isinstance(env, RewardStream):
        start = env.initial.sample(rng)[0]
        steps = env.scale * rng.standard_normal((k, length - 1))
        positions = start + np.concatenate([np.zeros((k, 1)), np.cumsum(steps, axis=1)], axis=1)
        return env._reward_of(positions)

    if isinstance(env, TabularMdp) and isinstance(policy, SoftmaxTabularPolicy):
        out = np.zeros((k, length))
        s = rng.choice(env.n_states, size=k, p=env.rho0)
        pi = policy.probs()
        for n in range(length):
            alive = s != env.terminal
            if not alive.any():
                break
            a = np.zeros(k, dtype=int)
            cum_pi = np.cumsum(pi[s[alive]], axis=1)
            a[alive] = np.minimum((cum_pi <= rng.random((alive.sum(), 1))).sum(axis=1),
                                  env.n_actions - 1)
            out[alive, n] = env.R[s[alive], a[alive]]
            cum_p = np.cumsum(env.P[s[alive], a[alive]], axis=1)
            s[alive] = np.minimum((cum_p <= rng.random((alive.sum(), 1))).sum(axis=1),
                                  env.n_states - 1)
        return out

    seed = int(rng.integers(2**31))
    batch = sample_batch(env, policy, trajectory_streams(seed, 0, k), max_steps=length - 1)
    out = np.zeros((k, length))
    for i, traj in enumerate(batch):
        out[i, :traj.length] = traj.rewards
    return out


@dataclass(frozen=True)
class GeometricHorizonResult:
    geom_estimate: float
    discounted_estimate: float
    combined_se: float
    geom_se: float
    discounted_se: float

    @property
    def z_score(self) -> float:
        if self.combined_se == 0.0:
            return 0.0 if self.geom_estimate == self.discounted_estimate else math.inf
        return abs(self.geom_estimate - self.discounted_estimate) / self.combined_se


def geometric_horizon_check(env: Environment, policy: RolloutPolicy, gamma: float, K: int,
                            rng: np.random.Generator, chunk: int = 2000) -> GeometricHorizonResult:
    """
    Compare the undiscounted return cut at N_gamma ~ Geom(1 - gamma) with the
    discounted return sum gamma^n r_n, cut where gamma^n < 1e-12.
    """
    if not 0.0 < gamma < 1.0:
        raise ConfigurationError("gamma must lie in (0, 1).", "gamma")
    horizon = int(math.ceil(math.log(DISCOUNT_CUTOFF) / math.log(gamma)))
    discounts = gamma ** np.arange(horizon)
    geom, disc = [], []
    for start in range(0, K, chunk):
        k = min(chunk, K - start)
        cut = rng.geometric(1.0 - gamma, size=k) - 1
        paths = reward_paths(env, policy, k, int(cut.max()) + 1, rng)
        mask = np.arange(paths.shape[1])[None, :] <= cut[:, None]
        geom.append((paths * mask).sum(axis=1))
        disc.append(reward_paths(env, policy, k, horizon, rng) @ discounts)
    geom_v, disc_v = np.concatenate(geom), np.concatenate(disc)
    if K > 1:
        geom_se = math.sqrt(geom_v.var(ddof=1) / K)
        disc_se = math.sqrt(disc_v.var(ddof=1) / K)
    else:
        geom_se = disc_se = math.inf
    se = math.hypot(geom_se, disc_se)
    logger.debug("geometric horizon gamma=%s: geometric %.6g, discounted %.6g, se %.3g",
                 gamma, geom_v.mean(), disc_v.mean(), se)
    return GeometricHorizonResult(float(geom_v.mean()), float(disc_v.mean()), se, geom_se, disc_se)


# -------------------------
# Monte Carlo statistics
# -------------------------

@dataclass(frozen=True)
class ChunkedMean:
    """Mean of per-chunk estimates with its standard error."""
    mean: np.ndarray
    se: np.ndarray

    def z_scores(self, target: np.ndarray, extra_se: Optional[np.ndarray] = None) -> np.ndarray:
        se = self.se if extra_se is None else np.sqrt(self.se ** 2 + np.asarray(extra_se) ** 2)
        diff = np.abs(self.mean - np.asarray(target, dtype=float))
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, diff / se, np.where(diff == 0, 0.0, np.inf))
        return z


def _chunk_sizes(k: int, chunk: int) -> List[int]:
    if k < 2 * chunk:
        raise ConfigurationError("standard errors need at least two chunks.", "k")
    sizes = [chunk] * (k // chunk)
    if k % chunk:
        sizes[-1] += k % chunk
    return sizes


def _summarize(values: List[np.ndarray]) -> ChunkedMean:
    stacked = np.asarray(values, dtype=float)
    return ChunkedMean(stacked.mean(axis=0), stacked.std(axis=0, ddof=1) / np.sqrt(len(stacked)))


def monte_carlo_gradient(estimate: Callable[[List[Trajectory], np.random.Generator], np.ndarray],
                         env: Environment, policy: RolloutPolicy, k: int, seed: int,
                         chunk: int = 2000) -> ChunkedMean:
    """
    Run `estimate` on consecutive chunks of a k-trajectory sample.

    Chunk c uses the trajectory streams of iteration c, so results are
    reproducible and chunks are independent.
    """
    values = []
    for c, size in enumerate(_chunk_sizes(k, chunk)):
        batch = sample_batch(env, policy, trajectory_streams(seed, c, size))
        values.append(np.asarray(estimate(batch, iteration_rng(seed, c)), dtype=float))
    return _summarize(values)


def monte_carlo_return(env: Environment, policy: RolloutPolicy, k: int, seed: int,
                       chunk: int = 2000) -> ChunkedMean:
    return monte_carlo_gradient(
        lambda batch, _: np.array([np.mean([t.rewards.sum() for t in batch])]),
        env, policy, k, seed, chunk)


def crn_finite_difference_grad(env: Environment, policy, k: int, seed: int,
                               eps: float = 5e-2, chunk: int = 2000) -> ChunkedMean:
    """
    Central differences of the Monte Carlo return where both sides of every
    coordinate reuse the same trajectory streams (common random numbers).
    """
    if eps <= 0:
        raise ConfigurationError("eps must be positive.", "eps")
    theta = policy.flatten()
    values = []
    for c, size in enumerate(_chunk_sizes(k, chunk)):
        grad = np.empty_like(theta)
        for i in range(theta.size):
            step = np.zeros_like(theta)
            step[i] = eps
            sides = []
            for sign in (1.0, -1.0):
                batch = sample_batch(env, policy.with_flat(theta + sign * step),
                                     trajectory_streams(seed, c, size))
                sides.append(np.mean([t.rewards.sum() for t in batch]))
            grad[i] = (sides[0] - sides[1]) / (2.0 * eps)
        values.append(grad)
    return _summarize(values)


def branching_mdp() -> Tuple[TabularMdp, SoftmaxTabularPolicy]:
    """Two transient states, two actions, with a policy gradient well away from zero."""
    P = np.array([
        [[0.5, 0.3, 0.2], [0.1, 0.3, 0.6]],
        [[0.2, 0.4, 0.4], [0.3, 0.1, 0.6]],
        [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]],
    ])
    R = np.array([[-1.0, -2.0], [-0.5, -1.5], [0.0, 0.0]])
    mdp = TabularMdp(P, R, [0.7, 0.3])
    return mdp, SoftmaxTabularPolicy(np.array([[0.3, -0.2], [0.1, 0.4]]))
