"""Self-checks of the estimators against exact identities and ground truth.

Estimators are looked up on the `estimators` module at call time, so a
replaced (for instance negated) estimator is what gets checked.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .. import estimators, oracle
from ..env import DoubleWell, DoubleWellConfig, langevin_step, sample_batch
from ..models import ConfigurationError, GridSpec, Variant
from ..policy import GaussianPolicy, MlpParams, init_params, mlp_forward, vjp_policy
from ..utils import iteration_rng, trajectory_streams

logger = logging.getLogger(__name__)

VERIFY_K = 100_000
VERIFY_SEED = 20240
SE_LIMIT = 3.0


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    limit: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return math.isfinite(self.value) and self.value <= self.limit

    @property
    def margin(self) -> float:
        return self.limit - self.value

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28} value={self.value:.3e}  limit={self.limit:.3e}  "
                f"margin={self.margin:.3e}  ({self.seconds:.1f}s)")


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| over max |b|; zero when both vectors vanish."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    diff = float(np.max(np.abs(a - b))) if a.size else 0.0
    scale = float(np.max(np.abs(b))) if b.size else 0.0
    if scale == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return diff / scale


def affine_policy(weight: float, bias: float) -> MlpParams:
    """mu(s) = weight * s + bias on a one-dimensional state."""
    return MlpParams((1, 1), [np.array([[weight]])], [np.array([bias])])


def one_dim_double_well() -> DoubleWell:
    return DoubleWell(DoubleWellConfig(alphas=(1.0,)))


# -------------------------
# Analytic derivatives
# -------------------------

def check_grad_log_prob(n_pairs: int = 100, seed: int = VERIFY_SEED) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        dims = [int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(1, 3))]
        policy = GaussianPolicy.init(dims, rng)
        policy = policy.with_flat(policy.flatten() + 0.3 * rng.standard_normal(policy.size))
        s = rng.standard_normal(dims[0])
        a = rng.standard_normal(dims[-1])
        fd = oracle.finite_difference_grad(
            lambda theta: policy.with_flat(theta).log_prob(s, a), policy.flatten(), oracle.EPS_EXACT)
        worst = max(worst, relative_error(policy.grad_log_prob(s, a), fd))
    return worst


def check_vjp_policy(n_pairs: int = 100, seed: int = VERIFY_SEED) -> float:
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for _ in range(n_pairs):
        dims = [int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(1, 3))]
        params = init_params(dims, rng)
        params = params.with_flat(params.flatten() + 0.3 * rng.standard_normal(params.size))
        s = rng.standard_normal(dims[0])
        v = rng.standard_normal(dims[-1])
        fd = oracle.finite_difference_grad(
            lambda theta: float(mlp_forward(params.with_flat(theta), s) @ v),
            params.flatten(), oracle.EPS_EXACT)
        worst = max(worst, relative_error(vjp_policy(params, s, v), fd))
    return worst


def check_noise_reconstruction(n: int = 10_000, seed: int = VERIFY_SEED) -> float:
    rng = np.random.default_rng(seed + 2)
    cfg = DoubleWellConfig(alphas=(1.0, 1.0))
    s = rng.standard_normal((n, cfg.dim))
    a = rng.standard_normal((n, cfg.dim))
    xi = rng.standard_normal((n, cfg.dim))
    s_next = langevin_step(s, a, xi, cfg)
    score = estimators.grad_a_log_p(s, s_next, a, cfg)
    return float(np.max(np.abs(score - estimators.noise_score(xi, cfg))))


# -------------------------
# Exact identities
# -------------------------

def _tabular_batch(seed: int, k: int):
    mdp, policy = oracle.branching_mdp()
    return mdp, policy, sample_batch(mdp, policy, trajectory_streams(seed, 0, k))


def _well_batch(seed: int, k: int):
    env = one_dim_double_well()
    policy = affine_policy(0.2, 0.5)
    return env, policy, sample_batch(env, policy, trajectory_streams(seed, 0, k))


def check_scaling_identity(seed: int = VERIFY_SEED) -> float:
    _, policy, batch = _tabular_batch(seed, 500)
    z = estimators.estimate_z(batch)
    buffer = estimators.build_buffer(batch)
    unbiased = estimators.state_space_pg(buffer, policy, z, 0.5, False, np.random.default_rng(seed))
    biased = estimators.state_space_pg(buffer, policy, z, 0.5, True, np.random.default_rng(seed))
    worst = relative_error(unbiased.grad, z * biased.grad)

    env, mu, batch = _well_batch(seed, 50)
    z = estimators.estimate_z(batch)
    buffer = estimators.build_buffer(batch, deterministic=True)
    unbiased = estimators.state_space_dpg(buffer, mu, env, z, 0.5, False, np.random.default_rng(seed))
    biased = estimators.state_space_dpg(buffer, mu, env, z, 0.5, True, np.random.default_rng(seed))
    return max(worst, relative_error(unbiased.grad, z * biased.grad))


def check_collapse_pg(n_batches: int = 20, seed: int = VERIFY_SEED) -> float:
    worst = 0.0
    for b in range(n_batches):
        _, policy, batch = _tabular_batch(seed + b, 50)
        traj = estimators.trajectory_pg(batch, policy, Variant.REWARD_TO_GO)
        state = estimators.state_space_pg(estimators.build_buffer(batch), policy,
                                          estimators.estimate_z(batch), 1.0, False,
                                          iteration_rng(seed, b))
        worst = max(worst, relative_error(state.grad, traj.grad))
    return worst


def check_collapse_dpg(n_batches: int = 20, seed: int = VERIFY_SEED) -> float:
    worst = 0.0
    for b in range(n_batches):
        env, mu, batch = _well_batch(seed + b, 20)
        traj = estimators.trajectory_dpg(batch, mu, env, Variant.REWARD_TO_GO_NEXT)
        state = estimators.state_space_dpg(estimators.build_buffer(batch, deterministic=True), mu, env,
                                           estimators.estimate_z(batch), 1.0, False,
                                           iteration_rng(seed, b))
        worst = max(worst, relative_error(state.grad, traj.grad))
    return worst


# -------------------------
# Monte Carlo against ground truth
# -------------------------

def _trajectory_pg_grad(policy):
    return lambda batch, rng: estimators.trajectory_pg(batch, policy, Variant.REWARD_TO_GO).grad


def _state_space_pg_grad(policy, m_fraction: float):
    def estimate(batch, rng):
        buffer = estimators.build_buffer(batch)
        return estimators.state_space_pg(buffer, policy, estimators.estimate_z(batch),
                                         m_fraction, False, rng).grad
    return estimate


def _trajectory_dpg_grad(policy, env):
    return lambda batch, rng: estimators.trajectory_dpg(batch, policy, env).grad


def _state_space_dpg_grad(policy, env, m_fraction: float):
    def estimate(batch, rng):
        buffer = estimators.build_buffer(batch, deterministic=True)
        return estimators.state_space_dpg(buffer, policy, env, estimators.estimate_z(batch),
                                          m_fraction, False, rng).grad
    return estimate


def check_tabular_gradient(estimate_factory, k: int = VERIFY_K, seed: int = VERIFY_SEED) -> float:
    mdp, policy = oracle.branching_mdp()
    exact = oracle.exact_policy_gradient(mdp, policy)
    mc = oracle.monte_carlo_gradient(estimate_factory(policy), mdp, policy, k, seed)
    return float(np.max(mc.z_scores(exact)))


def check_dpg_gradient(estimate_factory, k: int = VERIFY_K, seed: int = VERIFY_SEED) -> float:
    env = one_dim_double_well()
    policy = affine_policy(0.2, 0.5)
    fd = oracle.crn_finite_difference_grad(env, policy, k, seed + 1)
    mc = oracle.monte_carlo_gradient(estimate_factory(policy, env), env, policy, k, seed)
    return float(np.max(mc.z_scores(fd.mean, fd.se)))


def check_exact_return(k: int = VERIFY_K, seed: int = VERIFY_SEED) -> float:
    mdp, policy = oracle.branching_mdp()
    mc = oracle.monte_carlo_return(mdp, policy, k, seed)
    return float(np.max(mc.z_scores([oracle.exact_expected_return(mdp, policy)])))


def check_hitting_time(k: int = VERIFY_K, seed: int = VERIFY_SEED) -> float:
    """estimate_z on a chain leaving with probability 1/2 per step, against E[N + 1] = 3."""
    chain = oracle.geometric_chain(0.5)
    policy = oracle.SoftmaxTabularPolicy(np.zeros((1, 1)))
    mc = oracle.monte_carlo_gradient(lambda batch, _: np.array([estimators.estimate_z(batch)]),
                                     chain, policy, k, seed)
    return float(np.max(mc.z_scores([oracle.exact_expected_hitting_time(chain, policy)])))


def check_occupancy_total(seed: int = VERIFY_SEED) -> float:
    env, mu, batch = _well_batch(seed, 200)
    grid = GridSpec(coords=(0, 0), lower=(-2.0, -2.0), upper=(2.0, 2.0), bins=(20, 20))
    hist = estimators.occupancy_histogram(batch, grid)
    return float(abs(hist.total - sum(t.hitting_step + 1 for t in batch)))


def check_geometric_horizon(gamma: float, k: int = VERIFY_K, seed: int = VERIFY_SEED) -> float:
    stream = oracle.RewardStream(base=1.0, amplitude=0.5)
    result = oracle.geometric_horizon_check(stream, affine_policy(0.0, 0.0), gamma, k,
                                            np.random.default_rng([seed, int(gamma * 1000)]))
    return result.z_score


def check_geometric_horizon_closed_form(k: int = VERIFY_K, seed: int = VERIFY_SEED) -> float:
    """Constant reward 1 cut at a Geom(1/2) horizon has expected return 2."""
    stream = oracle.RewardStream(base=1.0, amplitude=0.0)
    result = oracle.geometric_horizon_check(stream, affine_policy(0.0, 0.0), 0.5, k,
                                            np.random.default_rng([seed, 7]))
    mc = oracle.ChunkedMean(np.array([result.geom_estimate]), np.array([result.geom_se]))
    return float(mc.z_scores([2.0])[0])


def check_geometric_horizon_chain(k: int = VERIFY_K, seed: int = VERIFY_SEED) -> float:
    """Both arms on a chain paying -1 per step against the linear-algebra value at gamma = 0.9."""
    chain = oracle.geometric_chain(0.5)
    policy = oracle.SoftmaxTabularPolicy(np.zeros((1, 1)))
    exact = oracle.exact_discounted_return(chain, policy, 0.9)
    result = oracle.geometric_horizon_check(chain, policy, 0.9, k, np.random.default_rng([seed, 9]))
    mc = oracle.ChunkedMean(np.array([result.geom_estimate, result.discounted_estimate]),
                            np.array([result.geom_se, result.discounted_se]))
    return float(np.max(mc.z_scores([exact, exact])))


# -------------------------
# Suite
# -------------------------

def _checks(k: int, seed: int) -> List[tuple]:
    return [
        ("grad_log_prob_fd", lambda: check_grad_log_prob(seed=seed), 1e-4),
        ("vjp_policy_fd", lambda: check_vjp_policy(seed=seed), 1e-4),
        ("noise_reconstruction", lambda: check_noise_reconstruction(seed=seed), 1e-12),
        ("scaling_identity", lambda: check_scaling_identity(seed), 1e-12),
        ("collapse_pg", lambda: check_collapse_pg(seed=seed), 1e-10),
        ("collapse_dpg", lambda: check_collapse_dpg(seed=seed), 1e-10),
        ("occupancy_total", lambda: check_occupancy_total(seed), 0.0),
        ("hitting_time_z", lambda: check_hitting_time(k, seed), SE_LIMIT),
        ("exact_return", lambda: check_exact_return(k, seed), 4.0),
        ("oracle_trajectory_pg", lambda: check_tabular_gradient(_trajectory_pg_grad, k, seed), SE_LIMIT),
        ("oracle_state_space_pg",
         lambda: check_tabular_gradient(lambda p: _state_space_pg_grad(p, 0.5), k, seed), SE_LIMIT),
        ("oracle_trajectory_dpg", lambda: check_dpg_gradient(_trajectory_dpg_grad, k, seed), SE_LIMIT),
        ("oracle_state_space_dpg",
         lambda: check_dpg_gradient(lambda p, e: _state_space_dpg_grad(p, e, 0.5), k, seed), SE_LIMIT),
        ("geometric_horizon_gamma_0.5", lambda: check_geometric_horizon(0.5, k, seed), SE_LIMIT),
        ("geometric_horizon_gamma_0.9", lambda: check_geometric_horizon(0.9, k, seed), SE_LIMIT),
        ("geometric_horizon_gamma_0.99", lambda: check_geometric_horizon(0.99, k, seed), SE_LIMIT),
        ("geometric_horizon_closed_form", lambda: check_geometric_horizon_closed_form(k, seed), SE_LIMIT),
        ("geometric_horizon_chain_gamma_0.9", lambda: check_geometric_horizon_chain(k, seed), SE_LIMIT),
    ]


def _run(name: str, fn: Callable[[], float], limit: float) -> CheckResult:
    started = time.perf_counter()
    try:
        value = float(fn())
    except Exception:
        logger.exception("check %s raised", name)
        value = math.inf
    return CheckResult(name, value, limit, time.perf_counter() - started)


def _verify(k: int = VERIFY_K, seed: int = VERIFY_SEED,
            only: Optional[List[str]] = None) -> List[CheckResult]:
    """
    Run every check (or those named in `only`) and return the results in order.
    A check that raises is reported as failed with an infinite value.
    """
    checks = _checks(k, seed)
    unknown = sorted(set(only or ()) - {name for name, _, _ in checks})
    if unknown:
        raise ConfigurationError(f"unknown checks: {', '.join(unknown)}.", "only")
    results = []
    for name, fn, limit in checks:
        if only and name not in only:
            continue
        result = _run(name, fn, limit)
        logger.info("%s", result)
        results.append(result)
    return results
