from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, List, Optional, Tuple

import numpy as np


# -------------------------
# Errors
# -------------------------

class HorizonError(ValueError):
    """Base class for every error raised by the horizon package."""


class InvalidStateError(HorizonError):
    pass


class DivergenceError(HorizonError):
    """Raised when dynamics, gradients or parameters stop being finite."""


class ConfigurationError(HorizonError):
    def __init__(self, message: str, key: Optional[str] = None) -> None:
        super().__init__(message)
        self.key = key


class EmptyBatchError(HorizonError):
    pass


class MissingNoiseError(HorizonError):
    pass


class SingularSystemError(HorizonError):
    pass


class MalformedCsvError(HorizonError):
    def __init__(self, message: str, line_no: Optional[int] = None) -> None:
        super().__init__(f"Row {line_no}: {message}" if line_no is not None else message)
        self.line_no = line_no


# -------------------------
# Estimator options
# -------------------------

class Variant(str, Enum):
    FULL_RETURN = "full_return"
    REWARD_TO_GO = "reward_to_go"
    REWARD_TO_GO_NEXT = "reward_to_go_next"


class BaselineKind(str, Enum):
    NONE = "none"
    BATCH_MEAN_RETURN = "batch_mean_return"


class EstimatorKind(str, Enum):
    TRAJECTORY_PG = "trajectory_pg"
    STATE_SPACE_PG = "state_space_pg"
    STATE_SPACE_PG_BIASED = "state_space_pg_biased"
    TRAJECTORY_DPG = "trajectory_dpg"
    STATE_SPACE_DPG = "state_space_dpg"
    STATE_SPACE_DPG_BIASED = "state_space_dpg_biased"

    @property
    def deterministic(self) -> bool:
        return "dpg" in self.value

    @property
    def biased(self) -> bool:
        return self.value.endswith("_biased")

    @property
    def state_space(self) -> bool:
        return self.value.startswith("state_space")


# -------------------------
# Records
# -------------------------

@dataclass(frozen=True)
class Trajectory:
    """One rollout S_0, A_0, ..., S_N.

    `noises[n]` is the draw that produced `states[n + 1]`; it has zero columns
    for environments with deterministic dynamics.
    """
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    noises: np.ndarray
    hitting_step: int
    censored: bool

    def __post_init__(self) -> None:
        n = self.hitting_step
        if n < 0:
            raise InvalidStateError("hitting_step must be nonnegative.")
        if not (len(self.states) == len(self.actions) == len(self.rewards) == n + 1):
            raise InvalidStateError(
                f"Trajectory arrays must hold N+1={n + 1} entries, got "
                f"{len(self.states)}/{len(self.actions)}/{len(self.rewards)}.")
        if len(self.noises) != n:
            raise InvalidStateError(
                f"Trajectory must hold N={n} noise records, got {len(self.noises)}.")

    @property
    def length(self) -> int:
        """Number of visited states, N + 1."""
        return self.hitting_step + 1

    def __str__(self) -> str:
        flag = " censored" if self.censored else ""
        return f"Trajectory(N={self.hitting_step}{flag}, return={self.rewards.sum():.4g})"


@dataclass(frozen=True)
class ReturnProfile:
    returns_to_go: np.ndarray

    @property
    def total(self) -> float:
        return float(self.returns_to_go[0])


@dataclass
class ExperienceBuffer:
    """Flattened experiences of one batch, an empirical sample of rho.

    Stochastic buffers hold (s, a, G_n). Deterministic buffers hold
    (s, s', xi, G_{n+1}) together with the action taken in s.
    """
    deterministic: bool
    states: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    hitting_steps: np.ndarray
    initial_returns: np.ndarray
    censored: np.ndarray
    next_states: Optional[np.ndarray] = None
    noises: Optional[np.ndarray] = None

    @property
    def n_trajectories(self) -> int:
        return len(self.hitting_steps)

    @property
    def size(self) -> int:
        return len(self.returns)

    def __len__(self) -> int:
        return self.size


@dataclass(frozen=True)
class GradientEstimate:
    grad: np.ndarray
    z_hat: float
    mean_return: float
    mean_hitting_time: float
    censor_rate: float

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad))

    def __str__(self) -> str:
        return (f"GradientEstimate(|grad|={self.grad_norm:.4g}, z_hat={self.z_hat:.4g}, "
                f"mean_return={self.mean_return:.4g})")


@dataclass(frozen=True)
class GridSpec:
    """Rectangular grid over two state coordinates."""
    coords: Tuple[int, int]
    lower: Tuple[float, float]
    upper: Tuple[float, float]
    bins: Tuple[int, int]

    def edges(self) -> Tuple[np.ndarray, np.ndarray]:
        return (np.linspace(self.lower[0], self.upper[0], self.bins[0] + 1),
                np.linspace(self.lower[1], self.upper[1], self.bins[1] + 1))


@dataclass(frozen=True)
class OccupancyHistogram:
    grid: GridSpec
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        total = self.total
        if total == 0:
            return np.zeros_like(self.counts, dtype=float)
        return self.counts / total


@dataclass(frozen=True)
class RunMetricsRow:
    iter: int
    mean_return: float
    mean_hitting_time: float
    z_hat: float
    effective_lr: float
    grad_norm: float
    censor_rate: float
    wall_time_s: float


@dataclass
class RunMetrics:
    rows: List[RunMetricsRow] = field(default_factory=list)
    failed: Optional[str] = None
    policy: Optional[Any] = None

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class SweepCell:
    lr: float
    repeat: int
    seed: int
    status: str
    iterations: int
    final_neg_return: float
    final_hitting_time: float
    error: str = ""

    @property
    def failed(self) -> bool:
        return self.status != "ok"
