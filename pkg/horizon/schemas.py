from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from typing_extensions import Annotated

from randomhorizons import settings

from .models import BaselineKind, ConfigurationError, EstimatorKind, Variant

ENV_TAGS = ("mountain_car", "double_well")


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class InitialConfig(StrictModel):
    kind: Literal["fixed", "uniform"] = Field(..., description="Fixed point or uniform box")
    point: Optional[List[float]] = None
    lower: Optional[List[float]] = None
    upper: Optional[List[float]] = None

    @model_validator(mode="after")
    def _check_fields(self) -> "InitialConfig":
        if self.kind == "fixed" and self.point is None:
            raise ValueError("a fixed initial state needs 'point'.")
        if self.kind == "uniform" and (self.lower is None or self.upper is None):
            raise ValueError("a uniform initial box needs 'lower' and 'upper'.")
        return self


class EnvBase(StrictModel):
    max_steps: Optional[int] = Field(
        None, ge=1, description="Rollout cap; defaults to HORIZON_MAX_STEPS")
    initial: Optional[InitialConfig] = None


class MountainCarEnv(EnvBase):
    kind: Literal["mountain_car"]
    position_bounds: Tuple[float, float] = (-1.2, 0.6)
    velocity_bounds: Tuple[float, float] = (-0.07, 0.07)
    goal_position: float = 0.45
    action_cost: float = Field(0.1, ge=0.0)


class DoubleWellEnv(EnvBase):
    kind: Literal["double_well"]
    alphas: List[float] = Field(
        default_factory=lambda: [1.0, 1.0], min_length=1,
        description="Metastability per coordinate")
    sigma: float = Field(2.0 ** 0.5, gt=0.0)
    dt: float = Field(1e-2, gt=0.0)
    target_level: float = Field(0.25, gt=0.0)

    @model_validator(mode="after")
    def _check_alphas(self) -> "DoubleWellEnv":
        if any(a <= 0 for a in self.alphas):
            raise ValueError("every alpha must be positive.")
        return self


EnvConfig = Annotated[Union[MountainCarEnv, DoubleWellEnv], Field(discriminator="kind")]


class PolicyConfig(StrictModel):
    kind: Literal["gaussian", "deterministic"]
    layers: List[Annotated[int, Field(ge=1)]] = Field(
        ..., description="Hidden widths; input and output widths come from the environment")
    checkpoint_format: Literal["json", "binary"] = "json"


class EstimatorConfig(StrictModel):
    kind: EstimatorKind
    variant: Optional[Variant] = None
    baseline: BaselineKind = BaselineKind.NONE
    m_fraction: float = Field(1.0, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_baseline(self) -> "EstimatorConfig":
        if self.baseline != BaselineKind.NONE and self.kind != EstimatorKind.TRAJECTORY_PG:
            raise ValueError(f"baseline applies only to trajectory_pg, not {self.kind.value}.")
        return self

    @property
    def resolved_variant(self) -> Variant:
        if self.variant is not None:
            return self.variant
        return Variant.REWARD_TO_GO_NEXT if self.kind.deterministic else Variant.REWARD_TO_GO


class TrainConfig(StrictModel):
    k: int = Field(..., ge=1, description="Trajectories per iteration")
    iterations: int = Field(..., ge=1)
    lr: float = Field(..., gt=0.0)
    seed: int = Field(..., ge=0)
    checkpoint_every: int = Field(default_factory=lambda: settings.CHECKPOINT_EVERY, ge=1)
    log_every: int = Field(default_factory=lambda: settings.LOG_EVERY, ge=1)


class OutputConfig(StrictModel):
    dir: str
    record_wall_time: bool = Field(
        True, description="False writes 0 in wall_time_s so reruns are byte-identical")


class ExperimentConfig(StrictModel):
    env: EnvConfig
    policy: PolicyConfig
    estimator: EstimatorConfig
    train: TrainConfig
    output: OutputConfig

    @model_validator(mode="after")
    def _check_combination(self) -> "ExperimentConfig":
        kind = self.estimator.kind
        if kind.deterministic and self.policy.kind != "deterministic":
            raise ValueError(f"{kind.value} needs policy.kind 'deterministic'.")
        if not kind.deterministic and self.policy.kind != "gaussian":
            raise ValueError(f"{kind.value} needs policy.kind 'gaussian'.")
        if kind.deterministic and self.env.kind != "double_well":
            raise ValueError("model-based deterministic estimators need env.kind 'double_well'.")
        variant = self.estimator.resolved_variant
        allowed = ((Variant.FULL_RETURN, Variant.REWARD_TO_GO_NEXT) if kind.deterministic
                   else (Variant.FULL_RETURN, Variant.REWARD_TO_GO))
        if variant not in allowed:
            raise ValueError(f"estimator.variant {variant.value} does not apply to {kind.value}.")
        return self

    @classmethod
    def from_yaml(cls, path: Path) -> "ExperimentConfig":
        try:
            document = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from exc
        return cls.from_document(document or {})

    @classmethod
    def from_document(cls, document: Dict[str, Any]) -> "ExperimentConfig":
        try:
            return cls.model_validate(document)
        except ValidationError as exc:
            error = exc.errors()[0]
            key = _error_key(error["loc"])
            raise ConfigurationError(f"{key}: {error['msg']}", key) from exc

    def to_document(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def _error_key(loc: Tuple[Any, ...]) -> str:
    """Dotted config key of a pydantic error, without union tags."""
    parts = [str(p) for p in loc if str(p) not in ENV_TAGS]
    return ".".join(parts) if parts else "<root>"


class RunManifest(BaseModel):
    version: str
    seed: int
    config: Dict[str, Any]
    iterations_completed: int
    failed: Optional[str] = None
