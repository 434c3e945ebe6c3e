"""
CavityLab Configuration

Experiment configuration: one pydantic model per parameter set, composed
into ExperimentConfig. Configs are read from JSON or YAML, adjusted with
``key.path=value`` overrides, and validated strictly (unknown keys are
errors). Every run writes the fully resolved config next to its outputs.
"""

import json
from pathlib import Path
from typing import Any, Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator

from cavitylab.core.exceptions import ConfigError
from cavitylab.core.loss_msssim import SimilarityVariant, SsimParams
from cavitylab.core.loss_tdist import DEFAULT_FOCAL_GAMMA, LossKind, TDistMode, TDistParams
from cavitylab.core.optim import FitConfig
from cavitylab.core.phantom import CorruptionSpec, PhantomSpec, derive_seed

RESOLVED_CONFIG_FILE = "config.resolved.json"

# Experiment step size for the delta logits and predictor weights.
EXPERIMENT_LR_MAIN = 0.05


class TDistSettings(BaseModel):
    """Initial Student-t parameters and mode for the TD loss."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: TDistMode = Field(default=TDistMode.PER_VOXEL)
    r_init: float = Field(default=1.0, gt=0, description="Initial degrees of freedom")
    sigma2_init: float = Field(default=1.0, gt=0, description="Initial scale")
    shared_scale: bool = Field(
        default=True, description="One sigma^2 for all voxels instead of a per-voxel field"
    )

    def initial_params(self, dims: tuple[int, int, int]) -> TDistParams:
        sigma2 = self.sigma2_init if self.shared_scale else np.full(dims, self.sigma2_init)
        return TDistParams.from_values(self.r_init, sigma2, mode=self.mode)


class AblationSettings(BaseModel):
    """Which losses and similarity variants the ablation compares."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    losses: tuple[LossKind, ...] = Field(default=tuple(LossKind))
    variants: tuple[SimilarityVariant, ...] = Field(default=tuple(SimilarityVariant))
    focal_gamma: float = Field(default=DEFAULT_FOCAL_GAMMA, ge=0)
    label_source: Literal["corrupted_gt", "self_supervised"] = Field(
        default="corrupted_gt",
        description="Weak labels from corrupted ground truth or from the delta fit's mask",
    )
    alpha: float = Field(default=0.05, gt=0, lt=1, description="Wilcoxon significance level")

    @field_validator("losses", "variants")
    @classmethod
    def must_be_non_empty(cls, v: tuple, info: ValidationInfo) -> tuple:
        if len(v) == 0:
            raise ValueError(f"{info.field_name} must not be empty")
        return v


class ExperimentConfig(BaseModel):
    """Everything a command needs; serializes to the resolved config."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = Field(default=0, ge=0, description="Global seed; per-case seeds are split from it")
    cases: int = Field(default=10, ge=1, description="Number of phantom cases")
    out_dir: str = Field(default="runs/latest")
    phantom: PhantomSpec = Field(default_factory=PhantomSpec)
    corruption: CorruptionSpec = Field(default_factory=CorruptionSpec)
    ssim: SsimParams = Field(default_factory=SsimParams)
    tdist: TDistSettings = Field(default_factory=TDistSettings)
    fit: FitConfig = Field(default_factory=lambda: FitConfig(lr_main=EXPERIMENT_LR_MAIN))
    weak_fit: FitConfig = Field(default_factory=lambda: FitConfig(lr_main=EXPERIMENT_LR_MAIN))
    ablation: AblationSettings = Field(default_factory=AblationSettings)

    def case_seed(self, index: int) -> int:
        return derive_seed(self.seed, index)

    def phantom_spec(self, index: int) -> PhantomSpec:
        """Phantom parameters of case ``index`` (the seed is replaced)."""
        return self.phantom.model_copy(update={"seed": self.case_seed(index)})

    def corruption_spec(self, index: int) -> CorruptionSpec:
        return self.corruption.model_copy(update={"seed": self.case_seed(index)})

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2)

    def save_resolved(self, out_dir: str | Path | None = None) -> Path:
        """Write config.resolved.json (defaults included) and return its path."""
        directory = Path(out_dir or self.out_dir)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / RESOLVED_CONFIG_FILE
        path.write_text(self.to_json())
        return path


def _read_mapping(path: Path) -> dict[str, Any]:
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e

    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON in {path}: {e}") from e
    else:
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid YAML in {path}: {e}") from e

    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object, got {type(data).__name__}")
    return data


def apply_override(data: dict[str, Any], assignment: str) -> None:
    """Apply one ``a.b.c=value`` override in place; the value is parsed as a YAML scalar."""
    key, sep, raw = assignment.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} must look like key.path=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"{key}: cannot parse value {raw!r}: {e}") from e

    parts = key.split(".")
    node = data
    for depth, part in enumerate(parts[:-1]):
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"{'.'.join(parts[: depth + 1])}: is not a section")
        node = child
    node[parts[-1]] = value


def _describe(error: ValidationError) -> str:
    messages = []
    for item in error.errors():
        path = ".".join(str(p) for p in item["loc"]) or "<root>"
        if item["type"] == "extra_forbidden":
            messages.append(f"{path}: unknown key")
        else:
            messages.append(f"{path}: {item['msg']}")
    return "; ".join(messages)


def parse_config(
    path: str | Path | None = None, overrides: list[str] | None = None
) -> ExperimentConfig:
    """
    Load, override and validate an experiment config.

    Args:
        path: JSON (``.json``) or YAML file; None starts from all defaults
        overrides: ``key.path=value`` assignments applied after loading

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigError: Malformed file, bad override, unknown key or type mismatch;
            the message names the offending key path
    """
    data = _read_mapping(Path(path)) if path is not None else {}
    for assignment in overrides or []:
        apply_override(data, assignment)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from e
