"""
CavityLab Optimization

Adam, the self-supervised fit of the inverted probability map, the
weak-label training loop for a per-voxel linear predictor, and mask
extraction.

Both fits are deterministic functions of their inputs and config. The delta
fit always starts at 0.5; the predictor starts at zeros unless
``init_scale`` asks for a normal draw seeded by ``FitConfig.seed``.
"""

import logging
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.special import expit

from cavitylab.core.exceptions import DimensionMismatchError, NormalizationError
from cavitylab.core.loss_msssim import SimilarityObjective, SsimParams
from cavitylab.core.loss_smooth import smooth_value_and_grad
from cavitylab.core.loss_tdist import (
    LossKind,
    Residual,
    TDistParams,
    baseline_value_and_grad,
    tdist_grad,
    tdist_nll,
)
from cavitylab.core.volume import BinaryMask, Volume, ensure_same_dims

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Tolerance on the [0, 1] range of fit inputs.
RANGE_TOLERANCE = 1e-6


class AdamState(BaseModel):
    """Moment accumulators for one parameter array."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    m: np.ndarray
    v: np.ndarray
    step: int = Field(default=0, ge=0)
    beta1: float = Field(default=ADAM_BETA1, ge=0, lt=1)
    beta2: float = Field(default=ADAM_BETA2, ge=0, lt=1)
    eps: float = Field(default=ADAM_EPS, gt=0)

    @field_validator("m", "v", mode="before")
    @classmethod
    def as_float_array(cls, v: object) -> np.ndarray:
        return np.asarray(v, dtype=np.float64)

    @classmethod
    def zeros_like(cls, params: np.ndarray | float) -> "AdamState":
        shape = np.shape(params)
        return cls(m=np.zeros(shape), v=np.zeros(shape))


def adam_step(
    params: np.ndarray | float, grads: np.ndarray | float, state: AdamState, lr: float
) -> tuple[np.ndarray, AdamState]:
    """
    One bias-corrected Adam update.

    Returns:
        Tuple of (updated params, updated state); inputs are not modified

    Raises:
        DimensionMismatchError: If params, grads and moments disagree in shape
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionMismatchError(
            f"adam shapes disagree: params {params.shape}, grads {grads.shape}, "
            f"state {state.m.shape}"
        )
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    updated = np.asarray(params - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    new_state = AdamState(
        m=m, v=v, step=step, beta1=state.beta1, beta2=state.beta2, eps=state.eps
    )
    return updated, new_state


class FitConfig(BaseModel):
    """Optimization settings shared by the self-supervised and weak-label fits."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lr_main: float = Field(default=1e-3, gt=0, description="Delta logits / predictor weights")
    lr_r: float = Field(default=1e-4, gt=0, description="Raw degrees of freedom")
    lr_sigma: float = Field(default=1e-4, gt=0, description="Raw scale(s)")
    lambda_smooth: float = Field(default=0.1, ge=0, description="Weight of the smoothness term")
    smooth_reduction: Literal["sum", "mean"] = Field(
        default="mean", description="Reduction of the smoothness term inside the fit"
    )
    max_iters: int = Field(default=500, ge=0)
    patience: int = Field(default=25, ge=1)
    min_delta: float = Field(default=1e-6, ge=0)
    threshold: float = Field(default=0.5, gt=0, lt=1)
    init_scale: float = Field(
        default=0.0, ge=0, description="Std of the seeded predictor initialization; 0 starts at zeros"
    )
    seed: int = Field(default=0, ge=0, description="Seeds the predictor initialization")


class _EarlyStopper:
    """Tracks the best objective value and counts non-improving iterations."""

    def __init__(self, patience: int, min_delta: float) -> None:
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_iteration = -1
        self.wait = 0

    def update(self, value: float, iteration: int) -> bool:
        """Record a value; True if it is the new best."""
        if value < self.best - self.min_delta:
            self.best = value
            self.best_iteration = iteration
            self.wait = 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


class DeltaFitResult(BaseModel):
    """Outcome of the self-supervised fit."""

    model_config = ConfigDict(frozen=True)

    delta: Volume
    loss_trace: list[float]
    achieved_M: int
    best_iteration: int = Field(..., description="-1 when no iteration ran")
    stopped_early: bool


def _check_unit_range(v: Volume, name: str) -> None:
    lo, hi = float(v.data.min()), float(v.data.max())
    if lo < -RANGE_TOLERANCE or hi > 1.0 + RANGE_TOLERANCE:
        raise NormalizationError(
            f"{name} must be normalized to [0, 1], got range [{lo:g}, {hi:g}]"
        )


def fit_delta(
    preop: Volume,
    postop: Volume,
    ssim: SsimParams | None = None,
    cfg: FitConfig | None = None,
) -> DeltaFitResult:
    """
    Recover the inverted probability map of a preop/postop pair.

    Minimizes ``similarity(preop * delta, postop) + lambda * smooth(delta)``
    over ``delta = logistic(z)`` with Adam on z, starting from z = 0.

    Args:
        preop: Normalized preoperative volume
        postop: Normalized postoperative volume
        ssim: Similarity loss constants
        cfg: Optimization settings

    Returns:
        DeltaFitResult holding the best iterate and the per-iteration objective

    Raises:
        DimensionMismatchError: If the volumes differ in dims
        NormalizationError: If either volume leaves [0, 1]
    """
    ensure_same_dims(preop, postop, "preop and postop")
    _check_unit_range(preop, "preop")
    _check_unit_range(postop, "postop")
    ssim = ssim or SsimParams()
    cfg = cfg or FitConfig()

    objective = SimilarityObjective(postop.data, ssim)
    rho = preop.data
    z = np.zeros(preop.dims)
    state = AdamState.zeros_like(z)
    stopper = _EarlyStopper(cfg.patience, cfg.min_delta)
    best_z = z
    trace: list[float] = []

    for iteration in range(cfg.max_iters):
        delta = expit(z)
        sim, d_x = objective.value_and_grad(rho * delta)
        smooth, d_smooth = smooth_value_and_grad(delta, cfg.smooth_reduction)
        value = sim + cfg.lambda_smooth * smooth
        trace.append(value)

        if stopper.update(value, iteration):
            best_z = z
        if stopper.should_stop:
            logger.info("fit_delta stopped early at iteration %d (best %.6g)", iteration, stopper.best)
            break

        d_delta = rho * d_x + cfg.lambda_smooth * d_smooth
        z, state = adam_step(z, d_delta * delta * (1.0 - delta), state, cfg.lr_main)

    return DeltaFitResult(
        delta=preop.with_data(expit(best_z)),
        loss_trace=trace,
        achieved_M=objective.achieved,
        best_iteration=stopper.best_iteration,
        stopped_early=len(trace) < cfg.max_iters,
    )


def predict_mask(delta: Volume, threshold: float = 0.5) -> BinaryMask:
    """
    Removed-region mask of an inverted probability map: ``(1 - delta) > threshold``.

    Raises:
        NormalizationError: If delta leaves [0, 1]
    """
    lo, hi = float(delta.data.min()), float(delta.data.max())
    if lo < 0.0 or hi > 1.0:
        raise NormalizationError(f"delta must lie in [0, 1], got range [{lo:g}, {hi:g}]")
    return BinaryMask.from_array((1.0 - delta.data) > threshold, spacing=delta.spacing)


# ---------------------------------------------------------------------------
# Weak-label harness
# ---------------------------------------------------------------------------


class LinearPredictor(BaseModel):
    """Per-voxel logistic model over feature channels."""

    model_config = ConfigDict(frozen=True)

    weights: tuple[float, ...]
    bias: float = 0.0

    @field_validator("weights")
    @classmethod
    def weights_must_be_non_empty(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if len(v) == 0:
            raise ValueError("predictor needs at least one feature weight")
        return v

    @classmethod
    def zeros(cls, channels: int) -> "LinearPredictor":
        return cls(weights=(0.0,) * channels, bias=0.0)

    @property
    def parameter_count(self) -> int:
        return len(self.weights) + 1

    def as_vector(self) -> np.ndarray:
        return np.array([*self.weights, self.bias], dtype=np.float64)

    @classmethod
    def from_vector(cls, theta: np.ndarray) -> "LinearPredictor":
        return cls(weights=tuple(float(w) for w in theta[:-1]), bias=float(theta[-1]))

    def predict_array(self, stack: np.ndarray) -> np.ndarray:
        """Probabilities for a (channels, x, y, z) feature stack."""
        if stack.shape[0] != len(self.weights):
            raise DimensionMismatchError(
                f"predictor has {len(self.weights)} weights, features have {stack.shape[0]} channels"
            )
        logits = np.tensordot(np.asarray(self.weights), stack, axes=1) + self.bias
        return expit(logits)

    def predict(self, features: list[Volume]) -> Volume:
        stack = np.stack([f.data for f in features])
        return features[0].with_data(self.predict_array(stack))


class WeakFitResult(BaseModel):
    """Outcome of the weak-label fit."""

    model_config = ConfigDict(frozen=True)

    predictor: LinearPredictor
    loss_trace: list[float]
    loss_kind: LossKind
    tparams: TDistParams | None = Field(default=None, description="Fitted t parameters (TD only)")
    best_iteration: int
    stopped_early: bool

    @property
    def r(self) -> float | None:
        return self.tparams.r if self.tparams is not None else None

    @property
    def sigma2_mean(self) -> float | None:
        if self.tparams is None:
            return None
        return float(np.mean(self.tparams.sigma2))


def _initial_theta(channels: int, cfg: FitConfig) -> np.ndarray:
    theta = LinearPredictor.zeros(channels).as_vector()
    if cfg.init_scale > 0:
        theta = np.random.default_rng(cfg.seed).normal(0.0, cfg.init_scale, theta.shape)
    return theta


def fit_weak(
    features: list[Volume],
    weak_label: BinaryMask,
    loss_kind: "str | LossKind" = LossKind.TD,
    tparams: TDistParams | None = None,
    cfg: FitConfig | None = None,
    focal_gamma: float = 2.0,
) -> WeakFitResult:
    """
    Train a LinearPredictor against weak labels.

    For the TD loss the raw t parameters are co-trained with their own
    learning rates (lr_r, lr_sigma). Early stopping monitors the training
    loss; the best iterate is returned.

    Raises:
        ValueError: If the feature list is empty
        DimensionMismatchError: If a feature volume and the label differ in dims
        UnknownLossError: If loss_kind is not recognized
    """
    if not features:
        raise ValueError("fit_weak needs at least one feature volume")
    for f in features:
        ensure_same_dims(f, weak_label, "feature and label")
    kind = LossKind.parse(loss_kind)
    cfg = cfg or FitConfig()
    if kind == LossKind.TD and tparams is None:
        tparams = TDistParams.from_values(1.0, 1.0)

    stack = np.stack([f.data for f in features])
    label = weak_label.data
    label_f = label.astype(np.float64)

    theta = _initial_theta(len(features), cfg)
    theta_state = AdamState.zeros_like(theta)
    if kind == LossKind.TD:
        rho_r = np.asarray(tparams.rho_r, dtype=np.float64)
        s = np.asarray(tparams.s, dtype=np.float64)
        rho_state = AdamState.zeros_like(rho_r)
        s_state = AdamState.zeros_like(s)

    stopper = _EarlyStopper(cfg.patience, cfg.min_delta)
    best_theta = theta
    best_tparams = tparams
    trace: list[float] = []

    for iteration in range(cfg.max_iters):
        predictor = LinearPredictor.from_vector(theta)
        prob = predictor.predict_array(stack)

        if kind == LossKind.TD:
            current = tparams.with_raw(float(rho_r), s if s.ndim else float(s))
            residual = Residual(values=features[0].with_data(label_f - prob))
            value = tdist_nll(residual, current)
            grad = tdist_grad(residual, current)
            d_prob = -grad.d_res.data
        else:
            current = None
            value, d_prob = baseline_value_and_grad(kind, prob, label, focal_gamma)
        trace.append(value)

        if stopper.update(value, iteration):
            best_theta = theta
            best_tparams = current
        if stopper.should_stop:
            logger.info(
                "fit_weak(%s) stopped early at iteration %d (best %.6g)",
                kind.value,
                iteration,
                stopper.best,
            )
            break

        d_logit = d_prob * prob * (1.0 - prob)
        d_theta = np.append(np.tensordot(stack, d_logit, axes=([1, 2, 3], [0, 1, 2])), d_logit.sum())
        theta, theta_state = adam_step(theta, d_theta, theta_state, cfg.lr_main)
        if kind == LossKind.TD:
            rho_r, rho_state = adam_step(rho_r, grad.d_rho_r, rho_state, cfg.lr_r)
            s, s_state = adam_step(s, grad.d_s, s_state, cfg.lr_sigma)

    return WeakFitResult(
        predictor=LinearPredictor.from_vector(best_theta),
        loss_trace=trace,
        loss_kind=kind,
        tparams=best_tparams if kind == LossKind.TD else None,
        best_iteration=stopper.best_iteration,
        stopped_early=len(trace) < cfg.max_iters,
    )
