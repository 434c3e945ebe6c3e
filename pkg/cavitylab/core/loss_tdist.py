"""
CavityLab Robust Losses

Negative log-likelihood of a Student-t residual model with learnable degrees
of freedom r and diagonal scales sigma^2, and the five baseline losses the
weak-label harness compares it against (CE, BCE, Focal, MSE, MAE).

Positivity of r and sigma^2 comes from a softplus reparameterization plus a
1e-8 safeguard, so any real-valued raw parameter is admissible. Gamma
functions are only ever evaluated in log form.
"""

import math
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.special import digamma, expit, gammaln

from cavitylab.core.exceptions import DimensionMismatchError, UnknownLossError
from cavitylab.core.volume import BinaryMask, Volume, ensure_same_dims

POSITIVITY_EPS = 1e-8
PROB_CLAMP = 1e-7
DEFAULT_FOCAL_GAMMA = 2.0


def softplus(x: np.ndarray | float) -> np.ndarray:
    """log(1 + e^x), overflow-free."""
    return np.logaddexp(0.0, x)


def softplus_inverse(y: np.ndarray | float) -> np.ndarray:
    """Inverse of softplus for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


class TDistMode(str, Enum):
    PER_VOXEL = "per_voxel"  # one-dimensional t per voxel, mean NLL
    JOINT = "joint"  # a single sample of dimension N = voxel count


class LossKind(str, Enum):
    """Training losses of the weak-label comparison."""

    TD = "TD"
    CE = "CE"
    BCE = "BCE"
    FOCAL = "Focal"
    MSE = "MSE"
    MAE = "MAE"

    @classmethod
    def parse(cls, value: "str | LossKind") -> "LossKind":
        try:
            return cls(value)
        except ValueError as e:
            raise UnknownLossError(
                f"unknown loss kind {value!r}; expected one of {[k.value for k in cls]}"
            ) from e


BASELINE_KINDS = (LossKind.CE, LossKind.BCE, LossKind.FOCAL, LossKind.MSE, LossKind.MAE)


class TDistParams(BaseModel):
    """
    Raw (unconstrained) Student-t parameters.

    ``r = softplus(rho_r) + eps`` and ``sigma2 = softplus(s) + eps``, where ``s``
    is either one shared scalar or a per-voxel field.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    rho_r: float = Field(..., description="Raw degrees-of-freedom parameter")
    s: float | np.ndarray = Field(..., description="Raw scale parameter(s)")
    eps: float = Field(default=POSITIVITY_EPS, gt=0)
    mode: TDistMode = Field(default=TDistMode.PER_VOXEL)

    @field_validator("rho_r")
    @classmethod
    def rho_must_be_finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("rho_r must be finite")
        return v

    @field_validator("s")
    @classmethod
    def s_must_be_finite(cls, v: float | np.ndarray) -> float | np.ndarray:
        if isinstance(v, np.ndarray):
            arr = np.array(v, dtype=np.float64, copy=True)
            if arr.ndim != 3:
                raise ValueError(f"per-voxel s must be 3D, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError("s contains NaN or infinity")
            arr.flags.writeable = False
            return arr
        v = float(v)
        if not math.isfinite(v):
            raise ValueError("s must be finite")
        return v

    @classmethod
    def from_values(
        cls,
        r: float = 1.0,
        sigma2: float | np.ndarray = 1.0,
        mode: TDistMode = TDistMode.PER_VOXEL,
        eps: float = POSITIVITY_EPS,
    ) -> "TDistParams":
        """Parameters whose mapped r and sigma^2 equal the given values."""
        if r <= eps or np.any(np.asarray(sigma2) <= eps):
            raise ValueError(f"r and sigma2 must exceed eps={eps}")
        rho_r = float(softplus_inverse(r - eps))
        if isinstance(sigma2, np.ndarray):
            s: float | np.ndarray = softplus_inverse(sigma2 - eps)
        else:
            s = float(softplus_inverse(sigma2 - eps))
        return cls(rho_r=rho_r, s=s, eps=eps, mode=mode)

    @property
    def shared_scale(self) -> bool:
        return not isinstance(self.s, np.ndarray)

    @property
    def r(self) -> float:
        return float(softplus(self.rho_r)) + self.eps

    @property
    def sigma2(self) -> float | np.ndarray:
        return softplus(self.s) + self.eps

    def with_raw(self, rho_r: float, s: float | np.ndarray) -> "TDistParams":
        return TDistParams(rho_r=rho_r, s=s, eps=self.eps, mode=self.mode)


class Residual(BaseModel):
    """Per-voxel residual K - f(I)."""

    model_config = ConfigDict(frozen=True)

    values: Volume

    @classmethod
    def from_prediction(cls, label: BinaryMask, pred: Volume) -> "Residual":
        ensure_same_dims(label, pred, "label and prediction")
        return cls(values=pred.with_data(label.data.astype(np.float64) - pred.data))


class TDistGrad(BaseModel):
    """Partial derivatives of the Student-t NLL."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    d_res: Volume
    d_rho_r: float
    d_s: float | np.ndarray


def _check_scale_dims(res: Residual, p: TDistParams) -> None:
    if not p.shared_scale and p.s.shape != res.values.dims:
        raise DimensionMismatchError(
            f"per-voxel scale dims {p.s.shape} do not match residual dims {res.values.dims}"
        )


def _nll_terms(delta: np.ndarray, p: TDistParams) -> tuple[float, np.ndarray]:
    r = p.r
    sigma2 = np.broadcast_to(p.sigma2, delta.shape)
    n = delta.size
    if p.mode == TDistMode.PER_VOXEL:
        per_voxel = (
            0.5 * math.log(math.pi * r)
            + gammaln(r / 2.0)
            - gammaln((r + 1.0) / 2.0)
            + 0.5 * np.log(sigma2)
            + 0.5 * (r + 1.0) * np.log1p(delta**2 / (r * sigma2))
        )
        return float(per_voxel.mean()), sigma2
    q = float(np.sum(delta**2 / sigma2))
    value = (
        0.5 * n * math.log(math.pi * r)
        + gammaln(r / 2.0)
        - gammaln((r + n) / 2.0)
        + 0.5 * float(np.sum(np.log(sigma2)))
        + 0.5 * (r + n) * math.log1p(q / r)
    )
    return float(value), sigma2


def tdist_nll(res: Residual, p: TDistParams) -> float:
    """
    Student-t negative log-likelihood of the residual.

    In per-voxel mode this is the voxel mean of the one-dimensional NLL; in
    joint mode the whole volume is one sample of dimension N.
    """
    _check_scale_dims(res, p)
    value, _ = _nll_terms(res.values.data, p)
    return value


def tdist_grad(res: Residual, p: TDistParams) -> TDistGrad:
    """Analytic gradient w.r.t. the residual, rho_r and s (chain rule through softplus)."""
    _check_scale_dims(res, p)
    delta = res.values.data
    r = p.r
    sigma2 = np.broadcast_to(p.sigma2, delta.shape)
    n = delta.size

    if p.mode == TDistMode.PER_VOXEL:
        denom = r * sigma2 + delta**2
        d_delta = (r + 1.0) * delta / denom / n
        d_sigma2 = (0.5 / sigma2 - 0.5 * (r + 1.0) * delta**2 / (sigma2 * denom)) / n
        q = delta**2 / sigma2
        d_r = float(
            np.mean(
                0.5 / r
                + 0.5 * digamma(r / 2.0)
                - 0.5 * digamma((r + 1.0) / 2.0)
                + 0.5 * np.log1p(q / r)
                - 0.5 * (r + 1.0) * delta**2 / (r * denom)
            )
        )
    else:
        q = float(np.sum(delta**2 / sigma2))
        d_delta = (r + n) * delta / (sigma2 * (r + q))
        d_sigma2 = 0.5 / sigma2 - 0.5 * (r + n) * delta**2 / (sigma2**2 * (r + q))
        d_r = float(
            0.5 * n / r
            + 0.5 * digamma(r / 2.0)
            - 0.5 * digamma((r + n) / 2.0)
            + 0.5 * math.log1p(q / r)
            - 0.5 * (r + n) * q / (r * (r + q))
        )

    d_rho_r = d_r * float(expit(p.rho_r))
    if p.shared_scale:
        d_s: float | np.ndarray = float(np.sum(d_sigma2)) * float(expit(p.s))
    else:
        d_s = d_sigma2 * expit(p.s)
    return TDistGrad(d_res=res.values.with_data(d_delta), d_rho_r=d_rho_r, d_s=d_s)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def baseline_value_and_grad(
    kind: LossKind, pred: np.ndarray, label: np.ndarray, focal_gamma: float
) -> tuple[float, np.ndarray]:
    n = pred.size
    y = label.astype(np.float64)

    if kind == LossKind.MSE:
        diff = pred - y
        return float(np.mean(diff**2)), 2.0 * diff / n
    if kind == LossKind.MAE:
        diff = pred - y
        return float(np.mean(np.abs(diff))), np.sign(diff) / n

    p = np.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (pred >= PROB_CLAMP) & (pred <= 1.0 - PROB_CLAMP)
    sign = np.where(label, 1.0, -1.0)
    p_t = np.where(label, p, 1.0 - p)
    log_pt = np.log(p_t)

    if kind in (LossKind.CE, LossKind.BCE):
        value = float(np.mean(-log_pt))
        d_pt = -1.0 / p_t
    elif kind == LossKind.FOCAL:
        one_minus = 1.0 - p_t
        value = float(np.mean(-(one_minus**focal_gamma) * log_pt))
        if focal_gamma == 0.0:
            d_pt = -1.0 / p_t
        else:
            d_pt = focal_gamma * one_minus ** (focal_gamma - 1.0) * log_pt - one_minus**focal_gamma / p_t
    else:
        raise UnknownLossError(f"{kind.value} is not a baseline loss")
    return value, np.where(inside, sign * d_pt / n, 0.0)


def baseline_loss(
    kind: "str | LossKind",
    pred: Volume,
    label: BinaryMask,
    focal_gamma: float = DEFAULT_FOCAL_GAMMA,
) -> float:
    """
    Voxel-mean baseline loss of a probability map against a binary label.

    CE and BCE coincide for single-channel binary labels; both names are kept
    so every row of the loss comparison has its own entry. Probabilities are
    clamped to [1e-7, 1 - 1e-7] for CE, BCE and Focal.

    Raises:
        UnknownLossError: If ``kind`` is not one of CE, BCE, Focal, MSE, MAE
    """
    ensure_same_dims(pred, label, "prediction and label")
    value, _ = baseline_value_and_grad(LossKind.parse(kind), pred.data, label.data, focal_gamma)
    return value


def baseline_loss_grad(
    kind: "str | LossKind",
    pred: Volume,
    label: BinaryMask,
    focal_gamma: float = DEFAULT_FOCAL_GAMMA,
) -> Volume:
    """Gradient of :func:`baseline_loss` w.r.t. the prediction (zero where clamped)."""
    ensure_same_dims(pred, label, "prediction and label")
    _, grad = baseline_value_and_grad(LossKind.parse(kind), pred.data, label.data, focal_gamma)
    return pred.with_data(grad)
