"""
CavityLab Similarity Loss

Multi-scale structural similarity augmented with squared cross-correlation:

    L = 1 - [l_M]^alpha * prod_j [c_j + SCC_j]^beta_j * [s_j]^gamma_j

where l, c, s are the spatial means of the luminance, contrast and
structure maps at scale j, and SCC_j is the squared global Pearson
correlation at that scale. Two ablation variants attach SCC to the
structure term instead, or drop it entirely.

The gradient with respect to the first argument is computed by a reverse
sweep: scalar sensitivities -> per-voxel map sensitivities -> windowed
moment sensitivities -> filter adjoints -> downsampling adjoints.
"""

import logging
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from cavitylab.core.multiscale import (
    DEFAULT_WINDOW_RADIUS,
    DEFAULT_WINDOW_SIGMA,
    GaussianKernel1D,
    achievable_levels,
    downsample_adjoint,
    gaussian_kernel,
    pyramid_arrays,
    separable_filter,
    separable_filter_adjoint,
)
from cavitylab.core.volume import Volume, ensure_same_dims

logger = logging.getLogger(__name__)

# Standard five-scale MS-SSIM exponents.
DEFAULT_SCALE_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

# Stabilizers on dynamic range 1.
DEFAULT_C1 = 0.01**2
DEFAULT_C2 = 0.03**2

# Below this centered sum of squares SCC is reported as 0.
SCC_DEGENERATE_SS = 1e-12

# Added to clamped local variances before taking square roots.
VARIANCE_EPS = 1e-14


class SimilarityVariant(str, Enum):
    """Where SCC enters the multi-scale product."""

    CSCC = "cscc"  # c_j + SCC_j (primary)
    SSCC = "sscc"  # s_j + SCC_j
    MSSSIM = "msssim"  # plain MS-SSIM


class SsimParams(BaseModel):
    """Constants of the multi-scale similarity loss."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    M: int = Field(default=5, ge=1, description="Requested number of scales")
    alpha_M: float | None = Field(
        default=None,
        gt=0,
        description="Luminance exponent at the coarsest scale; None uses beta of that scale",
    )
    beta: tuple[float, ...] = Field(default=DEFAULT_SCALE_WEIGHTS)
    gamma: tuple[float, ...] = Field(default=DEFAULT_SCALE_WEIGHTS)
    C1: float = Field(default=DEFAULT_C1, gt=0)
    C2: float = Field(default=DEFAULT_C2, gt=0)
    C3: float | None = Field(default=None, gt=0, description="None means C2/2")
    window_sigma: float = Field(default=DEFAULT_WINDOW_SIGMA, gt=0)
    window_radius: int = Field(default=DEFAULT_WINDOW_RADIUS, ge=0)
    power_floor: float = Field(default=1e-6, gt=0, le=1e-3)
    variant: SimilarityVariant = Field(default=SimilarityVariant.CSCC)

    @field_validator("beta", "gamma")
    @classmethod
    def normalize_exponents(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        """Exponents must be positive; they are rescaled to unit sum."""
        if len(v) == 0 or any(w <= 0 for w in v):
            raise ValueError("scale exponents must be non-empty and positive")
        total = float(np.sum(v))
        return tuple(float(w) / total for w in v)

    @model_validator(mode="after")
    def validate_scale_count(self) -> "SsimParams":
        if len(self.beta) != self.M or len(self.gamma) != self.M:
            raise ValueError(f"beta and gamma need exactly M={self.M} entries")
        return self

    @property
    def c3(self) -> float:
        return self.C3 if self.C3 is not None else self.C2 / 2.0

    @property
    def window(self) -> GaussianKernel1D:
        return gaussian_kernel(self.window_sigma, self.window_radius)

    def scale_exponents(self, achieved: int) -> tuple[float, np.ndarray, np.ndarray]:
        """
        Exponents for ``achieved`` scales.

        The leading ``achieved`` betas and gammas are renormalized to unit sum;
        alpha defaults to the (renormalized) beta of the coarsest scale.
        """
        beta = np.asarray(self.beta[:achieved], dtype=np.float64)
        gamma = np.asarray(self.gamma[:achieved], dtype=np.float64)
        beta = beta / beta.sum()
        gamma = gamma / gamma.sum()
        alpha = self.alpha_M if self.alpha_M is not None else float(beta[-1])
        return alpha, beta, gamma


class SsimMaps(BaseModel):
    """Per-voxel luminance, contrast and structure maps."""

    model_config = ConfigDict(frozen=True)

    l_map: Volume
    c_map: Volume
    s_map: Volume


class SimilarityValue(BaseModel):
    """Loss value and the number of scales it was evaluated on."""

    loss: float
    achieved_M: int


class _ScaleStats:
    """Windowed moments and component maps at one scale, kept for the reverse sweep."""

    __slots__ = (
        "x",
        "y",
        "mu_x",
        "mu_y",
        "var_x_raw",
        "var_y_raw",
        "cov",
        "sx",
        "sy",
        "vx",
        "vy",
        "l_num",
        "l_den",
        "l_map",
        "c_num",
        "c_den",
        "c_map",
        "s_den",
        "s_map",
    )

    def __init__(
        self,
        x: np.ndarray,
        y: np.ndarray,
        taps: np.ndarray,
        p: SsimParams,
        mu_y: np.ndarray | None = None,
        eyy: np.ndarray | None = None,
    ) -> None:
        self.x = x
        self.y = y
        self.mu_x = separable_filter(x, taps)
        self.mu_y = separable_filter(y, taps) if mu_y is None else mu_y
        exx = separable_filter(x * x, taps)
        eyy = separable_filter(y * y, taps) if eyy is None else eyy
        exy = separable_filter(x * y, taps)

        self.var_x_raw = exx - self.mu_x**2
        self.var_y_raw = eyy - self.mu_y**2
        self.cov = exy - self.mu_x * self.mu_y
        self.vx = np.maximum(self.var_x_raw, 0.0) + VARIANCE_EPS
        self.vy = np.maximum(self.var_y_raw, 0.0) + VARIANCE_EPS
        self.sx = np.sqrt(self.vx)
        self.sy = np.sqrt(self.vy)

        self.l_num = 2.0 * self.mu_x * self.mu_y + p.C1
        self.l_den = self.mu_x**2 + self.mu_y**2 + p.C1
        self.l_map = self.l_num / self.l_den

        self.c_num = 2.0 * self.sx * self.sy + p.C2
        self.c_den = self.vx + self.vy + p.C2
        self.c_map = self.c_num / self.c_den

        self.s_den = self.sx * self.sy + p.c3
        self.s_map = (self.cov + p.c3) / self.s_den

    def backward(
        self, taps: np.ndarray, p: SsimParams, w_l: float, w_c: float, w_s: float
    ) -> np.ndarray:
        """Gradient w.r.t. x of ``w_l*mean(l) + w_c*mean(c) + w_s*mean(s)``."""
        n = self.x.size
        g_l = w_l / n
        g_c = w_c / n
        g_s = w_s / n

        g_mu_x = g_l * (2.0 * self.mu_y * self.l_den - self.l_num * 2.0 * self.mu_x) / self.l_den**2

        dc_dvx = ((self.sy / self.sx) * self.c_den - self.c_num) / self.c_den**2
        ds_dvx = -(self.cov + p.c3) / self.s_den**2 * self.sy / (2.0 * self.sx)
        g_var = (g_c * dc_dvx + g_s * ds_dvx) * (self.var_x_raw > 0.0)
        g_cov = g_s / self.s_den

        g_mu_x = g_mu_x - 2.0 * self.mu_x * g_var - self.mu_y * g_cov
        return (
            separable_filter_adjoint(g_mu_x, taps)
            + 2.0 * self.x * separable_filter_adjoint(g_var, taps)
            + self.y * separable_filter_adjoint(g_cov, taps)
        )


def _scc_terms(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float, np.ndarray, np.ndarray]:
    xc = x - x.mean()
    yc = y - y.mean()
    return float(np.sum(xc * yc)), float(np.sum(xc * xc)), float(np.sum(yc * yc)), xc, yc


def _scc_value_and_grad(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    sxy, sxx, syy, xc, yc = _scc_terms(x, y)
    if sxx < SCC_DEGENERATE_SS or syy < SCC_DEGENERATE_SS:
        return 0.0, np.zeros_like(x)
    value = sxy**2 / (sxx * syy)
    grad = 2.0 * sxy / (sxx * syy) * yc - 2.0 * sxy**2 / (sxx**2 * syy) * xc
    return value, grad


def scc(x: Volume, y: Volume) -> float:
    """Squared global Pearson correlation; 0 if either field is (near) constant."""
    ensure_same_dims(x, y, "scc operands")
    sxy, sxx, syy, _, _ = _scc_terms(x.data, y.data)
    if sxx < SCC_DEGENERATE_SS or syy < SCC_DEGENERATE_SS:
        return 0.0
    return sxy**2 / (sxx * syy)


def ssim_components(x: Volume, y: Volume, p: SsimParams | None = None) -> SsimMaps:
    """Per-voxel luminance, contrast and structure maps at full resolution."""
    ensure_same_dims(x, y, "ssim operands")
    p = p or SsimParams()
    stats = _ScaleStats(x.data, y.data, p.window.taps, p)
    return SsimMaps(
        l_map=x.with_data(stats.l_map),
        c_map=x.with_data(stats.c_map),
        s_map=x.with_data(stats.s_map),
    )


class SimilarityObjective:
    """
    The multi-scale similarity loss against a fixed target.

    The target's pyramid and windowed moments are computed once, so repeated
    evaluations inside an optimization loop only filter the moving argument.
    """

    def __init__(self, target: np.ndarray, params: SsimParams | None = None) -> None:
        self.params = params or SsimParams()
        self.taps = self.params.window.taps
        self.shape = tuple(np.shape(target))
        self.achieved = achievable_levels(
            self.shape, self.params.M, 2 * self.params.window_radius + 1
        )
        if self.achieved < self.params.M:
            logger.info(
                "Similarity loss uses %d of %d scales for dims %s",
                self.achieved,
                self.params.M,
                self.shape,
            )
        self.alpha, self.beta, self.gamma = self.params.scale_exponents(self.achieved)
        self._targets = pyramid_arrays(np.asarray(target, dtype=np.float64), self.achieved)
        self._mu_y = [separable_filter(y, self.taps) for y in self._targets]
        self._eyy = [separable_filter(y * y, self.taps) for y in self._targets]

    def value_and_grad(self, x: np.ndarray, need_grad: bool = True) -> tuple[float, np.ndarray | None]:
        """Loss and (optionally) its gradient with respect to x."""
        if tuple(np.shape(x)) != self.shape:
            raise ValueError(f"argument shape {np.shape(x)} does not match target {self.shape}")
        p = self.params
        floor = p.power_floor
        variant = p.variant
        m = self.achieved

        xs = pyramid_arrays(x, m)
        stats = [
            _ScaleStats(xs[j], self._targets[j], self.taps, p, self._mu_y[j], self._eyy[j])
            for j in range(m)
        ]
        sccs = [_scc_value_and_grad(xs[j], self._targets[j]) for j in range(m)]

        c_bar = np.array([float(s.c_map.mean()) for s in stats])
        s_bar = np.array([float(s.s_map.mean()) for s in stats])
        scc_vals = np.array([v for v, _ in sccs])
        l_bar = float(stats[-1].l_map.mean())

        a_raw = c_bar + scc_vals if variant == SimilarityVariant.CSCC else c_bar
        b_raw = s_bar + scc_vals if variant == SimilarityVariant.SSCC else s_bar
        a = np.maximum(a_raw, floor)
        b = np.maximum(b_raw, floor)
        lum = max(l_bar, floor)

        log_p = self.alpha * np.log(lum) + np.sum(self.beta * np.log(a)) + np.sum(
            self.gamma * np.log(b)
        )
        product = float(np.exp(log_p))
        loss = 1.0 - product
        if not need_grad:
            return loss, None

        # dL/d(term) = -P * exponent / term, zero where the floor is active.
        d_lum = -product * self.alpha / lum if l_bar > floor else 0.0
        d_a = np.where(a_raw > floor, -product * self.beta / a, 0.0)
        d_b = np.where(b_raw > floor, -product * self.gamma / b, 0.0)
        if variant == SimilarityVariant.CSCC:
            d_scc = d_a
        elif variant == SimilarityVariant.SSCC:
            d_scc = d_b
        else:
            d_scc = np.zeros(m)

        grad: np.ndarray | None = None
        for j in range(m - 1, -1, -1):
            w_l = d_lum if j == m - 1 else 0.0
            g = stats[j].backward(self.taps, p, w_l, float(d_a[j]), float(d_b[j]))
            if d_scc[j] != 0.0:
                g = g + d_scc[j] * sccs[j][1]
            if grad is not None:
                g = g + downsample_adjoint(grad, xs[j].shape)
            grad = g
        return loss, grad


def msssim_cscc_loss(x: Volume, y: Volume, p: SsimParams | None = None) -> SimilarityValue:
    """
    Evaluate the multi-scale similarity loss.

    Args:
        x: Moving field (e.g. preop masked by delta)
        y: Reference field (e.g. postop)
        p: Loss constants; defaults to the five-scale standard

    Returns:
        SimilarityValue with the loss in [-1, 1] and the achieved scale count
    """
    ensure_same_dims(x, y, "similarity operands")
    objective = SimilarityObjective(y.data, p)
    loss, _ = objective.value_and_grad(x.data, need_grad=False)
    return SimilarityValue(loss=loss, achieved_M=objective.achieved)


def msssim_cscc_grad(x: Volume, y: Volume, p: SsimParams | None = None) -> Volume:
    """Gradient of :func:`msssim_cscc_loss` with respect to ``x``."""
    ensure_same_dims(x, y, "similarity operands")
    _, grad = SimilarityObjective(y.data, p).value_and_grad(x.data)
    return x.with_data(grad)
