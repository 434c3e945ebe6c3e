"""
CavityLab Gradient Checks

Central finite-difference suites for every differentiable loss. Each suite
probes random coordinates of random instances and reports the largest
relative error

    |analytic - numeric| / max(|analytic|, |numeric|, 1e-3 * max|analytic|)
"""

import logging
from collections.abc import Callable

import numpy as np
from pydantic import BaseModel, Field

from cavitylab.core.loss_msssim import SimilarityObjective, SimilarityVariant, SsimParams
from cavitylab.core.loss_smooth import smooth_value_and_grad
from cavitylab.core.loss_tdist import (
    BASELINE_KINDS,
    LossKind,
    Residual,
    TDistMode,
    TDistParams,
    baseline_value_and_grad,
    tdist_grad,
    tdist_nll,
)
from cavitylab.core.volume import Volume

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-5
ANALYTIC_TOLERANCE = 1e-6


class GradcheckRow(BaseModel):
    suite: str
    max_rel_error: float
    tolerance: float
    probes: int = Field(..., description="Coordinates probed across all seeds")

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


class GradcheckReport(BaseModel):
    rows: list[GradcheckRow]

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows)

    @property
    def failures(self) -> list[GradcheckRow]:
        return [row for row in self.rows if not row.passed]


def max_relative_error(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    rng: np.random.Generator,
    probes: int = 20,
    h: float = FD_STEP,
) -> float:
    """Largest relative error between ``analytic`` and central differences of ``fn`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    flat_grad = analytic.reshape(-1)
    floor = 1e-3 * float(np.max(np.abs(flat_grad))) if flat_grad.size else 0.0
    floor = max(floor, 1e-300)

    worst = 0.0
    for i in rng.choice(x.size, size=min(probes, x.size), replace=False):
        plus = x.copy().reshape(-1)
        minus = x.copy().reshape(-1)
        plus[i] += h
        minus[i] -= h
        numeric = (fn(plus.reshape(x.shape)) - fn(minus.reshape(x.shape))) / (2.0 * h)
        a = flat_grad[i]
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst


def _correlated_pair(rng: np.random.Generator, shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    x = rng.uniform(0.1, 0.9, shape)
    y = np.clip(0.6 * x + 0.4 * rng.uniform(0.0, 1.0, shape), 0.0, 1.0)
    return x, y


def similarity_suite(
    variant: SimilarityVariant, seeds: int = 5, probes: int = 20, shape: tuple[int, ...] = (12, 12, 12)
) -> GradcheckRow:
    """Two-scale similarity loss with a narrow window, so the pyramid adjoint is exercised."""
    params = SsimParams(
        M=2, beta=(0.5, 0.5), gamma=(0.5, 0.5), window_radius=2, window_sigma=1.0, variant=variant
    )
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        x, y = _correlated_pair(rng, shape)
        objective = SimilarityObjective(y, params)
        _, grad = objective.value_and_grad(x)
        worst = max(
            worst,
            max_relative_error(lambda v: objective.value_and_grad(v, need_grad=False)[0], x, grad, rng, probes),
        )
    return GradcheckRow(
        suite=f"similarity[{variant.value}]",
        max_rel_error=worst,
        tolerance=DEFAULT_TOLERANCE,
        probes=seeds * probes,
    )


def smooth_suite(seeds: int = 5, probes: int = 20, shape: tuple[int, ...] = (6, 6, 6)) -> GradcheckRow:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.0, 1.0, shape)
        _, grad = smooth_value_and_grad(x)
        worst = max(
            worst, max_relative_error(lambda v: smooth_value_and_grad(v, need_grad=False)[0], x, grad, rng, probes)
        )
    return GradcheckRow(
        suite="smooth", max_rel_error=worst, tolerance=ANALYTIC_TOLERANCE, probes=seeds * probes
    )


def tdist_suite(
    mode: TDistMode,
    per_voxel_scale: bool = False,
    seeds: int = 5,
    probes: int = 20,
    shape: tuple[int, ...] = (4, 4, 4),
) -> GradcheckRow:
    """Residual, rho_r and s gradients of the Student-t NLL."""
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        delta = rng.normal(0.0, 1.0, shape)
        s = rng.normal(0.0, 0.5, shape) if per_voxel_scale else float(rng.normal(0.0, 0.5))
        params = TDistParams(rho_r=float(rng.normal(0.5, 0.5)), s=s, mode=mode)
        res = Residual(values=Volume.from_array(delta))
        grad = tdist_grad(res, params)

        def nll_of_residual(v: np.ndarray) -> float:
            return tdist_nll(Residual(values=Volume.from_array(v)), params)

        def nll_of_rho(v: np.ndarray) -> float:
            return tdist_nll(res, params.with_raw(float(v[0]), params.s))

        def nll_of_s(v: np.ndarray) -> float:
            raw = v if per_voxel_scale else float(v[0])
            return tdist_nll(res, params.with_raw(params.rho_r, raw))

        worst = max(
            worst,
            max_relative_error(nll_of_residual, delta, grad.d_res.data, rng, probes),
            max_relative_error(nll_of_rho, np.array([params.rho_r]), np.array([grad.d_rho_r]), rng, 1),
            max_relative_error(
                nll_of_s,
                np.asarray(params.s) if per_voxel_scale else np.array([params.s]),
                np.asarray(grad.d_s) if per_voxel_scale else np.array([grad.d_s]),
                rng,
                probes,
            ),
        )
    scale = "field" if per_voxel_scale else "shared"
    return GradcheckRow(
        suite=f"tdist[{mode.value},{scale}]",
        max_rel_error=worst,
        tolerance=ANALYTIC_TOLERANCE,
        probes=seeds * (2 * probes + 1),
    )


def baseline_suite(
    kind: LossKind | str,
    seeds: int = 5,
    probes: int = 20,
    shape: tuple[int, ...] = (4, 4, 4),
    focal_gamma: float = 2.0,
) -> GradcheckRow:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        pred = rng.uniform(0.05, 0.95, shape)
        label = rng.random(shape) < 0.5
        _, grad = baseline_value_and_grad(kind, pred, label, focal_gamma)
        worst = max(
            worst,
            max_relative_error(
                lambda v: baseline_value_and_grad(kind, v, label, focal_gamma)[0], pred, grad, rng, probes
            ),
        )
    return GradcheckRow(
        suite=f"baseline[{kind.value}]",
        max_rel_error=worst,
        tolerance=ANALYTIC_TOLERANCE,
        probes=seeds * probes,
    )


def run_gradcheck(seeds: int = 5, probes: int = 20) -> GradcheckReport:
    """Run every finite-difference suite."""
    rows = [similarity_suite(v, seeds, probes) for v in SimilarityVariant]
    rows.append(smooth_suite(seeds, probes))
    rows.append(tdist_suite(TDistMode.PER_VOXEL, False, seeds, probes))
    rows.append(tdist_suite(TDistMode.PER_VOXEL, True, seeds, probes))
    rows.append(tdist_suite(TDistMode.JOINT, False, seeds, probes))
    rows.append(tdist_suite(TDistMode.JOINT, True, seeds, probes))
    rows.extend(baseline_suite(kind, seeds, probes) for kind in BASELINE_KINDS)
    for row in rows:
        logger.info("gradcheck %s: max rel error %.3g (tol %.0e)", row.suite, row.max_rel_error, row.tolerance)
    return GradcheckReport(rows=rows)
