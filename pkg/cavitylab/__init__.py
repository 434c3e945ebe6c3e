"""
CavityLab - Differentiable volumetric losses for cavity recovery

Multi-scale structural similarity with a correlation term, a smoothness
penalty and a Student-t negative log-likelihood, together with a seeded
phantom generator and the segmentation metric battery used to evaluate them.

Usage:
    from cavitylab import PhantomSpec, generate_phantom, fit_delta, predict_mask
    from cavitylab import evaluate_masks, normalize_intensity

    pair = generate_phantom(PhantomSpec(dims=(24, 24, 24), seed=7))
    result = fit_delta(normalize_intensity(pair.preop), normalize_intensity(pair.postop))
    mask = predict_mask(result.delta)

    print(f"Dice: {evaluate_masks(mask, pair.gt_mask).dice:.3f}")
"""

__version__ = "0.1.0"
__license__ = "MIT"

from cavitylab.core.config import ExperimentConfig, parse_config
from cavitylab.core.loss_msssim import SimilarityVariant, SsimParams, msssim_cscc_grad, msssim_cscc_loss
from cavitylab.core.loss_smooth import smooth_loss, smooth_loss_grad
from cavitylab.core.loss_tdist import LossKind, TDistParams, baseline_loss, tdist_grad, tdist_nll
from cavitylab.core.metrics import evaluate_masks, hd95, wilcoxon_signed_rank
from cavitylab.core.optim import FitConfig, fit_delta, fit_weak, predict_mask
from cavitylab.core.phantom import CorruptionSpec, PhantomSpec, corrupt_mask, generate_phantom
from cavitylab.core.volume import BinaryMask, Volume, load_volume, normalize_intensity, save_volume

__all__ = [
    # Volumes
    "Volume",
    "BinaryMask",
    "load_volume",
    "save_volume",
    "normalize_intensity",
    # Losses
    "SsimParams",
    "SimilarityVariant",
    "msssim_cscc_loss",
    "msssim_cscc_grad",
    "smooth_loss",
    "smooth_loss_grad",
    "LossKind",
    "TDistParams",
    "tdist_nll",
    "tdist_grad",
    "baseline_loss",
    # Optimization
    "FitConfig",
    "fit_delta",
    "fit_weak",
    "predict_mask",
    # Phantoms
    "PhantomSpec",
    "CorruptionSpec",
    "generate_phantom",
    "corrupt_mask",
    # Metrics
    "evaluate_masks",
    "hd95",
    "wilcoxon_signed_rank",
    # Configuration
    "ExperimentConfig",
    "parse_config",
]
