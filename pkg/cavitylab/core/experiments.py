"""
CavityLab Experiments

Per-case drivers behind the CLI commands. Each command takes a validated
ExperimentConfig, works case by case with seeds split from the global seed,
writes its per-case volumes, then merges the rows into CSV tables sorted by
case so reports do not depend on execution order.

Output layout under ``cfg.out_dir``::

    config.resolved.json
    case_000/ preop.vol postop.vol gt_mask.vol spec.json delta.vol mask.vol
    metrics.csv      (fit, eval)
    ablation.csv     (ablate: one row per case and method)
    wilcoxon.csv     (ablate: paired tests)
    gradcheck.csv    (gradcheck)
    summary.json     (ablate, report)
"""

import json
import logging
import math
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from cavitylab.core.config import ExperimentConfig
from cavitylab.core.exceptions import (
    CavityLabError,
    ConfigError,
    MetricUndefinedError,
    VolumeFormatError,
)
from cavitylab.core.gradcheck import GradcheckReport, run_gradcheck
from cavitylab.core.loss_msssim import SimilarityVariant
from cavitylab.core.loss_tdist import LossKind
from cavitylab.core.metrics import CaseMetrics, evaluate_masks, wilcoxon_signed_rank
from cavitylab.core.optim import DeltaFitResult, fit_delta, fit_weak, predict_mask
from cavitylab.core.phantom import (
    PhantomPair,
    corrupt_mask,
    generate_phantom,
    load_phantom_pair,
    save_phantom_pair,
    standardize_features,
    voxel_features,
)
from cavitylab.core.volume import BinaryMask, Volume, binarize, load_volume, normalize_intensity, save_volume

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

COMMANDS = ("phantom", "fit", "ablate", "gradcheck", "eval", "report")

METRIC_COLUMNS = ("dice", "iou", "acc", "precision", "sensitivity", "specificity", "hd95", "asd")
METRICS_CSV_COLUMNS = ("case", *METRIC_COLUMNS, "achieved_M", "status")
ABLATION_CSV_COLUMNS = ("case", "group", "method", *METRIC_COLUMNS, "achieved_M", "r", "sigma2", "status")
WILCOXON_CSV_COLUMNS = (
    "group", "metric", "method_a", "method_b", "statistic", "p_value", "n_effective",
    "test", "significant", "status",
)
WILCOXON_METRICS = ("dice", "hd95")

METRICS_FILE = "metrics.csv"
ABLATION_FILE = "ablation.csv"
WILCOXON_FILE = "wilcoxon.csv"
GRADCHECK_FILE = "gradcheck.csv"
SUMMARY_FILE = "summary.json"
DELTA_FILE = "delta.vol"
MASK_FILE = "mask.vol"

LOSS_GROUP = "loss"
SIMILARITY_GROUP = "similarity"

# (command, cases done, cases total)
ProgressCallback = Callable[[str, int, int], None]


def case_dir_name(index: int) -> str:
    return f"case_{index:03d}"


def exit_code_for(error: BaseException) -> int:
    """Config problems exit 1, everything else that went wrong exits 2."""
    if isinstance(error, ConfigError):
        return EXIT_VALIDATION
    return EXIT_RUNTIME


class MetricSummary(BaseModel):
    """Mean and sample standard deviation of one metric over cases."""

    model_config = ConfigDict(frozen=True)

    mean: float | None
    std: float | None
    n: int = Field(..., ge=0, description="Cases with a defined value")

    @property
    def display(self) -> str:
        if self.mean is None:
            return "n/a"
        if self.std is None:
            return f"{self.mean:.3f}"
        return f"{self.mean:.3f} ± {self.std:.3f}"


def _finite_or_none(value: float) -> float | None:
    return None if value is None or not math.isfinite(value) else float(value)


def summarize_table(df: pd.DataFrame, metrics: Sequence[str] = METRIC_COLUMNS) -> dict[str, dict[str, MetricSummary]]:
    """
    Mean ± std per method and metric.

    Rows are grouped by ``group/method`` when those columns exist, otherwise
    everything lands under ``all``. NaN values (undefined distances) are
    left out of the statistics and of ``n``.
    """
    present = [m for m in metrics if m in df.columns]
    if "method" in df.columns:
        keys = (df["group"] + "/" + df["method"]) if "group" in df.columns else df["method"]
    else:
        keys = pd.Series("all", index=df.index)

    summary: dict[str, dict[str, MetricSummary]] = {}
    for key, rows in df.groupby(keys, sort=True):
        summary[str(key)] = {
            metric: MetricSummary(
                mean=_finite_or_none(rows[metric].mean()),
                std=_finite_or_none(rows[metric].std()),
                n=int(rows[metric].count()),
            )
            for metric in present
        }
    return summary


def summary_to_dict(summary: dict[str, dict[str, MetricSummary]]) -> dict[str, Any]:
    return {
        method: {metric: {**s.model_dump(), "display": s.display} for metric, s in metrics.items()}
        for method, metrics in summary.items()
    }


def _write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=str))
    return path


def _write_table(df: pd.DataFrame, path: Path, columns: Sequence[str], sort_by: Sequence[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    df = df.reindex(columns=list(columns))
    if len(df):
        df = df.sort_values(list(sort_by), kind="mergesort").reset_index(drop=True)
    df.to_csv(path, index=False)
    return path


class CaseInputs(BaseModel):
    """One phantom pair, normalized for fitting."""

    model_config = ConfigDict(frozen=True)

    index: int
    pair: PhantomPair
    preop: Volume
    postop: Volume


class ExperimentRunner:
    """
    Runs the batch commands of one experiment config.

    Args:
        cfg: Validated experiment config; ``cfg.out_dir`` receives all outputs
        progress: Optional callback invoked after every finished case
    """

    def __init__(self, cfg: ExperimentConfig, progress: ProgressCallback | None = None) -> None:
        self.cfg = cfg
        self.out_dir = Path(cfg.out_dir)
        self._progress = progress

    def _tick(self, command: str, done: int, total: int) -> None:
        if self._progress is not None:
            self._progress(command, done, total)

    def _start(self) -> None:
        self.cfg.save_resolved(self.out_dir)

    # -- inputs -------------------------------------------------------------

    def _pairs(self, phantom_dir: str | Path | None = None) -> list[tuple[int, PhantomPair]]:
        if phantom_dir is None:
            return [(k, generate_phantom(self.cfg.phantom_spec(k))) for k in range(self.cfg.cases)]

        root = Path(phantom_dir)
        case_dirs = sorted(p for p in root.glob("case_*") if p.is_dir())
        if not case_dirs:
            raise FileNotFoundError(f"no case_* directories under {root}")
        return [(int(d.name.split("_", 1)[1]), load_phantom_pair(d)) for d in case_dirs]

    def _prepare(self, index: int, pair: PhantomPair) -> CaseInputs:
        return CaseInputs(
            index=index,
            pair=pair,
            preop=normalize_intensity(pair.preop),
            postop=normalize_intensity(pair.postop),
        )

    def _fit(self, case: CaseInputs, variant: SimilarityVariant | None = None) -> DeltaFitResult:
        ssim = self.cfg.ssim if variant is None else self.cfg.ssim.model_copy(update={"variant": variant})
        return fit_delta(case.preop, case.postop, ssim, self.cfg.fit)

    # -- commands -----------------------------------------------------------

    def phantom(self) -> list[Path]:
        """Generate ``cfg.cases`` seeded pairs and save them as case directories."""
        self._start()
        written = []
        for k in range(self.cfg.cases):
            pair = generate_phantom(self.cfg.phantom_spec(k))
            written.append(save_phantom_pair(pair, self.out_dir / case_dir_name(k)))
            self._tick("phantom", k + 1, self.cfg.cases)
        logger.info("Wrote %d phantom pairs to %s", len(written), self.out_dir)
        return written

    def fit(self, phantom_dir: str | Path | None = None) -> pd.DataFrame:
        """Self-supervised recovery on every case; writes delta, mask and metrics.csv."""
        self._start()
        pairs = self._pairs(phantom_dir)
        rows = []
        for done, (k, pair) in enumerate(pairs, start=1):
            case = self._prepare(k, pair)
            result = self._fit(case)
            mask = predict_mask(result.delta, self.cfg.fit.threshold)

            case_dir = self.out_dir / case_dir_name(k)
            case_dir.mkdir(parents=True, exist_ok=True)
            save_volume(result.delta, case_dir / DELTA_FILE)
            save_volume(mask, case_dir / MASK_FILE)

            metrics = evaluate_masks(mask, pair.gt_mask)
            rows.append({"case": k, **metrics.model_dump(), "achieved_M": result.achieved_M})
            logger.info(
                "case %d: dice %.3f after %d iterations", k, metrics.dice, len(result.loss_trace)
            )
            self._tick("fit", done, len(pairs))

        df = pd.DataFrame(rows, columns=list(METRICS_CSV_COLUMNS))
        _write_table(df, self.out_dir / METRICS_FILE, METRICS_CSV_COLUMNS, ["case"])
        return df.sort_values("case", kind="mergesort").reset_index(drop=True)

    def _weak_label(self, case: CaseInputs, fits: dict[SimilarityVariant, DeltaFitResult]) -> BinaryMask:
        settings = self.cfg.ablation
        if settings.label_source == "self_supervised":
            variant = self.cfg.ssim.variant
            if variant not in fits:
                fits[variant] = self._fit(case, variant)
            return predict_mask(fits[variant].delta, self.cfg.fit.threshold)
        return corrupt_mask(case.pair.gt_mask, self.cfg.corruption_spec(case.index))

    def _ablate_case(self, case: CaseInputs) -> list[dict[str, Any]]:
        settings = self.cfg.ablation
        gt = case.pair.gt_mask
        rows: list[dict[str, Any]] = []

        fits: dict[SimilarityVariant, DeltaFitResult] = {}
        for variant in settings.variants:
            if variant not in fits:
                fits[variant] = self._fit(case, variant)
            mask = predict_mask(fits[variant].delta, self.cfg.fit.threshold)
            rows.append(
                {
                    "case": case.index,
                    "group": SIMILARITY_GROUP,
                    "method": variant.value,
                    **evaluate_masks(mask, gt).model_dump(),
                    "achieved_M": fits[variant].achieved_M,
                }
            )

        label = self._weak_label(case, fits)
        features = standardize_features(voxel_features(case.preop)) + standardize_features(
            voxel_features(case.postop)
        )

        for kind in settings.losses:
            tparams = self.cfg.tdist.initial_params(gt.dims) if kind == LossKind.TD else None
            result = fit_weak(
                features,
                label,
                kind,
                tparams=tparams,
                cfg=self.cfg.weak_fit,
                focal_gamma=settings.focal_gamma,
            )
            pred = binarize(result.predictor.predict(features), self.cfg.weak_fit.threshold)
            rows.append(
                {
                    "case": case.index,
                    "group": LOSS_GROUP,
                    "method": kind.value,
                    **evaluate_masks(pred, gt).model_dump(),
                    "r": result.r,
                    "sigma2": result.sigma2_mean,
                }
            )
        return rows

    def ablate(self, phantom_dir: str | Path | None = None) -> tuple[pd.DataFrame, pd.DataFrame]:
        """
        Weak-label loss ablation and similarity-variant ablation.

        Returns:
            (per-case rows, Wilcoxon rows); both are also written as CSV,
            with a summary.json holding mean ± std per method
        """
        self._start()
        pairs = self._pairs(phantom_dir)
        rows: list[dict[str, Any]] = []
        for done, (k, pair) in enumerate(pairs, start=1):
            rows.extend(self._ablate_case(self._prepare(k, pair)))
            self._tick("ablate", done, len(pairs))

        table = pd.DataFrame(rows).reindex(columns=list(ABLATION_CSV_COLUMNS))
        table = table.sort_values(["group", "method", "case"], kind="mergesort").reset_index(drop=True)
        tests = compare_methods(table, self.cfg.ablation.alpha)

        _write_table(table, self.out_dir / ABLATION_FILE, ABLATION_CSV_COLUMNS, ["group", "method", "case"])
        _write_table(tests, self.out_dir / WILCOXON_FILE, WILCOXON_CSV_COLUMNS, ["group", "metric", "method_b"])
        _write_json(
            self.out_dir / SUMMARY_FILE,
            {
                "methods": summary_to_dict(summarize_table(table)),
                "wilcoxon": json.loads(tests.to_json(orient="records")),
            },
        )
        return table, tests

    def gradcheck(self, seeds: int = 5, probes: int = 20) -> GradcheckReport:
        self._start()
        report = run_gradcheck(seeds=seeds, probes=probes)
        df = pd.DataFrame(
            [{**row.model_dump(), "passed": row.passed} for row in report.rows]
        )
        df.to_csv(self.out_dir / GRADCHECK_FILE, index=False)
        return report

    def eval(self, pred_path: str | Path, gt_path: str | Path) -> CaseMetrics:
        """Metrics between two mask files; writes a one-row metrics.csv."""
        self._start()
        pred, gt = _load_mask(pred_path), _load_mask(gt_path)
        metrics = evaluate_masks(pred, gt)
        df = pd.DataFrame([{"case": Path(pred_path).stem, **metrics.model_dump()}])
        _write_table(df, self.out_dir / METRICS_FILE, METRICS_CSV_COLUMNS, ["case"])
        return metrics

    def report(self, inputs: Sequence[str | Path] = ()) -> dict[str, Any]:
        """
        Aggregate metric CSVs into summary.json.

        With no inputs, the metrics.csv and ablation.csv found in the output
        directory are used.
        """
        paths = [Path(p) for p in inputs] or [
            p for p in (self.out_dir / METRICS_FILE, self.out_dir / ABLATION_FILE) if p.exists()
        ]
        if not paths:
            raise FileNotFoundError(f"no metric tables to report in {self.out_dir}")

        self._start()
        summary = {}
        for path in paths:
            df = pd.read_csv(path)
            if "case" not in df.columns:
                raise CavityLabError(f"{path}: not a metrics table (no 'case' column)")
            summary[path.stem] = summary_to_dict(summarize_table(df))
        _write_json(self.out_dir / SUMMARY_FILE, summary)
        return summary


def _load_mask(path: str | Path) -> BinaryMask:
    field = load_volume(path)
    if not isinstance(field, BinaryMask):
        raise VolumeFormatError(f"{path}: expected a mask (dtype u8), got a scalar field")
    return field


def compare_methods(table: pd.DataFrame, alpha: float = 0.05) -> pd.DataFrame:
    """
    Paired Wilcoxon tests per group: TD against every other loss, and the
    primary similarity variant against every other variant, on Dice and HD95.

    Cases where either side has an undefined metric are dropped from that
    pair. Pairs without a defined test get status ``undefined`` and NaN p.
    """
    references = {LOSS_GROUP: LossKind.TD.value, SIMILARITY_GROUP: SimilarityVariant.CSCC.value}
    rows = []
    for group, reference in references.items():
        in_group = table[table["group"] == group]
        if reference not in set(in_group["method"]):
            continue
        ref_rows = in_group[in_group["method"] == reference].set_index("case")
        for other in sorted(set(in_group["method"]) - {reference}):
            other_rows = in_group[in_group["method"] == other].set_index("case")
            for metric in WILCOXON_METRICS:
                paired = pd.concat(
                    [ref_rows[metric].rename("a"), other_rows[metric].rename("b")], axis=1, join="inner"
                ).dropna()
                row = {
                    "group": group,
                    "metric": metric,
                    "method_a": reference,
                    "method_b": other,
                    "statistic": np.nan,
                    "p_value": np.nan,
                    "n_effective": 0,
                    "test": None,
                    "significant": False,
                    "status": "ok",
                }
                try:
                    result = wilcoxon_signed_rank(paired["a"].to_numpy(), paired["b"].to_numpy())
                except (MetricUndefinedError, ValueError) as e:
                    logger.warning("Wilcoxon %s vs %s on %s undefined: %s", reference, other, metric, e)
                    row["status"] = "undefined"
                else:
                    row.update(
                        statistic=result.statistic,
                        p_value=result.p_value,
                        n_effective=result.n_effective,
                        test=result.method,
                        significant=result.significant(alpha),
                    )
                rows.append(row)
    return pd.DataFrame(rows, columns=list(WILCOXON_CSV_COLUMNS))


def run_command(
    cfg: ExperimentConfig,
    command: str,
    *,
    phantom_dir: str | Path | None = None,
    pred_path: str | Path | None = None,
    gt_path: str | Path | None = None,
    inputs: Sequence[str | Path] = (),
    seeds: int = 5,
    probes: int = 20,
    progress: ProgressCallback | None = None,
    on_result: Callable[[Any], None] | None = None,
) -> int:
    """
    Run one command and map its outcome to an exit code.

    Args:
        on_result: Receives the command's result (written paths, tables,
            gradcheck report, case metrics or summary) once it finished,
            including a gradcheck that failed its tolerances

    Returns:
        0 on success, 1 on config problems or a failed gradcheck, 2 on
        runtime errors such as missing or malformed inputs
    """
    if command not in COMMANDS:
        logger.error("Unknown command %r; expected one of %s", command, ", ".join(COMMANDS))
        return EXIT_VALIDATION

    runner = ExperimentRunner(cfg, progress)
    result: Any
    try:
        if command == "phantom":
            result = runner.phantom()
        elif command == "fit":
            result = runner.fit(phantom_dir)
        elif command == "ablate":
            result = runner.ablate(phantom_dir)
        elif command == "gradcheck":
            result = runner.gradcheck(seeds=seeds, probes=probes)
        elif command == "eval":
            if pred_path is None or gt_path is None:
                logger.error("eval needs a prediction and a ground-truth mask")
                return EXIT_VALIDATION
            result = runner.eval(pred_path, gt_path)
        else:
            result = runner.report(inputs)
    except (CavityLabError, ValidationError, OSError) as e:
        logger.error("%s failed: %s", command, e)
        return exit_code_for(e)

    if on_result is not None:
        on_result(result)
    if isinstance(result, GradcheckReport) and not result.passed:
        logger.error("gradcheck: %d suite(s) failed", len(result.failures))
        return EXIT_VALIDATION
    return EXIT_OK
