"""
CavityLab Export Module

Exports metric tables, summaries and gradient-check reports to JSON or CSV,
either to a file or to stdout (``-``), for downstream analysis and plotting.
"""

import json
import math
import sys
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any

import pandas as pd

from cavitylab import __version__
from cavitylab.core.exceptions import CavityLabError
from cavitylab.core.gradcheck import GradcheckReport


class ExportFormat(str, Enum):
    """Supported export formats."""

    JSON = "json"
    CSV = "csv"


class ExportError(CavityLabError):
    """Raised when export operation fails."""

    pass


def detect_format(output_path: str) -> ExportFormat | None:
    """
    Auto-detect export format from file extension.

    Args:
        output_path: Path to output file

    Returns:
        ExportFormat if detected, None if unknown extension
    """
    if output_path == "-":
        return None  # Stdout requires explicit format

    format_map = {
        ".json": ExportFormat.JSON,
        ".csv": ExportFormat.CSV,
    }
    return format_map.get(Path(output_path).suffix.lower())


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_json_safe(v) for v in value]
    return value


def _envelope(data: Any, command: str) -> dict:
    return {
        "command": command,
        "timestamp": datetime.now().isoformat(),
        "version": __version__,
        "data": _json_safe(data),
    }


def summary_to_rows(summary: dict[str, Any]) -> list[dict]:
    """
    Flatten a ``{method: {metric: stats}}`` summary into one row per pair.

    Summaries nested one level deeper (``{table: {method: ...}}``, as the
    report command writes) get a leading ``table`` column.
    """
    rows = []
    for key, block in summary.items():
        sample = next(iter(block.values()), None) if isinstance(block, dict) else None
        if isinstance(sample, dict) and "mean" in sample:
            rows.extend({"method": key, "metric": metric, **stats} for metric, stats in block.items())
        elif isinstance(block, dict):
            rows.extend({"table": key, **row} for row in summary_to_rows(block))
    return rows


def _write(payload_json: dict, frame: pd.DataFrame, output: str | Path, format: ExportFormat) -> None:
    try:
        if str(output) == "-":
            if format == ExportFormat.JSON:
                json.dump(payload_json, sys.stdout, indent=2, default=str)
                sys.stdout.write("\n")
            elif format == ExportFormat.CSV:
                frame.to_csv(sys.stdout, index=False)
        else:
            output_path = Path(output)
            output_path.parent.mkdir(parents=True, exist_ok=True)

            if format == ExportFormat.JSON:
                with open(output_path, "w") as f:
                    json.dump(payload_json, f, indent=2, default=str)
            elif format == ExportFormat.CSV:
                frame.to_csv(output_path, index=False)

    except PermissionError as e:
        raise ExportError(f"Permission denied writing to {output}: {e}")
    except OSError as e:
        raise ExportError(f"Failed to write to {output}: {e}")
    except Exception as e:
        raise ExportError(f"Export failed: {e}")


def export_table(
    df: pd.DataFrame,
    output: str | Path,
    format: ExportFormat,
    command: str = "fit",
) -> None:
    """
    Export a per-case metrics table.

    Args:
        df: Rows as written to metrics.csv / ablation.csv
        output: Output file path or '-' for stdout
        format: Export format (JSON or CSV)
        command: Command that generated this table

    Raises:
        ExportError: If export fails
    """
    records = json.loads(df.to_json(orient="records"))
    _write(_envelope({"rows": records}, command), df, output, format)


def export_summary(
    summary: dict[str, Any],
    output: str | Path,
    format: ExportFormat,
    command: str = "report",
) -> None:
    """Export a mean ± std summary; CSV gets one row per method and metric."""
    _write(_envelope(summary, command), pd.DataFrame(summary_to_rows(summary)), output, format)


def export_gradcheck(
    report: GradcheckReport,
    output: str | Path,
    format: ExportFormat,
    command: str = "gradcheck",
) -> None:
    rows = [{**row.model_dump(), "passed": row.passed} for row in report.rows]
    _write(
        _envelope({"passed": report.passed, "suites": rows}, command),
        pd.DataFrame(rows),
        output,
        format,
    )
