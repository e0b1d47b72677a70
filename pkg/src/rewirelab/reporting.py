"""Tables from experiment summaries, rendered as JSON, CSV or Markdown.

Tables hold plain numbers; the Markdown rendering folds `<arm>_mean` and
`<arm>_std` columns into `mean ± std`, shows the inner share as a rounded
percentage and p-values to three significant digits.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable, Literal, Optional

import pandas as pd

from rewirelab.diagnostics import SCHEMA

logger = logging.getLogger(__name__)

Format = Literal["json", "csv", "markdown"]


def check_schema(summary: dict[str, Any], source: str) -> None:
    """Raise if a summary was written under another schema version."""
    version = summary.get("schema_version")
    if version != SCHEMA:
        raise ValueError(
            f"{source} has schema version {version!r}, expected {SCHEMA!r}"
        )


def load_summary(path: Path) -> dict[str, Any]:
    """Read a `summary.json`.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If its schema version is not the current one.
    """
    if not path.is_file():
        raise FileNotFoundError(f"Summary does not exist at {path}")
    summary = json.loads(path.read_text())
    check_schema(summary, str(path))
    return summary


def _p(test: Optional[dict[str, Any]]) -> Optional[float]:
    if test is None or test.get("degenerate"):
        return None
    return test.get("p_value")


def _arm_columns(arms: dict[str, Any]) -> dict[str, float]:
    columns = {}
    for arm, summary in arms.items():
        columns[f"{arm}_mean"] = summary["mean"]
        columns[f"{arm}_std"] = summary["std"]
    return columns


def decomposition_row(name: str, report: dict[str, Any]) -> dict[str, Any]:
    """One row in the layout of a decomposition table."""
    ci = report.get("share_ci") or {}
    return {
        "name": name,
        **_arm_columns(report["arms"]),
        "delta_inner": report["delta_inner"],
        "delta_graph": report["delta_graph"],
        "delta_total": report["delta_total"],
        "inner_share": report["inner_share"],
        "share_ci_low": ci.get("low"),
        "share_ci_high": ci.get("high"),
        "na_reason": report["na_reason"],
        "p_total": _p(report["p_total"]),
        "p_graph": _p(report["p_graph"]),
        "p_inner": _p(report["p_inner"]),
        "seeds": len(report["seeds"]),
    }


def sweep_rows(name: str, sweep: dict[str, Any]) -> list[dict[str, Any]]:
    rows = []
    for point in sweep["points"]:
        row = {
            "name": name,
            sweep["axis"]: point["value"],
            **_arm_columns(point["arms"]),
        }
        decomposition = point.get("decomposition")
        if decomposition is not None:
            row.update(
                delta_inner=decomposition["delta_inner"],
                delta_graph=decomposition["delta_graph"],
                delta_total=decomposition["delta_total"],
                inner_share=decomposition["inner_share"],
                p_graph=_p(decomposition["p_graph"]),
            )
        if point.get("graph_hash"):
            row["graph_hash"] = point["graph_hash"][:12]
        rows.append(row)
    return rows


def summary_tables(summary: dict[str, Any]) -> dict[str, pd.DataFrame]:
    """Every table an experiment summary gives rise to, keyed by name."""
    name = summary["name"]
    kind = summary["experiment"]
    report = summary["report"]
    tables: dict[str, list[dict[str, Any]]] = {}

    if not report:
        return {}
    if kind == "decompose":
        decomposition = report["decomposition"]
        tables["decomposition"] = [decomposition_row(name, decomposition)]
        for h, step in enumerate(decomposition.get("per_horizon") or []):
            tables.setdefault("per_horizon", []).append(
                {"name": name, "horizon": h + 1, **step}
            )
        for key in ("weight_decay_sweep", "compute_matched"):
            if key in report:
                tables[key] = sweep_rows(name, report[key])
        if "e2e_comparison" in report:
            e2e = report["e2e_comparison"]
            tables["e2e_comparison"] = [
                {
                    "name": name,
                    **_arm_columns(e2e["arms"]),
                    "bilevel_gain": e2e["bilevel_gain"],
                    "e2e_gain": e2e["e2e_gain"],
                    "p_bilevel_vs_e2e": _p(e2e["p_bilevel_vs_e2e"]),
                }
            ]
        for key in ("edge_probabilities", "dirichlet"):
            for seed, values in report.get(key, {}).items():
                row = {
                    k: v
                    for k, v in values.items()
                    if not isinstance(v, list)
                    and k not in ("schema_version", "config_hash")
                }
                tables.setdefault(key, []).append(
                    {"name": name, "seed": int(seed), **row}
                )
    elif kind in ("tsweep", "corruption"):
        tables[kind] = sweep_rows(name, report)
    elif kind == "distill":
        tables["distill"] = [
            {
                "name": name,
                **_arm_columns(report["arms"]),
                "graph_share": report["graph_share"],
                "p_distilled": _p(report["p_distilled"]),
                "distilled_edges": report["distilled_edges"],
            }
        ]
    elif kind == "train":
        tables["runs"] = [
            {"name": name, "arm": report["arm"], **run}
            for run in report["runs"]
        ]
        for run in tables["runs"]:
            run.pop("per_horizon_test", None)
    elif kind == "jacobian":
        tables["jacobian"] = [
            {
                "name": name,
                "arm": report["arm"],
                "seed": int(seed),
                **stratum,
                "unreachable_pairs": seed_report.get("unreachable_pairs", 0),
            }
            for seed, seed_report in report["seeds"].items()
            for stratum in seed_report["strata"]
        ]
    elif kind == "spectra":
        spectrum = report["spectrum"]
        tables["eigenvalues"] = [
            {"name": name, "index": i, "eigenvalue": value}
            for i, value in enumerate(spectrum["eigenvalues"])
        ]
        tables["spectra"] = [
            {
                "name": name,
                "graph": "init",
                "lcc_size": spectrum["lcc_size"],
                "lambda2": spectrum["lambda2"],
                "w_eps": spectrum["w_eps"],
                "whole_graph_lambda2": spectrum["whole_graph_lambda2"],
                "dirichlet_energy": report["dirichlet_energy"],
            }
        ]
        for comparison in report["comparisons"]:
            other = comparison["spectrum"]
            tightening = comparison["tightening"]
            tables["spectra"].append(
                {
                    "name": name,
                    "graph": comparison["path"],
                    "lcc_size": other["lcc_size"],
                    "lambda2": other["lambda2"],
                    "w_eps": other["w_eps"],
                    "whole_graph_lambda2": other["whole_graph_lambda2"],
                    "dirichlet_energy": comparison["dirichlet_energy"],
                    "tightening_applicable": tightening["applicable"],
                    "improved": tightening["improved"],
                }
            )
    elif kind == "igr-oracle":
        tables["igr"] = [{"name": name, **p} for p in report["points"]]
        tables["igr_slopes"] = [
            {
                "name": name,
                "slope_plain": report["slope_plain"],
                "slope_modified": report["slope_modified"],
            }
        ]
    elif kind == "bandwidth-ablation":
        tables["bandwidth"] = [{"name": name, **r} for r in report["rows"]]

    return {key: pd.DataFrame(rows) for key, rows in tables.items()}


def merge_tables(
    summaries: Iterable[dict[str, Any]],
) -> dict[str, pd.DataFrame]:
    """Tables of several summaries, same-named tables stacked."""
    merged: dict[str, list[pd.DataFrame]] = {}
    for summary in summaries:
        for key, frame in summary_tables(summary).items():
            merged.setdefault(key, []).append(frame)
    return {
        key: pd.concat(frames, ignore_index=True)
        for key, frames in merged.items()
    }


def _format_cell(column: str, value: Any) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a" if column in ("inner_share", "graph_share") else ""
    if column in ("inner_share", "graph_share"):
        return f"{round(value)}%"
    if column.startswith("p_"):
        return f"{value:.3g}"
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def display_frame(frame: pd.DataFrame) -> pd.DataFrame:
    """Strings for display, with mean and std folded together."""
    columns: dict[str, list[str]] = {}
    for column in frame.columns:
        if column.endswith("_std") and f"{column[:-4]}_mean" in frame:
            continue
        if column.endswith("_mean") and f"{column[:-5]}_std" in frame:
            arm = column[:-5]
            columns[arm] = [
                f"{m:.3f} ± {s:.3f}"
                for m, s in zip(frame[column], frame[f"{arm}_std"])
            ]
            continue
        columns[column] = [
            _format_cell(column, None if pd.isna(v) else v)
            for v in frame[column].astype(object)
        ]
    return pd.DataFrame(columns)


def to_markdown(frame: pd.DataFrame) -> str:
    display = display_frame(frame)
    lines = [
        "| " + " | ".join(display.columns) + " |",
        "|" + "|".join("---" for _ in display.columns) + "|",
    ]
    for row in display.itertuples(index=False):
        lines.append("| " + " | ".join(str(v) for v in row) + " |")
    return "\n".join(lines)


def render(tables: dict[str, pd.DataFrame], fmt: Format) -> str:
    """Render tables; several tables are separated by their titles."""
    if fmt == "json":
        return json.dumps(
            {
                key: json.loads(frame.to_json(orient="records"))
                for key, frame in tables.items()
            },
            indent=2,
        )

    blocks = []
    for key, frame in tables.items():
        if fmt == "csv":
            body = frame.to_csv(index=False).rstrip("\n")
        else:
            body = to_markdown(frame)
        blocks.append(body if len(tables) == 1 else f"## {key}\n\n{body}")
    return "\n\n".join(blocks)


def write_tables(summary: Any, root: Path) -> list[Path]:
    """Write each table of a summary as `<root>/<table>.csv`."""
    if hasattr(summary, "model_dump"):
        summary = summary.model_dump()
    paths = []
    for key, frame in summary_tables(summary).items():
        path = root / f"{key}.csv"
        frame.to_csv(path, index=False)
        paths.append(path)
    logger.debug("Wrote %d tables to %s", len(paths), root)
    return paths
