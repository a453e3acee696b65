"""
Metrics summary table component.
"""
from typing import Optional

import pandas as pd

HORIZON_ORDER = ["@3", "@6", "@12", "Avg"]
METRIC_LABELS = {"mae": "MAE", "rmse": "RMSE", "mape": "MAPE"}


def create_metrics_table(results: pd.DataFrame, group_by: Optional[str] = "graphs") -> pd.DataFrame:
    """
    Pivot metric rows into a horizon-by-metric table.

    Args:
        results: Rows with horizon, mae, rmse, mape and optionally graphs / seed columns
        group_by: Column naming the model variant ("graphs"), or None for a single model

    Returns:
        DataFrame indexed by (variant, metric) with one column per horizon;
        values are averaged over seeds when several are present
    """
    if results.empty:
        return pd.DataFrame()

    df = results.copy()
    if group_by is None or group_by not in df.columns:
        group_by = "model"
        df[group_by] = "model"

    long = df.melt(id_vars=[group_by, "horizon"], value_vars=list(METRIC_LABELS),
                   var_name="metric", value_name="value")
    long["metric"] = long["metric"].map(METRIC_LABELS)
    table = long.pivot_table(index=[group_by, "metric"], columns="horizon", values="value",
                             aggfunc="mean", sort=False)
    columns = [h for h in HORIZON_ORDER if h in table.columns]
    table = table[columns]
    table.columns.name = None
    return table


def render_metrics_table(table: pd.DataFrame) -> str:
    """Plain-text rendering; MAPE rows are shown as percentages."""
    if table.empty:
        return "(no results)"
    formatted = table.copy().astype(object)
    for idx in formatted.index:
        is_mape = idx[-1] == "MAPE" if isinstance(idx, tuple) else idx == "MAPE"
        for col in formatted.columns:
            val = table.loc[idx, col]
            formatted.loc[idx, col] = f"{val:.2f}%" if is_mape else f"{val:.2f}"
    return formatted.to_string()
