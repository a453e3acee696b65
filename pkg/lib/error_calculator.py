"""
Forecast error calculation: masked MAE / RMSE / MAPE at fixed horizons and
the historical-inertia baseline.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from lib.data_processor import WindowBatch, WindowSource
from lib.errors import DataError
from lib.numerics import Operand, masked_abs_mean

logger = logging.getLogger(__name__)

HORIZONS = (3, 6, 12)
HI_RULES = ("last_value", "periodic_2016")
WEEK_STEPS = 2016

Predictor = Callable[[WindowBatch], np.ndarray]


def masked_mae_loss(pred: Operand, target: np.ndarray):
    """Training loss: mean |pred - target| over nonzero targets, 0 when everything is masked."""
    return masked_abs_mean(pred, target)


@dataclass
class MetricCell:
    mae: float
    rmse: float
    mape: float
    count: int


@dataclass
class MetricsReport:
    """Metrics per horizon label ("@3", "@6", "@12") plus "Avg" over all horizons."""

    cells: Dict[str, MetricCell]

    def __getitem__(self, label: str) -> MetricCell:
        return self.cells[label]

    @property
    def labels(self) -> List[str]:
        return list(self.cells)

    def to_frame(self) -> pd.DataFrame:
        """One row per horizon label with mae, rmse, mape (percent) and count."""
        rows = [
            {"horizon": label, "mae": c.mae, "rmse": c.rmse, "mape": c.mape, "count": c.count}
            for label, c in self.cells.items()
        ]
        return pd.DataFrame(rows, columns=["horizon", "mae", "rmse", "mape", "count"])


def _masked_cell(pred: np.ndarray, target: np.ndarray, label: str) -> MetricCell:
    mask = target != 0.0
    count = int(mask.sum())
    if count == 0:
        logger.warning("All targets masked for horizon %s; metrics undefined", label)
        return MetricCell(mae=float("nan"), rmse=float("nan"), mape=float("nan"), count=0)
    err = pred[mask] - target[mask]
    return MetricCell(
        mae=float(np.abs(err).mean()),
        rmse=float(np.sqrt(np.square(err).mean())),
        mape=float((np.abs(err) / np.abs(target[mask])).mean() * 100.0),
        count=count,
    )


def compute_metrics(pred: np.ndarray, target: np.ndarray,
                    horizons: Sequence[int] = HORIZONS) -> MetricsReport:
    """
    Masked errors where target == 0 is excluded from every average.

    Args:
        pred: Forecasts [..., H] in original units
        target: Ground truth with the same shape
        horizons: 1-based horizons to report individually

    Returns:
        MetricsReport with "@h" cells and an "Avg" cell over all H horizons
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DataError(f"prediction shape {pred.shape} != target shape {target.shape}")
    n_horizons = pred.shape[-1]
    cells = {}
    for h in horizons:
        if h <= n_horizons:
            cells[f"@{h}"] = _masked_cell(pred[..., h - 1], target[..., h - 1], f"@{h}")
    cells["Avg"] = _masked_cell(pred, target, "Avg")
    return MetricsReport(cells)


def hi_baseline(window: np.ndarray, t_out: int = 12, target_channel: int = 0) -> np.ndarray:
    """
    Last-value historical inertia: repeat the newest input reading.

    Args:
        window: [N, C, T] or [B, N, C, T] input in original units

    Returns:
        [N, t_out] or [B, N, t_out] forecast
    """
    x = np.asarray(window, dtype=np.float64)
    last = x[..., target_channel, -1]
    return np.repeat(last[..., None], t_out, axis=-1)


def hi_periodic(history: np.ndarray, start: np.ndarray, t_in: int = 12, t_out: int = 12,
                period: int = WEEK_STEPS, target_channel: int = 0) -> np.ndarray:
    """
    Periodic historical inertia: replay the reading from one period earlier.

    Windows without a full period of history fall back to last-value.

    Args:
        history: Unsplit series [time, node, channel]
        start: First input step of each window within `history`
        t_in: Input window length
        t_out: Forecast horizon
        period: Steps per period (2016 = one week of 5-minute steps)

    Returns:
        [B, N, t_out] forecast
    """
    start = np.asarray(start, dtype=np.int64)
    steps = start[:, None] + t_in + np.arange(t_out)[None, :] - period
    last = start + t_in - 1
    short = steps.min(axis=1) < 0
    if np.any(short):
        logger.debug("%d windows lack %d steps of history; using last value", int(short.sum()), period)
    steps = np.where(short[:, None], last[:, None], steps)
    series = history[:, :, target_channel]
    return np.transpose(series[steps], (0, 2, 1))


class HistoricalInertia:
    """Baseline predictor following one of HI_RULES."""

    def __init__(self, source: WindowSource, rule: str = "last_value"):
        if rule not in HI_RULES:
            raise DataError(f"unknown HI rule '{rule}', expected one of {HI_RULES}")
        self.source = source
        self.rule = rule

    def __call__(self, batch: WindowBatch) -> np.ndarray:
        src = self.source
        if self.rule == "periodic_2016":
            return hi_periodic(src.dataset.history, batch.start, src.t_in, src.t_out,
                               target_channel=src.target_channel)
        raw = src.normalizer.inverse(np.transpose(batch.x, (0, 1, 3, 2)))
        return hi_baseline(np.transpose(raw, (0, 1, 3, 2)), src.t_out, src.target_channel)


class ErrorCalculator:
    """Runs a predictor over every window of a split and scores it."""

    def __init__(self, source: WindowSource, batch_size: int = 64):
        self.source = source
        self.batch_size = batch_size

    def predictions(self, predictor: Predictor) -> Tuple[np.ndarray, np.ndarray]:
        """Stacked (forecast, target), each [S, N, t_out] in original units."""
        preds, targets = [], []
        for batch in self.source.batches(self.batch_size):
            preds.append(np.asarray(predictor(batch)))
            targets.append(batch.y)
        return np.concatenate(preds), np.concatenate(targets)

    def evaluate(self, predictor: Predictor) -> MetricsReport:
        pred, target = self.predictions(predictor)
        return compute_metrics(pred, target)

    @staticmethod
    def prediction_frame(pred: np.ndarray, target: np.ndarray) -> pd.DataFrame:
        """Long-format dump with columns sample, node, horizon (1-based), prediction, target."""
        samples, nodes, horizons = pred.shape
        grid = np.indices((samples, nodes, horizons)).reshape(3, -1)
        return pd.DataFrame({
            "sample": grid[0],
            "node": grid[1],
            "horizon": grid[2] + 1,
            "prediction": pred.ravel(),
            "target": target.ravel(),
        })
