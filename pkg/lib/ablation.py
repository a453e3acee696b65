"""
Graph ablation: train and test one model per (graph subset, seed) pair.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import pandas as pd

from lib.error_calculator import ErrorCalculator
from lib.errors import DataError
from lib.graphs import graph_label
from lib.model import DFDGCN
from lib.pipeline import Experiment
from lib.trainer import TrainConfig, fit

logger = logging.getLogger(__name__)

TABLE_ORDER = ("P", "SA", "D", "T", "P+SA", "D+P", "D+SA", "D+P+SA")
RESULT_COLUMNS = ["graphs", "seed", "horizon", "mae", "rmse", "mape"]


def _run_cell(experiment: Experiment, graph_mode: frozenset, seed: int,
              train_config: TrainConfig) -> List[dict]:
    model_config = replace(experiment.model_config, graph_mode=frozenset(graph_mode)).validate()
    supports = experiment.supports if "P" in graph_mode else None
    if "P" in graph_mode and supports is None:
        raise DataError("predefined graph requires distances")
    model = DFDGCN(model_config, supports=supports, seed=seed)
    result = fit(model, experiment.train, experiment.val, experiment.normalizer,
                 replace(train_config, seed=seed, progress=False))
    report = ErrorCalculator(experiment.test, train_config.batch_size).evaluate(
        lambda batch: model.predict(batch, experiment.normalizer)
    )
    label = graph_label(graph_mode)
    logger.info("ablation %s seed %d: test MAE %.4f (best epoch %d)",
                label, seed, report["Avg"].mae, result.best_epoch)
    return [
        {"graphs": label, "seed": seed, "horizon": h, "mae": cell.mae, "rmse": cell.rmse,
         "mape": cell.mape}
        for h, cell in report.cells.items()
    ]


def _order_key(label: str) -> Tuple[int, str]:
    return (TABLE_ORDER.index(label) if label in TABLE_ORDER else len(TABLE_ORDER), label)


def run_ablation(experiment: Experiment, grid: Sequence[Iterable[str]], seeds: Sequence[int],
                 train_config: TrainConfig, workers: int = 1,
                 out_dir: Optional[Union[str, Path]] = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Train every graph subset of `grid` once per seed and score it on the test split.

    Cells are independent; with workers > 1 they run in a process pool.

    Returns:
        Tuple of (per-seed results, mean over seeds); both are also written
        to `out_dir` as ablation.csv and ablation_mean.csv when given
    """
    cells = [(frozenset(mode), int(seed)) for mode in grid for seed in seeds]
    logger.info("Ablation: %d graph subsets x %d seeds on %d workers", len(grid), len(seeds), workers)
    rows: List[dict] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell, experiment, mode, seed, train_config) for mode, seed in cells]
            for future in futures:
                rows.extend(future.result())
    else:
        for mode, seed in cells:
            rows.extend(_run_cell(experiment, mode, seed, train_config))

    results = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    results["_order"] = results["graphs"].map(lambda label: _order_key(label)[0])
    results = results.sort_values(["_order", "seed"], kind="stable").drop(columns="_order")
    results = results.reset_index(drop=True)
    means = summarize_ablation(results)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        results.to_csv(out_dir / "ablation.csv", index=False, float_format="%.6f")
        means.to_csv(out_dir / "ablation_mean.csv", index=False, float_format="%.6f")
        logger.info("Wrote ablation results to %s", out_dir)
    return results, means


def summarize_ablation(results: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard deviation of each metric over seeds, per graph subset and horizon."""
    grouped = results.groupby(["graphs", "horizon"], sort=False)[["mae", "rmse", "mape"]]
    means = grouped.agg(["mean", "std"])
    means.columns = [f"{metric}_{stat}" for metric, stat in means.columns]
    means = means.reset_index()
    means["seeds"] = results.groupby(["graphs", "horizon"], sort=False)["seed"].nunique().to_numpy()
    return means
