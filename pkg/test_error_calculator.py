"""
Tests for masked metrics, the historical-inertia baseline, the metrics table
and the graph ablation driver.
"""
import logging
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from components.tables.metrics_table import create_metrics_table, render_metrics_table
from lib.ablation import RESULT_COLUMNS, run_ablation
from lib.config import load_run_config
from lib.data_processor import Normalizer, WindowSource
from lib.error_calculator import (
    ErrorCalculator,
    HistoricalInertia,
    compute_metrics,
    hi_baseline,
)
from lib.errors import DataError
from lib.graphs import parse_graph_mode
from lib.pipeline import prepare_experiment, train_config_from
from lib.synth_generator import synth_timeshift


def test_masked_metrics():
    target = np.arange(1.0, 13.0).reshape(1, 1, 12)
    target[..., 5] = 0.0
    pred = target + 2.0
    report = compute_metrics(pred, target)
    assert report.labels == ["@3", "@6", "@12", "Avg"]
    assert report["@3"].mae == pytest.approx(2.0)
    assert report["@3"].rmse == pytest.approx(2.0)
    assert report["@3"].mape == pytest.approx(200.0 / 3.0)
    assert report["@12"].mape == pytest.approx(200.0 / 12.0)
    assert report["Avg"].count == 11
    assert report["Avg"].mae == pytest.approx(2.0)


def test_fully_masked_horizon_is_nan(caplog):
    target = np.ones((2, 3, 12))
    target[..., 5] = 0.0
    with caplog.at_level(logging.WARNING, logger="lib.error_calculator"):
        report = compute_metrics(np.zeros_like(target), target)
    assert np.isnan(report["@6"].mae) and report["@6"].count == 0
    assert report["@3"].mae == pytest.approx(1.0)
    assert "@6" in caplog.text


def test_metrics_ignore_sample_order(rng):
    pred, target = rng.uniform(1, 5, size=(6, 4, 12)), rng.uniform(1, 5, size=(6, 4, 12))
    order = rng.permutation(6)
    a, b = compute_metrics(pred, target), compute_metrics(pred[order], target[order])
    for label in a.labels:
        assert a[label].mae == pytest.approx(b[label].mae, rel=1e-12)
        assert a[label].rmse == pytest.approx(b[label].rmse, rel=1e-12)


def test_metrics_shape_checked():
    with pytest.raises(DataError, match="shape"):
        compute_metrics(np.zeros((2, 12)), np.zeros((3, 12)))


def test_report_frame():
    frame = compute_metrics(np.full((1, 2, 12), 3.0), np.full((1, 2, 12), 2.0)).to_frame()
    assert list(frame.columns) == ["horizon", "mae", "rmse", "mape", "count"]
    assert frame["mape"].tolist() == [50.0] * 4


def test_last_value_baseline(tiny_source, tiny_dataset):
    batch = tiny_source.batch([0, 40])
    pred = HistoricalInertia(tiny_source, "last_value")(batch)
    assert pred.shape == (2, 4, 12)
    for b, start in enumerate(batch.start):
        assert np.allclose(pred[b], tiny_dataset.values[start + 11, :, 0][:, None])
    window = np.arange(24.0).reshape(2, 1, 12)
    assert hi_baseline(window, t_out=3).tolist() == [[11.0, 11.0, 11.0], [23.0, 23.0, 23.0]]


def test_weekly_baseline_is_exact_on_periodic_series():
    dataset = synth_timeshift(3, 288 * 8, {2: (0, 2)}, noise_sigma=0.0, seed=2)
    late = dataset.slice(2016, dataset.n_steps)
    source = WindowSource(late, Normalizer.fit(dataset), max_windows=20)
    report = ErrorCalculator(source, batch_size=8).evaluate(HistoricalInertia(source, "periodic_2016"))
    assert report["Avg"].mae < 1e-8


def test_weekly_baseline_falls_back_without_history(tiny_source):
    batch = tiny_source.batch([3])
    weekly = HistoricalInertia(tiny_source, "periodic_2016")(batch)
    last = HistoricalInertia(tiny_source, "last_value")(batch)
    assert np.allclose(weekly, last)
    with pytest.raises(DataError, match="unknown HI rule"):
        HistoricalInertia(tiny_source, "yesterday")


def test_prediction_frame():
    pred = np.arange(24.0).reshape(2, 3, 4)
    frame = ErrorCalculator.prediction_frame(pred, pred + 1.0)
    assert len(frame) == 24
    assert frame.iloc[5].to_dict() == {"sample": 0, "node": 1, "horizon": 2, "prediction": 5.0, "target": 6.0}


def test_metrics_table_averages_seeds():
    rows = []
    for seed, offset in ((0, 0.0), (1, 2.0)):
        for horizon in ("@3", "@6", "@12", "Avg"):
            rows.append({"graphs": "D+P+SA", "seed": seed, "horizon": horizon,
                         "mae": 1.0 + offset, "rmse": 2.0 + offset, "mape": 10.0 + offset})
    table = create_metrics_table(pd.DataFrame(rows))
    assert list(table.columns) == ["@3", "@6", "@12", "Avg"]
    assert table.loc[("D+P+SA", "MAE"), "@6"] == pytest.approx(2.0)
    assert table.loc[("D+P+SA", "MAPE"), "Avg"] == pytest.approx(11.0)
    text = render_metrics_table(table)
    assert "11.00%" in text and "3.00" in text
    assert render_metrics_table(create_metrics_table(pd.DataFrame())) == "(no results)"


def test_ablation_grid(toy_config, tmp_path):
    run_config = load_run_config(toy_config)
    experiment = prepare_experiment(run_config)
    results, means = run_ablation(experiment, run_config.get("run", "ablation_grid"), [0, 1],
                                  train_config_from(run_config), out_dir=tmp_path / "abl")
    assert list(results.columns) == RESULT_COLUMNS
    assert results["graphs"].drop_duplicates().tolist() == ["SA", "D+P"]
    assert len(results) == 2 * 2 * 4
    assert np.all(np.isfinite(results["mae"]))
    assert means["seeds"].tolist() == [2] * 8
    written = pd.read_csv(tmp_path / "abl" / "ablation.csv")
    assert list(written.columns) == ["graphs", "seed", "horizon", "mae", "rmse", "mape"]
    assert (tmp_path / "abl" / "ablation_mean.csv").exists()
    table = create_metrics_table(results)
    assert set(table.index.get_level_values(0)) == {"SA", "D+P"}


@pytest.mark.slow
def test_frequency_graph_beats_time_graph_on_synthetic_benchmark(tmp_path, monkeypatch):
    monkeypatch.delenv("DFDGCN_THREADS", raising=False)
    config_path = Path(__file__).parent / "configs" / "ablation_synthetic.conf"
    run_config = load_run_config(config_path, {("run", "output_dir"): str(tmp_path)})
    assert run_config.get("data", "synth_nodes") == 20
    assert run_config.get("data", "synth_noise") == 0.3
    assert run_config.get("run", "ablation_seeds") == 3
    experiment = prepare_experiment(run_config)
    grid = [parse_graph_mode(mode) for mode in ("D", "T", "SA", "D,SA")]
    _, means = run_ablation(experiment, grid, [0, 1, 2], train_config_from(run_config),
                            workers=run_config.get("run", "workers"), out_dir=tmp_path)
    avg_mae = means[means["horizon"] == "Avg"].set_index("graphs")["mae_mean"]
    assert avg_mae["D"] < avg_mae["T"]
    assert avg_mae["D+SA"] <= avg_mae["SA"]
