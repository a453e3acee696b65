"""
Tests for the optimizer, early stopping and divergence handling.
"""
import numpy as np
import pytest

import lib.model
import lib.trainer as trainer
from lib.data_processor import Normalizer, WindowSource, split
from lib.error_calculator import MetricCell, MetricsReport
from lib.errors import ConfigError, NumericsError, TrainingDivergedError
from lib.graphs import build_predefined
from lib.model import DFDGCN, ModelParams
from lib.numerics import Tape, add, mul, reduce_sum, value
from lib.synth_generator import synth_timeshift
from lib.trainer import (
    HISTORY_COLUMNS,
    AdamState,
    TrainConfig,
    fit,
    global_norm,
    grad_check,
    masked_mae_loss,
    optimizer_step,
)


@pytest.fixture
def small_params():
    return ModelParams({"w": np.array([1.0, -2.0, 3.0]), "b": np.array([[0.5]])})


@pytest.fixture
def sources(tiny_splits):
    train, val, _ = tiny_splits
    normalizer = Normalizer.fit(train)
    return (WindowSource(train, normalizer, max_windows=24),
            WindowSource(val, normalizer, max_windows=8), normalizer)


class ScriptedScorer:
    """Stands in for ErrorCalculator, replaying a fixed validation MAE per epoch."""

    script = []

    def __init__(self, source, batch_size=64):
        self.calls = iter(type(self).script)

    def evaluate(self, predictor):
        mae = next(self.calls)
        return MetricsReport({"Avg": MetricCell(mae=mae, rmse=mae * 1.5, mape=10.0, count=1)})


def test_masked_mae_loss_examples():
    assert float(masked_mae_loss(np.array([1.0, 2.0]), np.array([1.0, 3.0]))) == pytest.approx(0.5)
    assert float(masked_mae_loss(np.array([9.0, 5.0]), np.array([0.0, 5.0]))) == 0.0

    tape = Tape()
    pred = tape.parameter("pred", np.array([9.0, 4.0]))
    grads = tape.backward(masked_mae_loss(pred, np.array([0.0, 5.0])))
    assert grads["pred"].tolist() == [0.0, -1.0]


def test_batch_loss_is_masked_mae_of_denormalised_forecast(monkeypatch, make_config, tiny_supports, sources):
    train, _, normalizer = sources
    model = DFDGCN(make_config(), supports=tiny_supports, seed=0)
    batch = train.batch(np.array([0, 1]))
    seen = []

    def spy(pred, target):
        seen.append(target)
        return masked_mae_loss(pred, target)

    monkeypatch.setattr(lib.model, "masked_mae_loss", spy)
    loss = model.batch_loss(batch, normalizer, Tape())
    assert len(seen) == 1 and seen[0] is batch.y
    expected = masked_mae_loss(model.predict(batch, normalizer), batch.y)
    assert float(value(loss)) == pytest.approx(float(expected), rel=1e-12)


def test_zero_gradient_leaves_params(small_params):
    grads = {"w": np.zeros(3), "b": np.zeros((1, 1))}
    new, state = optimizer_step(small_params, grads, AdamState.create(small_params), lr=0.1)
    assert np.array_equal(new["w"], small_params["w"])
    assert state.step == 1


def test_first_adam_step_follows_gradient_sign(small_params):
    grads = {"w": np.array([0.2, -0.5, 0.0]), "b": np.array([[-1.0]])}
    new, _ = optimizer_step(small_params, grads, AdamState.create(small_params), lr=0.01)
    assert np.allclose(new["w"], [0.99, -1.99, 3.0], atol=1e-6)
    assert np.allclose(new["b"], [[0.51]], atol=1e-6)


def test_gradients_clipped_to_global_norm(small_params):
    grads = {"w": np.array([6.0, 0.0, 0.0]), "b": np.array([[8.0]])}
    assert global_norm(grads) == pytest.approx(10.0)
    _, state = optimizer_step(small_params, grads, AdamState.create(small_params), lr=0.01, grad_clip=5.0)
    assert np.allclose(state.m["w"], [0.3, 0.0, 0.0])
    assert np.allclose(state.m["b"], [[0.4]])


def test_optimizer_rejects_bad_gradients(small_params):
    state = AdamState.create(small_params)
    with pytest.raises(NumericsError, match="non-finite"):
        optimizer_step(small_params, {"w": np.array([np.nan, 0.0, 0.0]), "b": np.zeros((1, 1))}, state, 0.1)
    with pytest.raises(NumericsError, match="no gradient"):
        optimizer_step(small_params, {"w": np.zeros(3)}, state, 0.1)


def test_grad_check_on_smooth_function(small_params):
    def loss_fn(params, tape):
        w = tape.parameter("w", params["w"])
        b = tape.parameter("b", params["b"])
        return add(reduce_sum(mul(mul(w, w), w)), reduce_sum(mul(b, b)))

    report = grad_check(loss_fn, small_params)
    assert report.passed
    assert report.checked == 4
    assert report.skipped_kinks == 0
    assert report.max_rel_error < 1e-6


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(patience=0).validate()


def test_early_stopping_keeps_best_epoch(monkeypatch, make_config, tiny_supports, sources):
    train, val, normalizer = sources
    ScriptedScorer.script = [5.0, 4.0, 4.5, 4.2, 4.1, 3.0]
    monkeypatch.setattr(trainer, "ErrorCalculator", ScriptedScorer)
    model = DFDGCN(make_config(), supports=tiny_supports, seed=0)

    snapshots = {}
    original = trainer.optimizer_step

    def recording_step(params, grads, state, lr, grad_clip=5.0):
        new, state = original(params, grads, state, lr, grad_clip)
        snapshots[state.step] = new.copy()
        return new, state

    monkeypatch.setattr(trainer, "optimizer_step", recording_step)
    result = fit(model, train, val, normalizer, TrainConfig(max_epochs=20, patience=3, batch_size=12))

    assert result.stopped_early
    assert result.best_epoch == 2
    assert result.best_val_mae == 4.0
    assert list(result.history.columns) == HISTORY_COLUMNS
    assert result.history["epoch"].tolist() == [1, 2, 3, 4, 5]
    assert (result.history["seconds"] == 0.0).all()
    # two batches of 12 windows per epoch
    best = snapshots[4]
    for name, arr in result.params.items():
        assert np.array_equal(arr, best[name])
        assert np.array_equal(model.params[name], arr)


def test_training_is_deterministic(make_config, tiny_supports, sources):
    train, val, normalizer = sources
    config = TrainConfig(max_epochs=2, patience=5, batch_size=8, seed=4)
    runs = []
    for _ in range(2):
        model = DFDGCN(make_config(), supports=tiny_supports, seed=4)
        runs.append(fit(model, train, val, normalizer, config))
    assert runs[0].history.equals(runs[1].history)
    assert np.array_equal(runs[0].params.to_vector(), runs[1].params.to_vector())


def test_divergence_returns_last_good_params(monkeypatch, make_config, tiny_supports, sources):
    train, val, normalizer = sources
    model = DFDGCN(make_config(), supports=tiny_supports, seed=0)
    initial = model.params.copy()
    real = model.loss_and_grads
    calls = {"n": 0}

    def exploding(batch, norm):
        calls["n"] += 1
        loss, grads = real(batch, norm)
        return (float("nan") if calls["n"] == 2 else loss), grads

    monkeypatch.setattr(model, "loss_and_grads", exploding)
    with pytest.raises(TrainingDivergedError, match="epoch 1") as info:
        fit(model, train, val, normalizer, TrainConfig(max_epochs=3, batch_size=12))
    assert list(info.value.history.columns) == HISTORY_COLUMNS
    assert info.value.history.empty
    assert np.array_equal(info.value.params.to_vector(), initial.to_vector())


@pytest.mark.slow
def test_overfits_a_tiny_training_set(make_config):
    dataset = synth_timeshift(4, 600, {2: (0, 3), 3: (1, 2)}, noise_sigma=0.0, seed=1)
    train, _, _ = split(dataset, (0.7, 0.1))
    normalizer = Normalizer.fit(train)
    source = WindowSource(train, normalizer, max_windows=8)
    config = make_config(residual_channels=16, dilation_channels=16, skip_channels=32, end_channels=64)
    model = DFDGCN(config, supports=build_predefined(dataset.distances, 4), seed=0)
    batch = source.all()
    assert len(batch) == 8
    start_loss, _ = model.loss_and_grads(batch, normalizer)
    result = fit(model, source, source, normalizer,
                 TrainConfig(lr=0.002, max_epochs=500, patience=500, batch_size=2))
    end_loss, _ = model.loss_and_grads(batch, normalizer)
    assert end_loss < 0.01 * start_loss
    assert result.best_epoch > 1
