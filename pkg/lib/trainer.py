"""
Training: masked MAE loss, Adam with global-norm clipping, early stopping on
validation MAE and a finite-difference gradient check.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from lib.data_processor import Normalizer, WindowBatch, WindowSource
from lib.error_calculator import ErrorCalculator, masked_mae_loss  # noqa: F401
from lib.errors import ConfigError, NumericsError, TrainingDivergedError
from lib.model import DFDGCN, ModelParams
from lib.numerics import Tape, value

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "train_loss", "val_mae", "val_rmse", "val_mape", "seconds"]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    max_epochs: int = 150
    patience: int = 15
    batch_size: int = 64
    grad_clip: float = 5.0
    seed: int = 0
    record_seconds: bool = False
    progress: bool = False

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError("train.max_epochs, train.patience and train.batch_size must be >= 1")
        if self.grad_clip <= 0:
            raise ConfigError(f"train.grad_clip must be positive, got {self.grad_clip}")
        return self


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @classmethod
    def create(cls, params: ModelParams) -> "AdamState":
        return cls(
            step=0,
            m={name: np.zeros_like(arr) for name, arr in params.items()},
            v={name: np.zeros_like(arr) for name, arr in params.items()},
        )


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def optimizer_step(params: ModelParams, grads: Dict[str, np.ndarray], state: AdamState, lr: float,
                   grad_clip: float = 5.0, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> Tuple[ModelParams, AdamState]:
    """
    One Adam update after clipping the global gradient norm to `grad_clip`.

    Returns:
        Tuple of (updated parameters, updated optimizer state)
    """
    for name in params:
        g = grads.get(name)
        if g is None:
            raise NumericsError(f"no gradient for parameter '{name}'")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter '{name}'")

    norm = global_norm({name: grads[name] for name in params})
    scale = grad_clip / norm if norm > grad_clip else 1.0
    step = state.step + 1
    new_arrays, new_m, new_v = {}, {}, {}
    for name, arr in params.items():
        g = grads[name] * scale
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        new_arrays[name] = arr - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return ModelParams(new_arrays), AdamState(step=step, m=new_m, v=new_v)


# --------------------------------------------------------------------------
# Gradient check
# --------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    passed: bool
    checked: int
    skipped_kinks: int
    max_rel_error: float
    failures: List[GradCheckEntry] = field(default_factory=list)
    worst: List[GradCheckEntry] = field(default_factory=list)

    def failing_parameters(self) -> List[str]:
        return sorted({entry.name for entry in self.failures})


LossFn = Callable[[ModelParams, Tape], object]


def grad_check(loss_fn: LossFn, params: ModelParams, epsilon: float = 1e-5, tol: float = 1e-4,
               atol: float = 1e-8, sample_fraction: float = 0.05, full_below: int = 50, seed: int = 0,
               grad_transform: Optional[Callable[[Dict[str, np.ndarray]], Dict[str, np.ndarray]]] = None,
               report_worst: int = 10) -> GradCheckReport:
    """
    Compare tape gradients with central differences.

    Arrays smaller than `full_below` are checked entry by entry; larger arrays
    are sampled. A perturbation that flips any ReLU or absolute-value sign is
    skipped and counted, since the loss has a kink inside that interval.

    Args:
        loss_fn: Builds the scalar loss for given parameters on the given tape
        params: Point at which gradients are compared
        epsilon: Central-difference step
        tol: Maximum relative error |a - n| / max(|a|, |n|)
        atol: Absolute error always accepted
        sample_fraction: Share of entries checked in large arrays
        full_below: Arrays with fewer entries are checked completely
        seed: Sampling seed
        grad_transform: Optional hook applied to the analytic gradients
        report_worst: How many of the largest errors to keep

    Returns:
        GradCheckReport
    """
    tape = Tape()
    analytic = tape.backward(loss_fn(params, tape))
    if grad_transform is not None:
        analytic = grad_transform(analytic)
    rng = np.random.default_rng(seed)
    work = params.copy()

    def evaluate() -> Tuple[float, np.ndarray]:
        t = Tape()
        loss = loss_fn(work, t)
        return float(value(loss)), t.kink_signature()

    entries: List[GradCheckEntry] = []
    failures: List[GradCheckEntry] = []
    skipped = 0
    for name, arr in work.items():
        if arr.size < full_below:
            picks = np.arange(arr.size)
        else:
            count = max(1, int(math.ceil(sample_fraction * arr.size)))
            picks = np.sort(rng.choice(arr.size, size=count, replace=False))
        flat = arr.reshape(-1)
        for i in picks:
            original = flat[i]
            flat[i] = original + epsilon
            loss_plus, sig_plus = evaluate()
            flat[i] = original - epsilon
            loss_minus, sig_minus = evaluate()
            flat[i] = original
            if sig_plus.shape != sig_minus.shape or np.any(sig_plus != sig_minus):
                skipped += 1
                continue
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            exact = float(analytic[name].reshape(-1)[i])
            err = abs(exact - numeric)
            denom = max(abs(exact), abs(numeric))
            rel = err / denom if denom > 0 else 0.0
            entry = GradCheckEntry(name, int(i), exact, numeric, rel)
            entries.append(entry)
            if err > atol and rel >= tol:
                failures.append(entry)

    entries.sort(key=lambda e: e.rel_error, reverse=True)
    report = GradCheckReport(
        passed=not failures,
        checked=len(entries),
        skipped_kinks=skipped,
        max_rel_error=entries[0].rel_error if entries else 0.0,
        failures=failures,
        worst=entries[:report_worst],
    )
    log = logger.info if report.passed else logger.error
    log("Gradient check %s: %d entries checked, %d skipped at kinks, max rel error %.3g",
        "passed" if report.passed else "FAILED", report.checked, skipped, report.max_rel_error)
    return report


def model_grad_check(model: DFDGCN, batch: WindowBatch, normalizer: Normalizer, **kwargs) -> GradCheckReport:
    """grad_check of the model's masked MAE on one batch."""
    def loss_fn(params: ModelParams, tape: Tape):
        return model.batch_loss(batch, normalizer, tape, params=params)

    return grad_check(loss_fn, model.params, **kwargs)


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

@dataclass
class FitResult:
    params: ModelParams
    best_epoch: int
    best_val_mae: float
    history: pd.DataFrame
    stopped_early: bool


def fit(model: DFDGCN, train: WindowSource, val: WindowSource, normalizer: Normalizer,
        config: TrainConfig) -> FitResult:
    """
    Train until validation MAE stops improving for `patience` epochs.

    Args:
        model: Model whose parameters are trained in place
        train: Training windows
        val: Validation windows
        normalizer: Training-split normaliser
        config: Training settings

    Returns:
        FitResult holding the parameters of the best validation epoch
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    state = AdamState.create(model.params)
    scorer = ErrorCalculator(val, batch_size=config.batch_size)
    best_params = model.params.copy()
    best_epoch, best_mae, waited = 0, math.inf, 0
    rows: List[Dict[str, float]] = []
    stopped_early = False

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        total, windows = 0.0, 0
        batches = train.batches(config.batch_size, rng)
        if config.progress:
            batches = tqdm(batches, total=math.ceil(len(train) / config.batch_size),
                           desc=f"epoch {epoch}", leave=False)
        for batch in batches:
            try:
                loss, grads = model.loss_and_grads(batch, normalizer)
                if not math.isfinite(loss):
                    raise NumericsError(f"loss is {loss}")
                model.params, state = optimizer_step(model.params, grads, state, config.lr, config.grad_clip)
            except NumericsError as e:
                model.params = best_params
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch}: {e}", params=best_params,
                    history=pd.DataFrame(rows, columns=HISTORY_COLUMNS),
                ) from e
            total += loss * len(batch)
            windows += len(batch)

        report = scorer.evaluate(lambda b: model.predict(b, normalizer))
        avg = report["Avg"]
        seconds = time.perf_counter() - started if config.record_seconds else 0.0
        rows.append({"epoch": epoch, "train_loss": total / windows, "val_mae": avg.mae,
                     "val_rmse": avg.rmse, "val_mape": avg.mape, "seconds": seconds})
        logger.info("epoch %d: train_loss=%.4f val_mae=%.4f val_rmse=%.4f val_mape=%.2f%%",
                    epoch, total / windows, avg.mae, avg.rmse, avg.mape)

        if avg.mae < best_mae:
            best_mae, best_epoch, waited = avg.mae, epoch, 0
            best_params = model.params.copy()
        else:
            waited += 1
            if waited >= config.patience:
                logger.info("Early stop at epoch %d; best epoch %d (val_mae=%.4f)", epoch, best_epoch, best_mae)
                stopped_early = True
                break

    model.params = best_params
    return FitResult(params=best_params, best_epoch=best_epoch, best_val_mae=best_mae,
                     history=pd.DataFrame(rows, columns=HISTORY_COLUMNS), stopped_early=stopped_early)
