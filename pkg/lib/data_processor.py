"""
Traffic dataset containers, chronological splits, normalisation and
sliding-window batching.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from lib.errors import DataError

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400
Timestamp = Union[pd.Timestamp, str, int, float]


def to_timestamp(value: Timestamp) -> pd.Timestamp:
    """Parse a start timestamp given as a date string, Timestamp or epoch seconds."""
    if isinstance(value, pd.Timestamp):
        return value
    if isinstance(value, (int, float, np.integer, np.floating)):
        return pd.Timestamp(int(value), unit="s")
    try:
        return pd.Timestamp(value)
    except (ValueError, TypeError) as e:
        raise DataError(f"cannot parse start timestamp '{value}'") from e


@dataclass
class TrafficDataset:
    """
    Multivariate sensor series.

    Attributes:
        values: [time, node, channel] readings; 0 marks a missing reading
        start_timestamp: Wall-clock time of step 0
        interval: Seconds between steps
        sensor_ids: One label per node
        distances: Optional road distances (from, to, cost) in meters
        truth_graph: Optional known dependency table (synthetic data only)
        offset: Position of step 0 within `history`
        history: The unsplit series this one was cut from
    """

    values: np.ndarray
    start_timestamp: pd.Timestamp
    interval: int = 300
    sensor_ids: List[str] = field(default_factory=list)
    distances: Optional[pd.DataFrame] = None
    truth_graph: Optional[pd.DataFrame] = None
    name: str = "dataset"
    offset: int = 0
    history: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.ndim != 3:
            raise DataError(f"{self.name}: values must be [time, node, channel], got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"{self.name}: values contain NaN or infinity")
        if self.interval <= 0 or SECONDS_PER_DAY % self.interval:
            raise DataError(f"{self.name}: interval {self.interval}s does not divide a day")
        self.start_timestamp = to_timestamp(self.start_timestamp)
        if not self.sensor_ids:
            self.sensor_ids = [str(i) for i in range(self.n_nodes)]
        if len(self.sensor_ids) != self.n_nodes:
            raise DataError(f"{self.name}: {len(self.sensor_ids)} sensor ids for {self.n_nodes} nodes")
        if self.history is None:
            self.history = self.values

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    def slice(self, start: int, stop: int, name: Optional[str] = None) -> "TrafficDataset":
        """Steps [start, stop) as a dataset sharing this one's history."""
        return TrafficDataset(
            values=self.values[start:stop],
            start_timestamp=self.start_timestamp + pd.Timedelta(seconds=start * self.interval),
            interval=self.interval,
            sensor_ids=list(self.sensor_ids),
            distances=self.distances,
            truth_graph=self.truth_graph,
            name=name or f"{self.name}[{start}:{stop}]",
            offset=self.offset + start,
            history=self.history,
        )

    def select_channels(self, channels: Sequence[int]) -> "TrafficDataset":
        channels = list(channels)
        for c in channels:
            if not 0 <= c < self.n_channels:
                raise DataError(f"{self.name}: channel {c} outside 0..{self.n_channels - 1}")
        picked = self.values[:, :, channels]
        return TrafficDataset(
            values=picked, start_timestamp=self.start_timestamp, interval=self.interval,
            sensor_ids=list(self.sensor_ids), distances=self.distances, truth_graph=self.truth_graph,
            name=self.name, offset=self.offset, history=self.history[:, :, channels],
        )


def split(dataset: TrafficDataset, ratios: Tuple[float, float] = (0.7, 0.1), t_in: int = 12,
          t_out: int = 12) -> Tuple[TrafficDataset, TrafficDataset, TrafficDataset]:
    """
    Chronological train / validation / test split.

    Train and validation sizes are floor(ratio * T); test takes the rest.

    Args:
        dataset: Full series
        ratios: (train, validation) fractions
        t_in: Input window length
        t_out: Forecast horizon

    Returns:
        Tuple of (train, validation, test) datasets
    """
    train_ratio, val_ratio = ratios
    if train_ratio <= 0 or val_ratio <= 0 or train_ratio + val_ratio >= 1:
        raise DataError(f"split ratios {ratios} must be positive and leave room for a test split")
    total = dataset.n_steps
    n_train = math.floor(round(total * train_ratio, 6))
    n_val = math.floor(round(total * val_ratio, 6))
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, total)}
    parts = []
    for name, (start, stop) in bounds.items():
        if stop - start < t_in + t_out:
            raise DataError(
                f"{dataset.name}: {name} split has {stop - start} steps, "
                f"needs at least t_in + t_out = {t_in + t_out}"
            )
        parts.append(dataset.slice(start, stop, name=f"{dataset.name}/{name}"))
    logger.info("Split %s: train=%d val=%d test=%d steps", dataset.name, n_train, n_val, total - n_train - n_val)
    return parts[0], parts[1], parts[2]


def calendar_features(step_index, start_timestamp: Timestamp, interval: int = 300,
                      tod_slots: int = 288):
    """
    Time-of-day slot and day-of-week (Monday = 0) of the given step(s).

    Args:
        step_index: Step number(s) relative to `start_timestamp`
        start_timestamp: Wall-clock time of step 0
        interval: Seconds between steps
        tod_slots: Slots per day (288 five-minute slots, or 24 hours)

    Returns:
        Tuple of (tod, dow); ints for a scalar step, int arrays otherwise
    """
    start = to_timestamp(start_timestamp)
    steps = np.asarray(step_index, dtype=np.int64)
    times = start + pd.to_timedelta(steps.ravel() * interval, unit="s")
    times = pd.DatetimeIndex(times)
    seconds = times.hour * 3600 + times.minute * 60 + times.second
    tod = np.asarray(seconds // (SECONDS_PER_DAY // tod_slots), dtype=np.int64).reshape(steps.shape)
    dow = np.asarray(times.dayofweek, dtype=np.int64).reshape(steps.shape)
    if steps.ndim == 0:
        return int(tod), int(dow)
    return tod, dow


class Normalizer:
    """Per-channel z-score fitted on the training split only."""

    def __init__(self, mean: np.ndarray, std: np.ndarray, target_channel: int = 0):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.target_channel = target_channel

    @classmethod
    def fit(cls, dataset: TrafficDataset, target_channel: int = 0) -> "Normalizer":
        mean = dataset.values.mean(axis=(0, 1))
        std = dataset.values.std(axis=(0, 1))
        for c, s in enumerate(std):
            if s == 0.0:
                raise DataError(f"{dataset.name}: channel {c} has zero standard deviation")
        return cls(mean, std, target_channel)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def target_scale(self) -> Tuple[float, float]:
        return float(self.std[self.target_channel]), float(self.mean[self.target_channel])

    def inverse_target(self, values: np.ndarray) -> np.ndarray:
        scale, shift = self.target_scale()
        return np.asarray(values) * scale + shift


@dataclass
class WindowBatch:
    """
    A batch of (input, target) windows.

    x is [B, N, C, t_in] normalised; y is [B, N, t_out] raw target readings;
    tod/dow belong to the last input step; start is each window's first input
    step within the unsplit series.
    """

    x: np.ndarray
    y: np.ndarray
    tod: np.ndarray
    dow: np.ndarray
    start: np.ndarray
    graph_input: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.x.shape[0]


class WindowSource:
    """
    Lazily cut sliding windows of one split.

    Windows of a split never reach outside it; `max_windows` > 0 keeps an
    evenly spaced subset.
    """

    def __init__(self, dataset: TrafficDataset, normalizer: Normalizer, t_in: int = 12, t_out: int = 12,
                 tod_slots: int = 288, target_channel: int = 0, normalize_graph_input: bool = True,
                 max_windows: int = 0):
        count = dataset.n_steps - t_in - t_out + 1
        if count < 1:
            raise DataError(
                f"{dataset.name}: {dataset.n_steps} steps cannot hold one window of {t_in}+{t_out}"
            )
        self.dataset = dataset
        self.normalizer = normalizer
        self.t_in = t_in
        self.t_out = t_out
        self.tod_slots = tod_slots
        self.target_channel = target_channel
        self.normalize_graph_input = normalize_graph_input
        self.scaled = normalizer.transform(dataset.values)
        starts = np.arange(count)
        if 0 < max_windows < count:
            starts = np.unique(np.linspace(0, count - 1, max_windows).round().astype(np.int64))
        self.starts = starts

    def __len__(self) -> int:
        return len(self.starts)

    def batch(self, positions) -> WindowBatch:
        starts = self.starts[np.asarray(positions, dtype=np.int64)]
        in_idx = starts[:, None] + np.arange(self.t_in)[None, :]
        out_idx = starts[:, None] + self.t_in + np.arange(self.t_out)[None, :]
        x = np.transpose(self.scaled[in_idx], (0, 2, 3, 1))
        y = np.transpose(self.dataset.values[out_idx, :, self.target_channel], (0, 2, 1))
        tod, dow = calendar_features(starts + self.t_in - 1, self.dataset.start_timestamp,
                                     self.dataset.interval, self.tod_slots)
        graph_input = None
        if not self.normalize_graph_input:
            graph_input = np.transpose(self.dataset.values[in_idx], (0, 2, 3, 1))
        return WindowBatch(x=x, y=y, tod=np.atleast_1d(tod), dow=np.atleast_1d(dow),
                           start=self.dataset.offset + starts, graph_input=graph_input)

    def all(self) -> WindowBatch:
        return self.batch(np.arange(len(self)))

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[WindowBatch]:
        for positions in iterate_batches(len(self), batch_size, rng):
            yield self.batch(positions)


def iterate_batches(count: int, batch_size: int,
                    rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    """Index chunks over `count` items, shuffled when an rng is supplied."""
    if batch_size < 1:
        raise DataError(f"batch size must be positive, got {batch_size}")
    order = rng.permutation(count) if rng is not None else np.arange(count)
    for begin in range(0, count, batch_size):
        yield order[begin:begin + batch_size]
