"""
Synthetic time-shift benchmark.

A few source sensors carry a daily profile with sharp high-frequency
harmonics; every other sensor replays one source a few steps later. Lagged
pairs look only moderately alike in the time domain but have nearly identical
magnitude spectra, which is the structure the frequency graph is meant to find.
"""
import logging
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd

from lib.data_processor import TrafficDataset
from lib.errors import DataError

logger = logging.getLogger(__name__)

STEPS_PER_DAY = 288
HARMONICS = (24, 36, 48, 72)
# Monday 00:00
DEFAULT_START = "2018-01-01"
METERS_PER_LAG_STEP = 100.0


def default_lag_map(n_nodes: int, n_sources: int = 4, lag_range: Tuple[int, int] = (2, 6),
                    seed: int = 0) -> Dict[int, Tuple[int, int]]:
    """
    Nodes 0..n_sources-1 are sources; the rest follow sources round-robin with
    a lag drawn uniformly from `lag_range` (inclusive).
    """
    if not 0 < n_sources < n_nodes:
        raise DataError(f"need 0 < n_sources < n_nodes, got {n_sources} of {n_nodes}")
    low, high = lag_range
    rng = np.random.default_rng(seed)
    return {
        node: ((node - n_sources) % n_sources, int(rng.integers(low, high + 1)))
        for node in range(n_sources, n_nodes)
    }


def _source_profile(steps: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    hour = (steps % STEPS_PER_DAY) * 24.0 / STEPS_PER_DAY
    profile = np.full(steps.shape, 3.0)
    for center, width in ((8.0, 1.5), (17.5, 2.0)):
        peak = center + rng.uniform(-1.0, 1.0)
        gap = np.abs(hour - peak)
        gap = np.minimum(gap, 24.0 - gap)
        profile += rng.uniform(0.6, 1.0) * np.exp(-0.5 * (gap / width) ** 2)
    for k in HARMONICS:
        amp = rng.uniform(0.3, 0.5)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        profile += amp * np.cos(2.0 * np.pi * k * steps / STEPS_PER_DAY + phase)
    return profile


def synth_timeshift(n_nodes: int, n_steps: int, lag_map: Mapping[int, Tuple[int, int]],
                    noise_sigma: float = 0.3, seed: int = 0, gains: Optional[Mapping[int, float]] = None,
                    start_timestamp: str = DEFAULT_START, interval: int = 300, scale: float = 100.0,
                    t_in: int = 12) -> TrafficDataset:
    """
    Generate a dataset where node j = gain_j * source(t - lag_j) + noise.

    Args:
        n_nodes: Number of sensors
        n_steps: Number of time steps
        lag_map: dependent node -> (source node, lag in steps)
        noise_sigma: Std of the independent Gaussian noise per node (profile units)
        seed: Random seed
        gains: Optional dependent node -> gain (default 1)
        start_timestamp: Wall-clock time of step 0
        interval: Seconds between steps
        scale: Multiplier bringing the unit profile to flow-like magnitudes
        t_in: Input window length; lags must stay below it

    Returns:
        TrafficDataset with distances (100 m per lag step) and the truth graph
    """
    if n_nodes < 2 or n_steps < 1:
        raise DataError(f"need at least 2 nodes and 1 step, got {n_nodes} x {n_steps}")
    gains = dict(gains or {})
    dependents = set(lag_map)
    for node, (source, lag) in lag_map.items():
        if not (0 <= node < n_nodes and 0 <= source < n_nodes):
            raise DataError(f"lag map entry {node} <- {source} outside 0..{n_nodes - 1}")
        if source in dependents:
            raise DataError(f"node {source} is both a source and a dependent")
        if not 0 <= lag < t_in:
            raise DataError(f"lag {lag} for node {node} must lie in 0..{t_in - 1}")

    rng = np.random.default_rng(seed)
    max_lag = max((lag for _, lag in lag_map.values()), default=0)
    steps = np.arange(-max_lag, n_steps)
    observed = np.zeros((n_steps + max_lag, n_nodes))
    for node in range(n_nodes):
        if node not in dependents:
            observed[:, node] = _source_profile(steps, rng) + noise_sigma * rng.standard_normal(len(steps))
    for node in sorted(dependents):
        source, lag = lag_map[node]
        replay = gains.get(node, 1.0) * observed[max_lag - lag:max_lag - lag + n_steps, source]
        observed[max_lag:, node] = replay + noise_sigma * rng.standard_normal(n_steps)

    values = np.maximum(scale * observed[max_lag:], 0.0)[:, :, None]
    truth = pd.DataFrame(
        [(source, node, lag, gains.get(node, 1.0)) for node, (source, lag) in sorted(lag_map.items())],
        columns=["from", "to", "lag", "gain"],
    )
    distances = pd.DataFrame({
        "from": truth["from"].astype(np.int64),
        "to": truth["to"].astype(np.int64),
        "cost": METERS_PER_LAG_STEP * truth["lag"].astype(np.float64),
    })
    logger.info("Generated synthetic series: %d nodes x %d steps, %d lagged pairs",
                n_nodes, n_steps, len(lag_map))
    return TrafficDataset(values=values, start_timestamp=start_timestamp, interval=interval,
                          distances=distances, truth_graph=truth, name="SYNTH")


def save_dataset(dataset: TrafficDataset, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write values.npz, distances.csv and (when known) truth_graph.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {"values": out_dir / "values.npz"}
    np.savez(written["values"], data=dataset.values)
    if dataset.distances is not None:
        written["distances"] = out_dir / "distances.csv"
        dataset.distances.to_csv(written["distances"], index=False)
    if dataset.truth_graph is not None:
        written["truth_graph"] = out_dir / "truth_graph.csv"
        dataset.truth_graph.to_csv(written["truth_graph"], index=False)
    logger.info("Wrote synthetic dataset to %s", out_dir)
    return written
