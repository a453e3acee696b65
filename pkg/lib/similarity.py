"""
Pairwise cosine similarity of sensor series in the time domain and of their
magnitude spectra.
"""
import logging
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from lib.errors import DataError
from lib.numerics import dft_real

logger = logging.getLogger(__name__)


def cosine_matrix(rows: np.ndarray) -> np.ndarray:
    """Cosine similarity between every pair of rows; all-zero rows score 0."""
    rows = np.asarray(rows, dtype=np.float64)
    gram = rows @ rows.T
    norms = np.sqrt(np.diag(gram))
    denom = np.outer(norms, norms)
    sim = np.divide(gram, denom, out=np.zeros_like(gram), where=denom > 0.0)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, np.where(norms > 0.0, 1.0, 0.0))
    return sim


def similarity_matrices(series: np.ndarray, start: int = 0, length: int = 2016,
                        sensor_ids: Optional[List[str]] = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Time-domain and magnitude-spectrum cosine similarity over a span.

    Args:
        series: [time, node] readings of one channel
        start: First step of the span
        length: Span length (2016 = one week of 5-minute steps)
        sensor_ids: Row/column labels

    Returns:
        Tuple of (time-domain, frequency-domain) N x N DataFrames
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise DataError(f"expected [time, node] series, got shape {series.shape}")
    if length < 1 or start < 0 or start + length > series.shape[0]:
        raise DataError(f"span [{start}, {start + length}) outside series of {series.shape[0]} steps")
    span = series[start:start + length].T
    time_sim = cosine_matrix(span)
    freq_sim = cosine_matrix(dft_real(span).magnitude())
    labels = sensor_ids or [str(i) for i in range(series.shape[1])]
    logger.info("Similarity over steps [%d, %d): mean off-diagonal time %.3f, frequency %.3f",
                start, start + length, _off_diagonal_mean(time_sim), _off_diagonal_mean(freq_sim))
    return (pd.DataFrame(time_sim, index=labels, columns=labels),
            pd.DataFrame(freq_sim, index=labels, columns=labels))


def _off_diagonal_mean(sim: np.ndarray) -> float:
    n = sim.shape[0]
    if n < 2:
        return float("nan")
    return float((sim.sum() - np.trace(sim)) / (n * (n - 1)))
