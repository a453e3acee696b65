"""
Adjacency construction for the diffusion graph convolution.

Builds the predefined transitions from road distances, the self-adaptive graph
from two node-embedding tables, and the per-window dynamic graph learned from
the spectrum (or, for ablation, the raw series) of each sensor's window.
"""
import logging
from dataclasses import dataclass, fields
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from lib.errors import GraphError, NumericsError
from lib.numerics import (
    FREQ_MODES,
    Operand,
    broadcast_to,
    concat,
    conv1x1,
    matmul,
    relu,
    reshape,
    softmax_rows,
    spectrum_features,
    take_rows,
    transpose,
    value,
)

logger = logging.getLogger(__name__)

# Graph labels in the order the ablation tables list them.
GRAPH_LABELS = ("D", "P", "SA", "T")
TERM_ORDER = ("p_fwd", "p_bwd", "a_adt", "a_dyn", "a_time")
TERMS_BY_LABEL = {
    "P": ("p_fwd", "p_bwd"),
    "SA": ("a_adt",),
    "D": ("a_dyn",),
    "T": ("a_time",),
}


def parse_graph_mode(text: Union[str, Iterable[str]]) -> FrozenSet[str]:
    """
    Parse a graph subset such as "D,P,SA" or "D+SA".

    Args:
        text: Comma/plus separated labels, or an iterable of labels

    Returns:
        Frozen set of labels from {P, SA, D, T}
    """
    if isinstance(text, str):
        parts = [p.strip().upper() for p in text.replace("+", ",").split(",")]
    else:
        parts = [str(p).strip().upper() for p in text]
    labels = frozenset(p for p in parts if p)
    unknown = labels - set(GRAPH_LABELS)
    if unknown:
        raise GraphError(f"unknown graph label(s) {sorted(unknown)}, expected {list(GRAPH_LABELS)}")
    if not labels:
        raise GraphError("graph_mode must name at least one graph")
    return labels


def graph_label(mode: Iterable[str]) -> str:
    """Canonical display label, e.g. {"SA", "D"} -> "D+SA"."""
    return "+".join(label for label in GRAPH_LABELS if label in set(mode))


@dataclass
class GraphSet:
    """Adjacencies consumed by one graph convolution pass."""

    active_set: FrozenSet[str]
    p_fwd: Optional[Operand] = None
    p_bwd: Optional[Operand] = None
    a_adt: Optional[Operand] = None
    a_dyn: Optional[Operand] = None
    a_time: Optional[Operand] = None

    def terms(self) -> List[Tuple[str, Operand]]:
        """
        Active (term name, matrix) pairs in diffusion order.

        The predefined graph contributes a backward term only when p_bwd is present.
        """
        out = []
        for label in ("P", "SA", "D", "T"):
            if label not in self.active_set:
                continue
            names = TERMS_BY_LABEL[label]
            primary = getattr(self, names[0])
            if primary is None:
                raise GraphError(f"active graph {label} ({names[0]}) missing from GraphSet")
            out.append((names[0], primary))
            if label == "P" and self.p_bwd is not None:
                out.append(("p_bwd", self.p_bwd))
        return out


def term_names(graph_mode: Iterable[str], bidirectional: bool = True) -> List[str]:
    """Diffusion term names a layer needs weights for."""
    mode = set(graph_mode)
    names = []
    for label in ("P", "SA", "D", "T"):
        if label in mode:
            for name in TERMS_BY_LABEL[label]:
                if name == "p_bwd" and not bidirectional:
                    continue
                names.append(name)
    return names


def is_row_stochastic(matrix: np.ndarray, tol: float = 1e-6) -> bool:
    m = np.asarray(matrix)
    return bool(np.all(m >= 0.0) and np.allclose(m.sum(axis=-1), 1.0, atol=tol, rtol=0.0))


def row_normalize(matrix: np.ndarray) -> np.ndarray:
    sums = matrix.sum(axis=1, keepdims=True)
    if np.any(sums <= 0.0):
        raise GraphError("cannot row-normalize a matrix with an empty row")
    return matrix / sums


# --------------------------------------------------------------------------
# Predefined graph
# --------------------------------------------------------------------------

def _edge_array(distances) -> np.ndarray:
    if isinstance(distances, pd.DataFrame):
        missing = {"from", "to", "cost"} - set(distances.columns)
        if missing:
            raise GraphError(f"distance table lacks columns {sorted(missing)}")
        return distances[["from", "to", "cost"]].to_numpy(dtype=np.float64)
    rows = [tuple(r) for r in distances]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def build_predefined(distances, n_nodes: int, threshold: float = 0.1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Forward and backward diffusion transitions from road distances.

    W[i, j] = exp(-d(i, j)^2 / sigma^2) for every listed edge, with sigma the
    standard deviation of the listed distances; weights below `threshold` are
    dropped; the diagonal is a self-loop of weight 1.

    Args:
        distances: DataFrame with from/to/cost columns, or (from, to, meters) tuples
        n_nodes: Number of sensors
        threshold: Sparsity threshold kappa

    Returns:
        Tuple of (p_fwd, p_bwd) = (rownorm(W), rownorm(W^T))
    """
    edges = _edge_array(distances)
    if len(edges) == 0:
        raise GraphError("empty distance list")
    src = edges[:, 0].astype(np.int64)
    dst = edges[:, 1].astype(np.int64)
    dist = edges[:, 2]
    for idx in np.concatenate([src, dst]):
        if idx < 0 or idx >= n_nodes:
            raise GraphError(f"node index {idx} out of range for {n_nodes} nodes")
    if np.any(dist < 0.0) or not np.all(np.isfinite(dist)):
        raise GraphError("distances must be finite and nonnegative")

    sigma = float(dist.std())
    if sigma == 0.0:
        # all listed distances equal: fall back to their common value
        sigma = float(dist.mean()) or 1.0

    weights = np.zeros((n_nodes, n_nodes))
    weights[src, dst] = np.exp(-np.square(dist / sigma))
    np.fill_diagonal(weights, 1.0)
    weights[weights < threshold] = 0.0
    logger.debug("predefined graph: %d nodes, %d edges kept, sigma=%.3f",
                 n_nodes, int((weights > 0).sum()) - n_nodes, sigma)
    return row_normalize(weights), row_normalize(weights.T)


# --------------------------------------------------------------------------
# Self-adaptive graph
# --------------------------------------------------------------------------

def adaptive_graph(e1: Operand, e2: Operand):
    """Softmax(ReLU(E1 E2^T)), recomputed from the current embeddings."""
    if value(e1).shape[-1] != value(e2).shape[-1]:
        raise GraphError(f"embedding widths differ: {value(e1).shape} vs {value(e2).shape}")
    return softmax_rows(relu(matmul(e1, transpose(e2))))


# --------------------------------------------------------------------------
# Dynamic graphs
# --------------------------------------------------------------------------

@dataclass
class FreqGraphParams:
    """
    Learnable arrays of one dynamic graph learner.

    For the frequency-domain graph w_freq maps spectrum features; the
    time-domain ablation variant reuses the layout with w_freq mapping the raw
    window instead.
    """

    w_freq: Operand
    e_id: Operand
    e_dow: Operand
    e_tod: Operand
    w_conv: Operand
    b_conv: Operand
    w_adj: Operand

    def as_dict(self) -> Dict[str, Operand]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_mapping(cls, mapping, prefix: str = "") -> "FreqGraphParams":
        return cls(**{f.name: mapping[prefix + f.name] for f in fields(cls)})


def feature_width(t_in: int, domain: str, mode: str = "realimag") -> int:
    if domain == "time":
        return t_in
    bins = t_in // 2 + 1
    return 2 * bins if mode == "realimag" else bins


def init_graph_params(n_nodes: int, t_in: int, rng: np.random.Generator, domain: str = "frequency",
                      mode: str = "realimag", freq_embed: int = 10, id_embed: int = 10,
                      time_embed: int = 12, graph_embed: int = 30, tod_slots: int = 288) -> FreqGraphParams:
    """
    Fresh graph-learner parameters.

    Maps are uniform in +-1/sqrt(fan_in); embedding tables are unit normal scaled by 0.1.
    """
    width = feature_width(t_in, domain, mode)
    de_width = freq_embed + id_embed + 2 * time_embed

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return FreqGraphParams(
        w_freq=uniform((width, freq_embed), width),
        e_id=0.1 * rng.standard_normal((n_nodes, id_embed)),
        e_dow=0.1 * rng.standard_normal((7, time_embed)),
        e_tod=0.1 * rng.standard_normal((tod_slots, time_embed)),
        w_conv=uniform((graph_embed, de_width), de_width),
        b_conv=uniform((graph_embed,), de_width),
        w_adj=uniform((graph_embed, graph_embed), graph_embed),
    )


def _batched_window(x_window, expected_len: int) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x_window, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise GraphError(f"window must be [N, C, T] or [B, N, C, T], got shape {x.shape}")
    if x.shape[-1] != expected_len:
        raise GraphError(f"window length {x.shape[-1]} != expected {expected_len}")
    return x, single


def _calendar_index(index, batch: int, limit: int, label: str) -> np.ndarray:
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size == 1 and batch > 1:
        idx = np.repeat(idx, batch)
    if idx.size != batch:
        raise GraphError(f"{label} index has {idx.size} entries for a batch of {batch}")
    if np.any(idx < 0) or np.any(idx >= limit):
        raise GraphError(f"{label} index out of range 0..{limit - 1}: {idx.tolist()}")
    return idx


def frequency_features(x_window, mode: str = "realimag", target_channel: int = 0,
                       window_length: int = 12) -> np.ndarray:
    """
    Spectrum features of the target channel, [B, N, F] (or [N, F] for one window).
    """
    if mode not in FREQ_MODES:
        raise GraphError(f"unknown freq_mode '{mode}', expected one of {FREQ_MODES}")
    x, single = _batched_window(x_window, window_length)
    feats = spectrum_features(x[:, :, target_channel, :], mode)
    return feats[0] if single else feats


def dynamic_graph_from_features(features, tod_index, dow_index, params: FreqGraphParams):
    """
    Directed adjacency Softmax(ReLU(DE W_adj DE^T)) from per-node features.

    DE concatenates the mapped features, the sensor identity embedding and the
    day-of-week / time-of-day embeddings, then passes a 1x1 convolution.

    Args:
        features: [B, N, F] or [N, F] per-node window features
        tod_index: Time-of-day slot(s)
        dow_index: Day-of-week index(es), 0 = Monday
        params: Graph-learner parameters (arrays or Vars)

    Returns:
        Row-stochastic [B, N, N] (or [N, N]) adjacency
    """
    feats = np.asarray(features, dtype=np.float64)
    single = feats.ndim == 2
    if single:
        feats = feats[None]
    batch, n_nodes, width = feats.shape
    w_freq = value(params.w_freq)
    if w_freq.shape[0] != width:
        raise GraphError(f"w_freq expects {w_freq.shape[0]} features per node, window gives {width}")
    if value(params.e_id).shape[0] != n_nodes:
        raise GraphError(f"identity embedding has {value(params.e_id).shape[0]} rows for {n_nodes} nodes")
    tod = _calendar_index(tod_index, batch, value(params.e_tod).shape[0], "time-of-day")
    dow = _calendar_index(dow_index, batch, value(params.e_dow).shape[0], "day-of-week")

    mapped = matmul(feats, params.w_freq)
    ident = broadcast_to(params.e_id, (batch,) + value(params.e_id).shape)
    calendar = concat([take_rows(params.e_dow, dow), take_rows(params.e_tod, tod)], axis=-1)
    width_t = value(calendar).shape[-1]
    calendar = broadcast_to(reshape(calendar, (batch, 1, width_t)), (batch, n_nodes, width_t))

    de = concat([mapped, ident, calendar], axis=-1)
    de = conv1x1(de, params.w_conv, params.b_conv, axis=-1)
    logits = matmul(matmul(de, params.w_adj), transpose(de))
    adj = softmax_rows(relu(logits))
    if single:
        return reshape(adj, (n_nodes, n_nodes))
    return adj


def frequency_graph(x_window, tod_index, dow_index, params: FreqGraphParams, mode: str = "realimag",
                    target_channel: int = 0):
    """
    Dynamic frequency-domain adjacency for one window or a batch of windows.

    Args:
        x_window: [N, C, T] or [B, N, C, T]; T must match the learner's window length
        tod_index: Time-of-day slot(s)
        dow_index: Day-of-week index(es)
        params: Graph-learner parameters
        mode: "realimag" (re and im features) or "magnitude" (|X[k]|)
        target_channel: Channel whose series is transformed

    Returns:
        Row-stochastic adjacency, generally asymmetric
    """
    window_length = _window_length(params, "frequency", mode)
    try:
        feats = frequency_features(x_window, mode, target_channel, window_length)
    except NumericsError as e:
        raise GraphError(str(e)) from e
    return dynamic_graph_from_features(feats, tod_index, dow_index, params)


def time_domain_graph(x_window, tod_index, dow_index, params: FreqGraphParams, target_channel: int = 0):
    """Ablation variant of frequency_graph fed with the raw window values."""
    window_length = _window_length(params, "time")
    x, single = _batched_window(x_window, window_length)
    feats = x[:, :, target_channel, :]
    return dynamic_graph_from_features(feats[0] if single else feats, tod_index, dow_index, params)


def _window_length(params: FreqGraphParams, domain: str, mode: str = "realimag") -> int:
    width = value(params.w_freq).shape[0]
    if domain == "time":
        return width
    bins = width // 2 if mode == "realimag" else width
    # one-sided bins = T//2 + 1; both even and odd T map back to 2*(bins-1)
    if mode == "realimag" and width % 2:
        raise GraphError(f"w_freq has {width} rows, not a re/im feature width")
    return 2 * (bins - 1)
