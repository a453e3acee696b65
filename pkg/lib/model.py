"""
DFDGCN forecaster: gated dilated temporal convolutions interleaved with
diffusion graph convolutions over predefined, self-adaptive and dynamic
frequency-domain graphs.

Internal activations are laid out [batch, channels, nodes, time].
"""
import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, FrozenSet, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from lib.error_calculator import masked_mae_loss
from lib.errors import ConfigError, DataError, GraphError
from lib.graphs import (
    FreqGraphParams,
    GraphSet,
    adaptive_graph,
    frequency_graph,
    graph_label,
    init_graph_params,
    parse_graph_mode,
    term_names,
    time_domain_graph,
)
from lib.numerics import (
    FREQ_MODES,
    Operand,
    Tape,
    Var,
    add,
    affine,
    conv1x1,
    dilated_causal_conv,
    mul,
    pad_left,
    propagate,
    relu,
    reshape,
    sigmoid,
    tanh,
    time_slice,
    transpose,
    value,
)

logger = logging.getLogger(__name__)

LAYER_KEYS = ("filter_w", "filter_b", "gate_w", "gate_b", "skip_w", "skip_b")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters."""

    n_nodes: int
    in_channels: int = 1
    t_in: int = 12
    t_out: int = 12
    residual_channels: int = 32
    dilation_channels: int = 32
    skip_channels: int = 256
    end_channels: int = 512
    dilations: Tuple[int, ...] = (1, 2, 1, 2, 1, 2, 1, 2)
    kernel_size: int = 2
    k_hops: int = 2
    graph_mode: FrozenSet[str] = frozenset({"D", "P", "SA"})
    freq_mode: str = "realimag"
    freq_embed: int = 10
    id_embed: int = 10
    time_embed: int = 12
    graph_embed: int = 30
    adaptive_embed: int = 10
    tod_slots: int = 288
    target_channel: int = 0
    bidirectional_predefined: bool = True

    @property
    def n_layers(self) -> int:
        return len(self.dilations)

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * sum(self.dilations)

    def with_graph_mode(self, mode) -> "ModelConfig":
        return replace(self, graph_mode=parse_graph_mode(mode))

    def validate(self) -> "ModelConfig":
        """Raise ConfigError on inconsistent settings; returns self."""
        positive = {
            "n_nodes": self.n_nodes, "in_channels": self.in_channels, "t_in": self.t_in,
            "t_out": self.t_out, "residual_channels": self.residual_channels,
            "dilation_channels": self.dilation_channels, "skip_channels": self.skip_channels,
            "end_channels": self.end_channels, "kernel_size": self.kernel_size,
            "freq_embed": self.freq_embed, "id_embed": self.id_embed,
            "time_embed": self.time_embed, "graph_embed": self.graph_embed,
            "adaptive_embed": self.adaptive_embed,
        }
        for key, val in positive.items():
            if val < 1:
                raise ConfigError(f"model.{key} must be positive, got {val}")
        if len(self.dilations) < 2 or any(d < 1 for d in self.dilations):
            raise ConfigError(f"model.dilations needs at least two positive entries, got {list(self.dilations)}")
        if self.k_hops < 0:
            raise ConfigError(f"model.k_hops must be >= 0, got {self.k_hops}")
        if self.freq_mode not in FREQ_MODES:
            raise ConfigError(f"model.freq_mode must be one of {FREQ_MODES}, got '{self.freq_mode}'")
        if self.tod_slots not in (24, 288):
            raise ConfigError(f"model.tod_slots must be 24 or 288, got {self.tod_slots}")
        if not 0 <= self.target_channel < self.in_channels:
            raise ConfigError(f"model.target_channel {self.target_channel} outside 0..{self.in_channels - 1}")
        try:
            parse_graph_mode(self.graph_mode)
        except GraphError as e:
            raise ConfigError(f"model.graph_mode: {e}") from e
        if self.receptive_field < self.t_in:
            raise ConfigError(
                f"receptive field {self.receptive_field} is shorter than the input window {self.t_in}"
            )
        return self


class ModelParams:
    """
    Ordered, named collection of every learnable array.

    Each array appears exactly once; the insertion order fixes the flat index
    used by checkpoints, gradient checks and the optimizer.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self._arrays: Dict[str, np.ndarray] = {}
        for name, arr in arrays.items():
            self._arrays[name] = np.asarray(arr, dtype=np.float64)
        self._check_aliasing()

    def _check_aliasing(self) -> None:
        seen: List[Tuple[str, np.ndarray]] = []
        for name, arr in self._arrays.items():
            for other_name, other in seen:
                if np.shares_memory(arr, other):
                    raise ConfigError(f"parameters '{name}' and '{other_name}' share storage")
            seen.append((name, arr))

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def names(self) -> List[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    @property
    def size(self) -> int:
        return int(sum(arr.size for arr in self._arrays.values()))

    def copy(self) -> "ModelParams":
        return ModelParams({name: arr.copy() for name, arr in self._arrays.items()})

    def flat_index(self) -> List[Tuple[str, int, int]]:
        """(name, offset, size) of each array within to_vector()."""
        index, offset = [], 0
        for name, arr in self._arrays.items():
            index.append((name, offset, arr.size))
            offset += arr.size
        return index

    def to_vector(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([arr.ravel() for arr in self._arrays.values()])

    def from_vector(self, vector: np.ndarray) -> "ModelParams":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.size:
            raise ConfigError(f"vector of {vector.size} values for {self.size} parameters")
        return ModelParams({
            name: vector[offset:offset + size].reshape(self._arrays[name].shape).copy()
            for name, offset, size in self.flat_index()
        })

    def bind(self, tape: Tape) -> Dict[str, Var]:
        """Register every array on the tape, returning Vars by name."""
        return {name: tape.parameter(name, arr) for name, arr in self._arrays.items()}


def init_params(config: ModelConfig, rng: Optional[np.random.Generator] = None) -> ModelParams:
    """
    Freshly initialised parameters for a model configuration.

    Weights are uniform in +-1/sqrt(fan_in); node and calendar embeddings are
    unit normal scaled by 0.1.
    """
    config.validate()
    rng = rng if rng is not None else np.random.default_rng(0)
    arrays: Dict[str, np.ndarray] = {}

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    mode = config.graph_mode
    for label, prefix, domain in (("D", "graph.freq.", "frequency"), ("T", "graph.time.", "time")):
        if label in mode:
            learner = init_graph_params(
                config.n_nodes, config.t_in, rng, domain=domain, mode=config.freq_mode,
                freq_embed=config.freq_embed, id_embed=config.id_embed,
                time_embed=config.time_embed, graph_embed=config.graph_embed,
                tod_slots=config.tod_slots,
            )
            arrays.update({prefix + k: v for k, v in learner.as_dict().items()})
    if "SA" in mode:
        arrays["graph.adaptive.e1"] = 0.1 * rng.standard_normal((config.n_nodes, config.adaptive_embed))
        arrays["graph.adaptive.e2"] = 0.1 * rng.standard_normal((config.n_nodes, config.adaptive_embed))

    c_in, res, dil = config.in_channels, config.residual_channels, config.dilation_channels
    skip, end, k = config.skip_channels, config.end_channels, config.kernel_size
    arrays["start.w"] = uniform((res, c_in), c_in)
    arrays["start.b"] = uniform((res,), c_in)

    terms = term_names(mode, config.bidirectional_predefined)
    n_terms = len(terms) * (config.k_hops + 1)
    for i in range(config.n_layers):
        p = f"layers.{i}."
        arrays[p + "filter_w"] = uniform((dil, res, k), res * k)
        arrays[p + "filter_b"] = uniform((dil,), res * k)
        arrays[p + "gate_w"] = uniform((dil, res, k), res * k)
        arrays[p + "gate_b"] = uniform((dil,), res * k)
        arrays[p + "skip_w"] = uniform((skip, dil), dil)
        arrays[p + "skip_b"] = uniform((skip,), dil)
        if i == config.n_layers - 1:
            # the last layer only feeds the skip path
            continue
        for term in terms:
            for hop in range(config.k_hops + 1):
                arrays[f"{p}gconv.{term}.{hop}"] = uniform((res, dil), dil * n_terms)
        arrays[p + "gconv.b"] = uniform((res,), dil * n_terms)

    arrays["end1.w"] = uniform((end, skip), skip)
    arrays["end1.b"] = uniform((end,), skip)
    arrays["end2.w"] = uniform((config.t_out, end), end)
    arrays["end2.b"] = uniform((config.t_out,), end)
    return ModelParams(arrays)


# --------------------------------------------------------------------------
# Building blocks
# --------------------------------------------------------------------------

def graph_convolution(x: Operand, graphs: GraphSet, weights: Mapping[Tuple[str, int], Operand],
                      k_hops: int, bias: Optional[Operand] = None):
    """
    Diffusion graph convolution: sum over graphs A and hops k of A^k X W_{k,A}.

    Args:
        x: Features [B, C_in, N, T]
        graphs: Active adjacencies; each is [N, N] or per-sample [B, N, N]
        weights: (term name, hop) -> [C_out, C_in] channel map
        k_hops: Highest diffusion power K
        bias: Optional [C_out] bias

    Returns:
        Features [B, C_out, N, T]
    """
    out = None
    for term, adj in graphs.terms():
        h = x
        for hop in range(k_hops + 1):
            if hop > 0:
                h = propagate(adj, h)
            w = weights.get((term, hop))
            if w is None:
                raise GraphError(f"no weights for graph term {term} hop {hop}")
            z = conv1x1(h, w, axis=1)
            out = z if out is None else add(out, z)
    if out is None:
        raise GraphError("graph convolution with no active graphs")
    if bias is not None:
        out = add(out, reshape(bias, (1, value(bias).shape[0], 1, 1)))
    return out


def diffusion_convolution(x: np.ndarray, graphs: GraphSet, weights: Mapping[Tuple[str, int], np.ndarray],
                          k_hops: int) -> np.ndarray:
    """
    Node-feature form of graph_convolution: X [N, C_in] -> [N, C_out].

    Weights are given as [C_in, C_out] so the result is sum A^k X W directly.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise GraphError(f"expected node features [N, C], got shape {x.shape}")
    x4 = x.T[None, :, :, None]
    maps = {key: np.asarray(w, dtype=np.float64).T for key, w in weights.items()}
    out = graph_convolution(x4, graphs, maps, k_hops)
    return np.asarray(out)[0, :, :, 0].T


def gated_tcn_layer(x: Operand, layer: Mapping[str, Operand], dilation: int,
                    mix: Optional[Callable[[Operand], Operand]] = None, residual: bool = True):
    """
    One gated temporal layer: tanh(filter) * sigmoid(gate), a skip projection
    and a residual connection to the newest input steps.

    Args:
        x: [C, T] or [B, C, N, T]
        layer: filter_w/filter_b, gate_w/gate_b, skip_w/skip_b arrays
        dilation: Temporal dilation
        mix: Optional map applied to the gated output before the residual add
            (the model passes its graph convolution here)
        residual: When False only the skip contribution is computed

    Returns:
        Tuple of (layer output or None, skip contribution)
    """
    axis = 0 if value(x).ndim == 2 else 1
    filt = tanh(dilated_causal_conv(x, layer["filter_w"], layer["filter_b"], dilation, channel_axis=axis))
    gate = sigmoid(dilated_causal_conv(x, layer["gate_w"], layer["gate_b"], dilation, channel_axis=axis))
    h = mul(filt, gate)
    skip = conv1x1(h, layer["skip_w"], layer["skip_b"], axis=axis)
    if not residual:
        return None, skip
    z = mix(h) if mix is not None else h
    out = add(z, time_slice(x, -value(z).shape[-1]))
    return out, skip


def build_graph_set(graph_window: np.ndarray, tod, dow, params: Mapping[str, Operand],
                    config: ModelConfig, supports: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> GraphSet:
    """Adjacencies for one batch: dynamic graphs once per window, static ones shared."""
    mode = config.graph_mode
    graphs = GraphSet(active_set=frozenset(mode))
    if "P" in mode:
        if supports is None:
            raise GraphError("predefined graph requires distances")
        graphs.p_fwd = supports[0]
        if config.bidirectional_predefined:
            graphs.p_bwd = supports[1]
    if "SA" in mode:
        graphs.a_adt = adaptive_graph(params["graph.adaptive.e1"], params["graph.adaptive.e2"])
    if "D" in mode:
        learner = FreqGraphParams.from_mapping(params, "graph.freq.")
        graphs.a_dyn = frequency_graph(graph_window, tod, dow, learner, config.freq_mode, config.target_channel)
    if "T" in mode:
        learner = FreqGraphParams.from_mapping(params, "graph.time.")
        graphs.a_time = time_domain_graph(graph_window, tod, dow, learner, config.target_channel)
    return graphs


def forward(window, tod, dow, params: ModelParams, config: ModelConfig,
            supports: Optional[Tuple[np.ndarray, np.ndarray]] = None, tape: Optional[Tape] = None,
            graph_window: Optional[np.ndarray] = None):
    """
    Normalised 12-step forecast for each sensor.

    Args:
        window: [N, C, T_in] or batched [B, N, C, T_in] normalised input
        tod: Time-of-day slot(s) of the last input step
        dow: Day-of-week index(es) of the last input step
        params: Model parameters
        config: Model configuration
        supports: (p_fwd, p_bwd) when the predefined graph is active
        tape: When given, parameters are registered on it and a Var is returned
        graph_window: Input for the dynamic graph learners; defaults to `window`

    Returns:
        [N, T_out] or [B, N, T_out] forecast in normalised units
    """
    x = np.asarray(window, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    expected = (config.n_nodes, config.in_channels, config.t_in)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise DataError(f"window shape {x.shape} does not match [B, {expected[0]}, {expected[1]}, {expected[2]}]")
    batch = x.shape[0]
    gw = x if graph_window is None else np.asarray(graph_window, dtype=np.float64).reshape(x.shape)

    p: Mapping[str, Operand] = params.bind(tape) if tape is not None else dict(params.items())
    graphs = build_graph_set(gw, tod, dow, p, config, supports)
    terms = [term for term, _ in graphs.terms()]

    h = pad_left(np.transpose(x, (0, 2, 1, 3)), config.receptive_field - config.t_in)
    h = conv1x1(h, p["start.w"], p["start.b"], axis=1)
    skip = None
    last = config.n_layers - 1
    for i, dilation in enumerate(config.dilations):
        prefix = f"layers.{i}."
        layer = {key: p[prefix + key] for key in LAYER_KEYS}
        if i == last:
            _, s = gated_tcn_layer(h, layer, dilation, residual=False)
        else:
            weights = {(term, hop): p[f"{prefix}gconv.{term}.{hop}"]
                       for term in terms for hop in range(config.k_hops + 1)}
            bias = p[prefix + "gconv.b"]

            def mix(z, weights=weights, bias=bias):
                return graph_convolution(z, graphs, weights, config.k_hops, bias)

            h, s = gated_tcn_layer(h, layer, dilation, mix)
        skip = s if skip is None else add(s, time_slice(skip, -value(s).shape[-1]))

    out = relu(skip)
    out = relu(conv1x1(out, p["end1.w"], p["end1.b"], axis=1))
    out = conv1x1(out, p["end2.w"], p["end2.b"], axis=1)
    out = transpose(reshape(out, (batch, config.t_out, config.n_nodes)), (0, 2, 1))
    if single:
        out = reshape(out, (config.n_nodes, config.t_out))
    return out


def dead_parameters(grads: Mapping[str, np.ndarray]) -> List[str]:
    """Names of parameters whose gradient is identically zero."""
    return [name for name, g in grads.items() if not np.any(g)]


class DFDGCN:
    """
    Forecaster bundling a configuration, its parameters and the predefined supports.
    """

    def __init__(self, config: ModelConfig, params: Optional[ModelParams] = None,
                 supports: Optional[Tuple[np.ndarray, np.ndarray]] = None, seed: int = 0):
        self.config = config.validate()
        self.params = params if params is not None else init_params(config, np.random.default_rng(seed))
        if "P" in config.graph_mode and supports is None:
            raise GraphError("predefined graph requires distances")
        self.supports = supports
        logger.debug("DFDGCN %s: %d parameters in %d arrays",
                     graph_label(config.graph_mode), self.params.size, len(self.params))

    def forward(self, window, tod, dow, tape: Optional[Tape] = None, graph_window=None,
                params: Optional[ModelParams] = None):
        return forward(window, tod, dow, params if params is not None else self.params, self.config, self.supports, tape, graph_window)

    def predict(self, batch, normalizer) -> np.ndarray:
        """Denormalised forecast [B, N, T_out] for a WindowBatch."""
        out = self.forward(batch.x, batch.tod, batch.dow, graph_window=batch.graph_input)
        return normalizer.inverse_target(np.asarray(out))

    def batch_loss(self, batch, normalizer, tape: Tape, params: Optional[ModelParams] = None):
        """Masked MAE of the denormalised forecast, recorded on `tape`."""
        out = self.forward(batch.x, batch.tod, batch.dow, tape=tape, graph_window=batch.graph_input,
                           params=params)
        scale, shift = normalizer.target_scale()
        return masked_mae_loss(affine(out, scale, shift), batch.y)

    def loss_and_grads(self, batch, normalizer) -> Tuple[float, Dict[str, np.ndarray]]:
        tape = Tape()
        loss = self.batch_loss(batch, normalizer, tape)
        grads = tape.backward(loss)
        return float(value(loss)), grads
