"""
Experiment assembly shared by the command-line entry points: dataset loading,
splitting, normalisation, window sources and model/training configurations.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Tuple

import numpy as np

from lib.config import RunConfig
from lib.data_processor import Normalizer, TrafficDataset, WindowSource, split
from lib.errors import ConfigError, DataError
from lib.graphs import build_predefined
from lib.model import ModelConfig
from lib.pems_importer import load_pems
from lib.synth_generator import default_lag_map, synth_timeshift
from lib.trainer import TrainConfig

logger = logging.getLogger(__name__)


def load_dataset(run_config: RunConfig, dataset_path: Optional[str] = None) -> TrafficDataset:
    """
    Dataset named by the configuration, or by `dataset_path` when given.

    A directory path is read as values.npz plus an optional distances.csv,
    the layout written by the synth command.
    """
    data = dict(run_config.values["data"])
    seed = run_config.get("run", "seed")
    graph_mode = set(run_config.get("model", "graph_mode"))
    if dataset_path:
        path = Path(dataset_path)
        values_path, distances_path = path, data["distances_path"]
        if path.is_dir():
            values_path = path / "values.npz"
            distances_path = path / "distances.csv" if (path / "distances.csv").exists() else ""
        dataset = load_pems(values_path, distances_path or None, graph_mode, data["dataset_name"] or None,
                            data["start_timestamp"], data["interval"])
    elif data["synthetic"]:
        lag_map = default_lag_map(data["synth_nodes"], data["synth_sources"],
                                  (data["synth_lag_min"], data["synth_lag_max"]), seed)
        dataset = synth_timeshift(data["synth_nodes"], data["synth_steps"], lag_map, data["synth_noise"],
                                  seed=seed, start_timestamp=data["start_timestamp"],
                                  interval=data["interval"], t_in=run_config.get("model", "t_in"))
    else:
        dataset = load_pems(data["values_path"], data["distances_path"] or None, graph_mode,
                            data["dataset_name"] or None, data["start_timestamp"], data["interval"])
    return dataset.select_channels(data["channels"])


def model_config_from(run_config: RunConfig, n_nodes: int, in_channels: int,
                      graph_mode: Optional[Iterable[str]] = None) -> ModelConfig:
    m = run_config.values["model"]
    for key, actual in (("n_nodes", n_nodes), ("in_channels", in_channels)):
        if m[key] and m[key] != actual:
            raise ConfigError(f"model.{key} = {m[key]} but the dataset has {actual}")
    return ModelConfig(
        n_nodes=n_nodes, in_channels=in_channels, t_in=m["t_in"], t_out=m["t_out"],
        residual_channels=m["residual_channels"], dilation_channels=m["dilation_channels"],
        skip_channels=m["skip_channels"], end_channels=m["end_channels"],
        dilations=tuple(m["dilations"]), kernel_size=m["kernel_size"], k_hops=m["k_hops"],
        graph_mode=frozenset(graph_mode if graph_mode is not None else m["graph_mode"]),
        freq_mode=m["freq_mode"], freq_embed=m["freq_embed"], id_embed=m["id_embed"],
        time_embed=m["time_embed"], graph_embed=m["graph_embed"], adaptive_embed=m["adaptive_embed"],
        tod_slots=m["tod_slots"], bidirectional_predefined=m["bidirectional_predefined"],
    ).validate()


def train_config_from(run_config: RunConfig, seed: Optional[int] = None) -> TrainConfig:
    t = run_config.values["train"]
    return TrainConfig(
        lr=t["lr"], max_epochs=t["max_epochs"], patience=t["patience"], batch_size=t["batch_size"],
        grad_clip=t["grad_clip"], seed=run_config.get("run", "seed") if seed is None else seed,
        record_seconds=t["record_seconds"], progress=t["progress"],
    ).validate()


@dataclass
class Experiment:
    run_config: RunConfig
    dataset: TrafficDataset
    normalizer: Normalizer
    train: WindowSource
    val: WindowSource
    test: WindowSource
    model_config: ModelConfig
    supports: Optional[Tuple[np.ndarray, np.ndarray]]


def prepare_experiment(run_config: RunConfig, dataset: Optional[TrafficDataset] = None,
                       dataset_path: Optional[str] = None) -> Experiment:
    """
    Split, normalise and window a dataset, and resolve the model configuration.

    The resolved node and channel counts are written back into `run_config`.
    """
    dataset = dataset if dataset is not None else load_dataset(run_config, dataset_path)
    data = run_config.values["data"]
    model_config = model_config_from(run_config, dataset.n_nodes, dataset.n_channels)
    run_config.set("model", "n_nodes", dataset.n_nodes)
    run_config.set("model", "in_channels", dataset.n_channels)

    t_in, t_out = model_config.t_in, model_config.t_out
    train_set, val_set, test_set = split(dataset, (data["train_ratio"], data["val_ratio"]), t_in, t_out)
    normalizer = Normalizer.fit(train_set, model_config.target_channel)

    def source(part: TrafficDataset, limit: int) -> WindowSource:
        return WindowSource(part, normalizer, t_in, t_out, model_config.tod_slots,
                            model_config.target_channel, data["normalize_graph_input"], limit)

    supports = None
    if dataset.distances is not None:
        supports = build_predefined(dataset.distances, dataset.n_nodes, data["graph_threshold"])
    elif "P" in model_config.graph_mode:
        raise DataError("predefined graph requires distances")

    return Experiment(
        run_config=run_config,
        dataset=dataset,
        normalizer=normalizer,
        train=source(train_set, data["max_train_windows"]),
        val=source(val_set, data["max_eval_windows"]),
        test=source(test_set, data["max_eval_windows"]),
        model_config=model_config,
        supports=supports,
    )
