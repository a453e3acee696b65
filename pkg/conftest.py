"""
Shared pytest fixtures: a tiny synthetic dataset, model configurations and
ready-made window batches.
"""
import numpy as np
import pytest

from lib.data_processor import Normalizer, WindowSource, split
from lib.graphs import build_predefined, parse_graph_mode
from lib.model import ModelConfig
from lib.synth_generator import synth_timeshift

TINY_LAGS = {2: (0, 3), 3: (1, 2)}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def line_distances():
    """Three sensors in a line, 100 m apart."""
    return [(0, 1, 100.0), (1, 2, 100.0)]


@pytest.fixture
def tiny_dataset():
    return synth_timeshift(n_nodes=4, n_steps=600, lag_map=TINY_LAGS, noise_sigma=0.1, seed=1)


@pytest.fixture
def tiny_normalizer(tiny_dataset):
    return Normalizer.fit(tiny_dataset)


@pytest.fixture
def tiny_source(tiny_dataset, tiny_normalizer):
    return WindowSource(tiny_dataset, tiny_normalizer)


@pytest.fixture
def tiny_batch(tiny_source):
    return tiny_source.batch(np.array([0, 97]))


@pytest.fixture
def tiny_supports(tiny_dataset):
    return build_predefined(tiny_dataset.distances, tiny_dataset.n_nodes)


@pytest.fixture
def make_config():
    """Factory for small model configurations."""
    def factory(graph_mode="D,P,SA", **overrides):
        settings = dict(
            n_nodes=4, residual_channels=4, dilation_channels=4, skip_channels=8,
            end_channels=8, dilations=(1, 2, 4, 8), k_hops=1,
            graph_mode=parse_graph_mode(graph_mode),
        )
        settings.update(overrides)
        return ModelConfig(**settings)

    return factory


@pytest.fixture
def tiny_splits(tiny_dataset):
    return split(tiny_dataset, (0.7, 0.1))


TOY_CONFIG = """
[data]
synthetic = true
synth_nodes = 4
synth_sources = 2
synth_steps = 600
synth_lag_min = 2
synth_lag_max = 4
synth_noise = 0.1
max_train_windows = 16
max_eval_windows = 8

[model]
residual_channels = 4
dilation_channels = 4
skip_channels = 8
end_channels = 8
dilations = 1,2,4,8
k_hops = 1
graph_mode = D,P,SA

[train]
max_epochs = 2
patience = 2
batch_size = 8

[run]
seed = 0
similarity_length = 288
ablation_grid = SA;D+P
ablation_seeds = 2
"""


@pytest.fixture
def toy_config(tmp_path, monkeypatch):
    """A fast synthetic run configuration written to disk, with outputs under tmp_path."""
    monkeypatch.delenv("DFDGCN_OUTPUT_DIR", raising=False)
    monkeypatch.delenv("DFDGCN_THREADS", raising=False)
    path = tmp_path / "toy.conf"
    path.write_text(TOY_CONFIG + f"output_dir = {tmp_path / 'out'}\n", encoding="utf-8")
    return path
