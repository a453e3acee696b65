"""
Run configuration: INI files with [data], [model], [train], [eval] and [run]
sections, plus environment settings read through python-dotenv.
"""
import configparser
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Union

from dotenv import load_dotenv

from lib.errors import ConfigError, DfdgcnError
from lib.graphs import GRAPH_LABELS, graph_label, parse_graph_mode

load_dotenv()

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{text}'")


def _parse_int_list(text: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in text.replace(" ", "").split(",") if part)


def _parse_grid(text: str) -> Tuple[frozenset, ...]:
    return tuple(parse_graph_mode(part) for part in text.split(";") if part.strip())


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, frozenset):
        return ",".join(label for label in GRAPH_LABELS if label in value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], frozenset):
            return ";".join(graph_label(mode) for mode in value)
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA: Dict[str, Dict[str, Tuple[Callable[[str], Any], Any]]] = {
    "data": {
        "synthetic": (_parse_bool, False),
        "values_path": (str, ""),
        "distances_path": (str, ""),
        "dataset_name": (str, ""),
        "start_timestamp": (str, "2018-01-01"),
        "interval": (int, 300),
        "channels": (_parse_int_list, (0,)),
        "train_ratio": (float, 0.7),
        "val_ratio": (float, 0.1),
        "graph_threshold": (float, 0.1),
        "normalize_graph_input": (_parse_bool, True),
        "max_train_windows": (int, 0),
        "max_eval_windows": (int, 0),
        "synth_nodes": (int, 20),
        "synth_steps": (int, 4032),
        "synth_sources": (int, 4),
        "synth_lag_min": (int, 2),
        "synth_lag_max": (int, 6),
        "synth_noise": (float, 0.3),
    },
    "model": {
        "kind": (str, "dfdgcn"),
        "n_nodes": (int, 0),
        "in_channels": (int, 0),
        "t_in": (int, 12),
        "t_out": (int, 12),
        "residual_channels": (int, 32),
        "dilation_channels": (int, 32),
        "skip_channels": (int, 256),
        "end_channels": (int, 512),
        "dilations": (_parse_int_list, (1, 2, 1, 2, 1, 2, 1, 2)),
        "kernel_size": (int, 2),
        "k_hops": (int, 2),
        "graph_mode": (parse_graph_mode, frozenset({"D", "P", "SA"})),
        "freq_mode": (str, "realimag"),
        "freq_embed": (int, 10),
        "id_embed": (int, 10),
        "time_embed": (int, 12),
        "graph_embed": (int, 30),
        "adaptive_embed": (int, 10),
        "tod_slots": (int, 288),
        "bidirectional_predefined": (_parse_bool, True),
    },
    "train": {
        "lr": (float, 0.001),
        "max_epochs": (int, 150),
        "patience": (int, 15),
        "batch_size": (int, 64),
        "grad_clip": (float, 5.0),
        "record_seconds": (_parse_bool, False),
        "progress": (_parse_bool, False),
    },
    "eval": {
        "hi_rule": (str, "last_value"),
        "dump_predictions": (_parse_bool, False),
        "batch_size": (int, 64),
    },
    "run": {
        "seed": (int, 0),
        "output_dir": (str, "runs"),
        "workers": (int, 1),
        "ablation_grid": (_parse_grid, tuple(parse_graph_mode(m) for m in
                                             ("P", "SA", "D", "T", "P,SA", "D,P", "D,SA", "D,P,SA"))),
        "ablation_seeds": (int, 3),
        "similarity_start": (int, 0),
        "similarity_length": (int, 2016),
    },
}


@dataclass
class RunConfig:
    """Resolved settings: every schema key with its parsed value."""

    values: Dict[str, Dict[str, Any]] = field(default_factory=lambda: {
        section: {key: default for key, (_, default) in keys.items()} for section, keys in SCHEMA.items()
    })
    source: Optional[Path] = None
    explicit: set = field(default_factory=set)

    def get(self, section: str, key: str) -> Any:
        try:
            return self.values[section][key]
        except KeyError:
            raise ConfigError(f"unknown config key {section}.{key}")

    def set(self, section: str, key: str, raw: Union[str, Any]) -> None:
        """Set a key from its text form (or an already parsed value)."""
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        parser = SCHEMA[section][key][0]
        if isinstance(raw, str):
            try:
                parsed = parser(raw)
            except (ValueError, TypeError, DfdgcnError) as e:
                raise ConfigError(f"invalid value for {section}.{key}: '{raw}' ({e})") from e
        else:
            parsed = raw
        self.values[section][key] = parsed
        self.explicit.add((section, key))

    def to_text(self) -> str:
        """Canonical INI text: sections and keys sorted, values normalised."""
        lines: List[str] = []
        for section in sorted(self.values):
            lines.append(f"[{section}]")
            for key in sorted(self.values[section]):
                lines.append(f"{key} = {_format(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    def validate(self) -> "RunConfig":
        if not self.get("data", "synthetic") and not self.get("data", "values_path"):
            raise ConfigError("missing required key data.values_path")
        if self.get("model", "kind") not in ("dfdgcn", "hi"):
            raise ConfigError(f"model.kind must be 'dfdgcn' or 'hi', got '{self.get('model', 'kind')}'")
        if not self.get("data", "channels"):
            raise ConfigError("data.channels must list at least one channel")
        if self.get("run", "workers") < 1:
            raise ConfigError("run.workers must be >= 1")
        return self


def parse_config_text(text: str, source: Optional[Path] = None) -> RunConfig:
    """Parse INI text; unknown sections or keys raise ConfigError."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config {source or ''}: {e}") from e
    config = RunConfig(source=source)
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            config.set(section, key, raw)
    return config


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Mapping[Tuple[str, str], Any]] = None) -> RunConfig:
    """
    Defaults, then the config file, then command-line overrides.

    Args:
        path: INI file; None uses defaults only
        overrides: (section, key) -> value

    Returns:
        Validated RunConfig
    """
    if path is None:
        config = RunConfig()
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        config = parse_config_text(path.read_text(encoding="utf-8"), source=path)
    for (section, key), raw in (overrides or {}).items():
        config.set(section, key, raw)
    env_output = os.getenv("DFDGCN_OUTPUT_DIR")
    if env_output and ("run", "output_dir") not in config.explicit:
        config.set("run", "output_dir", env_output)
    return config.validate()


def env_threads() -> Optional[int]:
    """Worker thread count from DFDGCN_THREADS, if set."""
    raw = os.getenv("DFDGCN_THREADS")
    if not raw:
        return None
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"DFDGCN_THREADS must be an integer, got '{raw}'")
    if threads < 1:
        raise ConfigError(f"DFDGCN_THREADS must be >= 1, got {threads}")
    return threads


def setup_logging(level: Optional[str] = None) -> None:
    """Configure the root logger; the level defaults to DFDGCN_LOG_LEVEL or INFO."""
    name = (level or os.getenv("DFDGCN_LOG_LEVEL", "INFO")).upper()
    numeric = getattr(logging, name, None)
    if not isinstance(numeric, int):
        raise ConfigError(f"unknown log level '{name}'")
    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)
