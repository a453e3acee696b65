"""
Importer for PEMS-style traffic benchmarks.

Reads a readings container (.npz / .npy, or a long-format CSV) and a road
distance CSV into a TrafficDataset.
"""
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from lib.data_processor import TrafficDataset
from lib.errors import DataError

logger = logging.getLogger(__name__)

# name -> (time steps, nodes, first timestamp)
KNOWN_DATASETS: Dict[str, Tuple[int, int, str]] = {
    "PEMS03": (26208, 358, "2018-09-01"),
    "PEMS04": (16992, 307, "2018-01-01"),
    "PEMS07": (28224, 883, "2017-05-01"),
    "PEMS08": (17856, 170, "2016-07-01"),
    "PEMS-BAY": (52116, 325, "2017-01-01"),
}


class PemsImporter:
    """Loader for readings and distance files with flexible column names."""

    column_mapping = {
        "time": ["time", "timestamp", "step", "t"],
        "node": ["node", "sensor", "sensor_id", "station"],
        "value": ["value", "flow", "speed", "reading"],
        "from": ["from", "src", "source", "from_node"],
        "to": ["to", "dst", "target", "to_node"],
        "cost": ["cost", "distance", "meters", "dist"],
    }

    def _resolve_columns(self, df: pd.DataFrame, required: Iterable[str], path: Path) -> Dict[str, str]:
        df.columns = [str(c).strip().lower() for c in df.columns]
        actual = {}
        for standard in required:
            for col in df.columns:
                if col in self.column_mapping[standard]:
                    actual[standard] = col
                    break
        missing = [c for c in required if c not in actual]
        if missing:
            raise DataError(f"{path}: required columns {missing} not found in {list(df.columns)}")
        return actual

    def read_values(self, path: Union[str, Path]) -> np.ndarray:
        """
        Readings as [time, node, channel].

        Args:
            path: .npz (array "data" or the first array), .npy, or a CSV with
                time/node/value columns

        Returns:
            float64 array; missing CSV cells become 0
        """
        path = Path(path)
        if not path.exists():
            raise DataError(f"values file not found: {path}")
        suffix = path.suffix.lower()
        if suffix == ".npz":
            with np.load(path) as archive:
                if not archive.files:
                    raise DataError(f"{path}: empty archive")
                key = "data" if "data" in archive.files else archive.files[0]
                values = archive[key]
        elif suffix == ".npy":
            values = np.load(path)
        elif suffix == ".csv":
            df = pd.read_csv(path)
            cols = self._resolve_columns(df, ["time", "node", "value"], path)
            table = df.pivot_table(index=cols["time"], columns=cols["node"], values=cols["value"],
                                   aggfunc="last").sort_index()
            values = table.fillna(0.0).to_numpy(dtype=np.float64)
        else:
            raise DataError(f"{path}: unsupported values format '{suffix}'")
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3:
            raise DataError(f"{path}: expected [time, node(, channel)] readings, found shape {values.shape}")
        return values

    def read_distances(self, path: Union[str, Path], sensor_ids: Optional[List[str]] = None) -> pd.DataFrame:
        """
        Distance table with integer from/to node indices and cost in meters.

        When the file names sensors by id, `sensor_ids` maps them to indices.
        """
        path = Path(path)
        if not path.exists():
            raise DataError(f"distance file not found: {path}")
        df = pd.read_csv(path)
        cols = self._resolve_columns(df, ["from", "to", "cost"], path)
        out = pd.DataFrame({"from": df[cols["from"]], "to": df[cols["to"]], "cost": df[cols["cost"]]})
        if sensor_ids is not None and not pd.api.types.is_integer_dtype(out["from"]):
            lookup = {str(s): i for i, s in enumerate(sensor_ids)}
            skipped = 0
            rows = []
            for _, row in out.iterrows():
                a, b = lookup.get(str(row["from"])), lookup.get(str(row["to"]))
                if a is None or b is None:
                    skipped += 1
                    continue
                rows.append((a, b, float(row["cost"])))
            if skipped:
                logger.warning("%s: skipped %d edges naming unknown sensors", path, skipped)
            out = pd.DataFrame(rows, columns=["from", "to", "cost"])
        out = out.astype({"from": np.int64, "to": np.int64, "cost": np.float64})
        return out

    def load(self, values_path: Union[str, Path], distances_path: Optional[Union[str, Path]] = None,
             graph_mode: Iterable[str] = (), name: Optional[str] = None,
             start_timestamp: Optional[str] = None, interval: int = 300) -> TrafficDataset:
        values = self.read_values(values_path)
        name = name or Path(values_path).stem.upper()
        known = KNOWN_DATASETS.get(name)
        if known is not None:
            steps, nodes, start = known
            if values.shape[0] != steps or values.shape[1] != nodes:
                raise DataError(
                    f"{name}: expected extents ({steps}, {nodes}, C), found {values.shape}"
                )
            start_timestamp = start_timestamp or start
        if start_timestamp is None:
            raise DataError(f"{name}: unknown dataset, data.start_timestamp must be set")

        if "P" in set(graph_mode) and not distances_path:
            raise DataError("predefined graph requires distances")
        distances = None
        if distances_path:
            distances = self.read_distances(distances_path)
            ends = distances[["from", "to"]].to_numpy()
            if np.any(ends >= values.shape[1]) or np.any(ends < 0):
                raise DataError(f"{distances_path}: node index outside 0..{values.shape[1] - 1}")

        dataset = TrafficDataset(values=values, start_timestamp=start_timestamp, interval=interval,
                                 distances=distances, name=name)
        missing = float((values == 0.0).mean())
        logger.info("Loaded %s: %d steps x %d nodes x %d channels (%.2f%% zeros)",
                    name, dataset.n_steps, dataset.n_nodes, dataset.n_channels, 100.0 * missing)
        return dataset


def load_pems(values_path: Union[str, Path], distances_path: Optional[Union[str, Path]] = None,
              graph_mode: Iterable[str] = (), name: Optional[str] = None,
              start_timestamp: Optional[str] = None, interval: int = 300) -> TrafficDataset:
    """Load a benchmark dataset; see PemsImporter.load."""
    return PemsImporter().load(values_path, distances_path, graph_mode, name, start_timestamp, interval)
