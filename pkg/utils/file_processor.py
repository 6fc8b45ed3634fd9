import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from models.data_models import DirectedGraph
from models.errors import ConfigError, DesignFileError, EdgeListError

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)

EDGE_COLUMNS = ["src", "dst"]
DESIGN_COLUMNS = ["node", "treatment", "outcome"]
POTENTIAL_COLUMNS = ["node", "y00", "y01", "y10", "y11"]


class FileProcessor:
    """Handles reading and writing of edge lists, design tables, configs and results"""

    def __init__(self):
        self.supported_formats = [".csv", ".json"]

    def _read_table(self, file_path: str, required: Sequence[str], error_cls) -> pd.DataFrame:
        path = Path(file_path)
        if not path.exists():
            raise FileNotFoundError(f"File not found: {file_path}")
        try:
            frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8", skipinitialspace=True)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise error_cls(f"{path.name}: cannot parse CSV ({e})")
        frame.columns = [str(c).strip() for c in frame.columns]
        missing = [c for c in required if c not in frame.columns]
        if missing:
            raise error_cls(f"{path.name}: missing column(s) {', '.join(missing)}")
        return frame

    @staticmethod
    def _line(row_index: int) -> int:
        # header is line 1
        return row_index + 2

    def read_edge_rows(self, file_path: str) -> List[Tuple[str, str, Optional[str], int]]:
        """Raw (src, dst, stratum, line) rows of an edge-list CSV"""
        frame = self._read_table(file_path, EDGE_COLUMNS, EdgeListError)
        has_stratum = "stratum" in frame.columns
        rows = []
        for k, record in enumerate(frame.itertuples(index=False)):
            src, dst = str(record.src).strip(), str(record.dst).strip()
            if not src or not dst:
                raise EdgeListError("empty node id", line=self._line(k))
            stratum = str(record.stratum).strip() if has_stratum else None
            rows.append((src, dst, stratum, self._line(k)))
        return rows

    @staticmethod
    def node_list_path(file_path: str) -> Path:
        return Path(file_path).with_suffix(".nodes.csv")

    def read_edge_list(
        self,
        file_path: str,
        n_nodes: Optional[int] = None,
        node_index: Optional[Dict[str, int]] = None,
        node_group: Optional[Sequence[str]] = None,
    ) -> DirectedGraph:
        """Read `src,dst[,stratum]` rows into a graph.

        With node_index, string ids are mapped through it. Otherwise the
        `<name>.nodes.csv` node list written next to the edge list supplies
        the index and any groups; failing that the ids must be integers
        0..n-1, and n_nodes defaults to the largest index + 1.
        """
        nodes_path = self.node_list_path(file_path)
        if node_index is None and n_nodes is None and nodes_path.exists():
            node_index = self.read_node_index(str(nodes_path))
            if node_group is None:
                frame = self._read_table(str(nodes_path), ["node"], EdgeListError)
                if "group" in frame.columns:
                    node_group = [str(g).strip() for g in frame["group"]]
        rows = self.read_edge_rows(file_path)
        pairs = []
        for src, dst, _, line in rows:
            if node_index is not None:
                unknown = [v for v in (src, dst) if v not in node_index]
                if unknown:
                    raise EdgeListError(f"unknown node id '{unknown[0]}'", line=line)
                pairs.append((node_index[src], node_index[dst]))
            else:
                try:
                    pairs.append((int(src), int(dst)))
                except ValueError:
                    raise EdgeListError(f"node ids must be integers, got '{src},{dst}'", line=line)

        if node_index is not None:
            n_nodes = len(node_index)
        elif n_nodes is None:
            n_nodes = max((max(s, d) for s, d in pairs), default=-1) + 1
        if n_nodes < 1:
            raise EdgeListError(f"{Path(file_path).name}: no nodes (pass n_nodes or add {nodes_path.name})")

        seen = set()
        for (src, dst), (raw_src, _, _, line) in zip(pairs, rows):
            if src == dst:
                raise EdgeListError(f"self-loop at node {raw_src}", line=line)
            if not (0 <= src < n_nodes and 0 <= dst < n_nodes):
                raise EdgeListError(f"node index out of range [0, {n_nodes})", line=line)
            if (src, dst) in seen:
                raise EdgeListError(f"duplicate edge {src}->{dst}", line=line)
            seen.add((src, dst))

        in_neighbors: List[List[int]] = [[] for _ in range(n_nodes)]
        strata: List[List[str]] = [[] for _ in range(n_nodes)]
        has_stratum = bool(rows) and rows[0][2] is not None
        for (src, dst), (_, _, stratum, _) in zip(pairs, rows):
            in_neighbors[dst].append(src)
            strata[dst].append(stratum)
        try:
            return DirectedGraph(
                n_nodes=n_nodes,
                in_neighbors=in_neighbors,
                edge_stratum=strata if has_stratum else None,
                node_group=node_group,
            )
        except ValidationError as e:
            raise EdgeListError(f"{Path(file_path).name}: {e.errors()[0]['msg']}")

    def write_edge_list(self, graph: DirectedGraph, file_path: str, node_ids: Optional[Sequence[str]] = None):
        """Write the graph as `src,dst[,stratum]`, ordered by destination then source.

        The full node list (with groups) goes to `<name>.nodes.csv`, so
        isolated nodes survive a round trip.
        """
        names = list(node_ids) if node_ids is not None else list(range(graph.n_nodes))
        if len(names) != graph.n_nodes:
            raise ValueError(f"{len(names)} node ids for {graph.n_nodes} nodes")
        nodes = pd.DataFrame({"node": names})
        if graph.node_group is not None:
            nodes["group"] = list(graph.node_group)
        self.write_table(nodes, str(self.node_list_path(file_path)))
        records = []
        for dst, row in enumerate(graph.in_neighbors):
            labels = graph.edge_stratum[dst] if graph.edge_stratum is not None else [None] * len(row)
            for src, label in zip(row, labels):
                record = {"src": names[src], "dst": names[dst]}
                if graph.edge_stratum is not None:
                    record["stratum"] = label
                records.append(record)
        columns = EDGE_COLUMNS + (["stratum"] if graph.edge_stratum is not None else [])
        Path(file_path).parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(records, columns=columns).to_csv(file_path, index=False)

    def read_design(self, file_path: str) -> pd.DataFrame:
        """Design table with columns node (str), treatment (int), outcome (float) and optional group"""
        frame = self._read_table(file_path, DESIGN_COLUMNS, DesignFileError)
        nodes, treatment, outcome = [], [], []
        for k, record in enumerate(frame.itertuples(index=False)):
            line = self._line(k)
            node = str(record.node).strip()
            if not node:
                raise DesignFileError("empty node id", line=line)
            if str(record.treatment).strip() not in ("0", "1"):
                raise DesignFileError(f"treatment must be 0 or 1, got '{record.treatment}'", line=line)
            try:
                value = float(record.outcome)
            except ValueError:
                raise DesignFileError(f"outcome is not a number: '{record.outcome}'", line=line)
            if not np.isfinite(value):
                raise DesignFileError(f"outcome is not finite: '{record.outcome}'", line=line)
            nodes.append(node)
            treatment.append(int(str(record.treatment).strip()))
            outcome.append(value)
        duplicated = pd.Series(nodes).duplicated()
        if duplicated.any():
            k = int(np.flatnonzero(duplicated.to_numpy())[0])
            raise DesignFileError(f"duplicate node id '{nodes[k]}'", line=self._line(k))
        design = pd.DataFrame({"node": nodes, "treatment": treatment, "outcome": outcome})
        if "group" in frame.columns:
            design["group"] = [str(g).strip() for g in frame["group"]]
        if design.empty:
            raise DesignFileError(f"{Path(file_path).name}: no subjects")
        return design

    def read_node_index(self, file_path: str) -> Dict[str, int]:
        """Dense index of the `node` column, in file order"""
        frame = self._read_table(file_path, ["node"], DesignFileError)
        index: Dict[str, int] = {}
        for k, raw in enumerate(frame["node"]):
            node = str(raw).strip()
            if not node:
                raise DesignFileError("empty node id", line=self._line(k))
            if node in index:
                raise DesignFileError(f"duplicate node id '{node}'", line=self._line(k))
            index[node] = len(index)
        return index

    def read_potential_outcomes(self, file_path: str, node_index: Dict[str, int]) -> np.ndarray:
        """(n, 4) table of potential outcomes ordered by node_index"""
        frame = self._read_table(file_path, POTENTIAL_COLUMNS, DesignFileError)
        table = np.full((len(node_index), 4), np.nan)
        for k, record in enumerate(frame.itertuples(index=False)):
            line = self._line(k)
            node = str(record.node).strip()
            if node not in node_index:
                raise DesignFileError(f"unknown node id '{node}'", line=line)
            try:
                table[node_index[node]] = [float(getattr(record, c)) for c in POTENTIAL_COLUMNS[1:]]
            except ValueError:
                raise DesignFileError("potential outcomes must be numbers", line=line)
        missing = np.flatnonzero(np.isnan(table).any(axis=1))
        if missing.size:
            raise DesignFileError(f"{Path(file_path).name}: {missing.size} node(s) have no potential outcomes")
        return table

    def load_model(self, file_path: str, model_cls: Type[ModelT]) -> ModelT:
        """Parse a JSON config file into a pydantic model"""
        path = Path(file_path)
        if not path.exists():
            raise FileNotFoundError(f"File not found: {file_path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path.name}: invalid JSON at line {e.lineno}: {e.msg}")
        return self.validate_model(raw, model_cls, path.name)

    @staticmethod
    def validate_model(raw: dict, model_cls: Type[ModelT], source: str = "config") -> ModelT:
        try:
            return model_cls.model_validate(raw)
        except ValidationError as e:
            first = e.errors()[0]
            where = ".".join(str(part) for part in first["loc"]) or "<root>"
            raise ConfigError(f"{source}: {where}: {first['msg']}")

    def write_json(self, payload: dict, file_path: str) -> Path:
        """Write JSON; floats use Python's shortest round-trip repr"""
        path = Path(file_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, default=str)
            f.write("\n")
        return path

    def write_table(self, frame: pd.DataFrame, file_path: str) -> Path:
        path = Path(file_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
        return path

    @staticmethod
    def file_digest(file_path: str) -> str:
        digest = hashlib.sha256()
        with open(file_path, "rb") as f:
            for block in iter(lambda: f.read(65536), b""):
                digest.update(block)
        return digest.hexdigest()
