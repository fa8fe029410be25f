"""
CSV and JSON helpers: node/edge ingestion, export and report emission.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from .errors import InputValidationError
from .netgraph import SchoolNetwork, read_edge_list
from .structsim import SchoolData

logger = logging.getLogger(__name__)

NODE_KEYS = ("school_id", "node_id")
OUTCOME_COLUMN = "gpa"
FLOAT_FORMAT = "%.17g"


class DataUtils:
    """Helper class for reading and writing school data."""

    @staticmethod
    def one_hot(frame: pd.DataFrame, categorical: Dict[str, str]) -> pd.DataFrame:
        """
        Replace each categorical column by indicators of its non-omitted levels.

        Args:
            frame: Node table
            categorical: Column name -> omitted category

        Returns:
            Node table with indicator columns named <column>_<level>
        """
        out = frame.copy()
        for column, omitted in categorical.items():
            if column not in out.columns:
                raise InputValidationError(f"Categorical column {column} not found", module="cli")
            labels = out[column].astype(str)
            levels = sorted(labels.unique())
            if str(omitted) not in levels:
                raise InputValidationError(
                    f"Omitted category {omitted!r} does not occur in column {column} (levels {levels})", module="cli"
                )
            position = out.columns.get_loc(column)
            dummies = {f"{column}_{level}": (labels == level).astype(float) for level in levels if level != str(omitted)}
            out = out.drop(columns=[column])
            for offset, (name, values) in enumerate(dummies.items()):
                out.insert(position + offset, name, values)
        return out

    @staticmethod
    def ingest(
        nodes_csv: Union[str, Path],
        edges_csv: Union[str, Path],
        categorical: Optional[Dict[str, str]] = None,
    ) -> Tuple[List[SchoolNetwork], List[SchoolData]]:
        """
        Read the node and edge tables into per-school networks and data.

        Args:
            nodes_csv: Columns school_id, node_id, covariates..., optional gpa
            edges_csv: Columns school_id, src, dst
            categorical: Categorical covariates and their omitted category

        Returns:
            (nets, data) in order of first appearance of each school
        """
        nodes = pd.read_csv(
            nodes_csv, dtype={k: str for k in NODE_KEYS}, encoding="utf-8", float_precision="round_trip"
        )
        missing_keys = [k for k in NODE_KEYS if k not in nodes.columns]
        if missing_keys:
            raise InputValidationError(f"Node table {nodes_csv} is missing columns {missing_keys}", module="cli")
        if nodes.duplicated(subset=list(NODE_KEYS)).any():
            dup = nodes[nodes.duplicated(subset=list(NODE_KEYS))].iloc[0]
            raise InputValidationError(f"Duplicate node {dup.node_id} in school {dup.school_id}", module="cli")
        nodes = DataUtils.one_hot(nodes, categorical or {})
        covariates = [c for c in nodes.columns if c not in NODE_KEYS and c != OUTCOME_COLUMN]
        if not covariates:
            raise InputValidationError(f"Node table {nodes_csv} has no covariate columns", module="cli")

        incomplete = nodes[covariates].isna().any(axis=1)
        if incomplete.any():
            rows = nodes.loc[incomplete, list(NODE_KEYS)].head(5).to_dict(orient="records")
            raise InputValidationError(
                f"{int(incomplete.sum())} nodes have missing covariate cells, e.g. {rows}", module="cli"
            )
        try:
            values = nodes[covariates].apply(pd.to_numeric)
        except (ValueError, TypeError) as e:
            raise InputValidationError(f"Non-numeric covariate value: {e}", module="cli")
        has_outcome = OUTCOME_COLUMN in nodes.columns
        if has_outcome and nodes[OUTCOME_COLUMN].isna().any():
            raise InputValidationError(f"{int(nodes[OUTCOME_COLUMN].isna().sum())} nodes lack a gpa value", module="cli")

        edges = read_edge_list(edges_csv)
        members = nodes.groupby("school_id", sort=False)["node_id"].apply(set).to_dict()
        unknown_schools = sorted(set(edges["school_id"]) - set(members))
        if unknown_schools:
            raise InputValidationError(f"Edges reference unknown schools {unknown_schools}", module="cli")
        known = set().union(*members.values())
        cross = []
        for row in edges.itertuples(index=False):
            school_nodes = members.get(row.school_id, set())
            for node in (row.src, row.dst):
                if node not in school_nodes and node in known:
                    cross.append(f"{row.school_id}:{row.src}->{row.dst}")
                    break
        if cross:
            raise InputValidationError(f"{len(cross)} cross-school edges: {cross[:10]}", module="cli")

        nets, data = [], []
        grouped_edges = {sid: frame for sid, frame in edges.groupby("school_id", sort=False)}
        for school_id, frame in nodes.groupby("school_id", sort=False):
            school_edges = grouped_edges.get(school_id, edges.iloc[0:0])
            net = SchoolNetwork.from_edges(
                school_id, frame["node_id"].tolist(), school_edges["src"].tolist(), school_edges["dst"].tolist()
            )
            y = frame[OUTCOME_COLUMN].to_numpy(dtype=float) if has_outcome else np.full(len(frame), np.nan)
            nets.append(net)
            data.append(SchoolData(
                X=values.loc[frame.index].to_numpy(dtype=float), y=y, covariate_names=tuple(covariates),
            ))
        logger.info(f"Ingested {len(nets)} schools, {len(nodes)} students, {len(edges)} edges")
        return nets, data

    @staticmethod
    def export(
        nets: Sequence[SchoolNetwork],
        data: Sequence[SchoolData],
        out_dir: Union[str, Path],
        prefix: str = "",
    ) -> Tuple[Path, Path]:
        """
        Write node and edge tables that ingest reads back unchanged.

        Returns:
            Paths of the node and edge CSV files
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        node_frames, edge_frames = [], []
        for net, d in zip(nets, data):
            frame = pd.DataFrame(d.X, columns=list(d.covariate_names))
            frame.insert(0, "node_id", list(net.node_ids))
            frame.insert(0, "school_id", net.school_id)
            if not np.isnan(d.y).all():
                frame[OUTCOME_COLUMN] = d.y
            node_frames.append(frame)
            coo = net.adjacency.tocoo()
            order = np.lexsort((coo.col, coo.row))
            edge_frames.append(pd.DataFrame({
                "school_id": net.school_id,
                "src": [net.node_ids[i] for i in coo.row[order]],
                "dst": [net.node_ids[j] for j in coo.col[order]],
            }))
        nodes_path = out_dir / f"{prefix}nodes.csv"
        edges_path = out_dir / f"{prefix}edges.csv"
        pd.concat(node_frames, ignore_index=True).to_csv(nodes_path, index=False, float_format=FLOAT_FORMAT)
        pd.concat(edge_frames, ignore_index=True).to_csv(edges_path, index=False)
        return nodes_path, edges_path

    @staticmethod
    def jsonable(obj: Any) -> Any:
        """Convert models, numpy values and NaN into plain JSON values (NaN becomes null)."""
        if isinstance(obj, BaseModel):
            return DataUtils.jsonable(obj.model_dump(mode="python"))
        if isinstance(obj, dict):
            return {str(k): DataUtils.jsonable(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [DataUtils.jsonable(v) for v in obj]
        if isinstance(obj, np.ndarray):
            return DataUtils.jsonable(obj.tolist())
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, (float, np.floating)):
            value = float(obj)
            return None if math.isnan(value) or math.isinf(value) else value
        if hasattr(obj, "value") and isinstance(getattr(obj, "value"), (str, int)):
            return obj.value
        return obj

    @staticmethod
    def write_json(path: Union[str, Path], obj: Any) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(DataUtils.jsonable(obj), fh, indent=2, allow_nan=False)
        return path

    @staticmethod
    def write_csv(path: Union[str, Path], rows: Union[pd.DataFrame, Sequence[Dict]]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        return path
