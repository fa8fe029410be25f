"""
Tests for node/edge ingestion, export and JSON emission.
"""

import json

import numpy as np
import pandas as pd
import pytest

from peernet.data_utils import DataUtils
from peernet.dgp import generate_replication_data
from peernet.errors import InputValidationError
from peernet.models import DgpConfig, TestReport


def _write(tmp_path, nodes, edges):
    nodes_path, edges_path = tmp_path / "nodes.csv", tmp_path / "edges.csv"
    nodes_path.write_text(nodes, encoding="utf-8")
    edges_path.write_text(edges, encoding="utf-8")
    return nodes_path, edges_path


def test_export_ingest_round_trip(tmp_path):
    """Exported schools read back bit for bit."""
    nets, data, _ = generate_replication_data(DgpConfig(n_schools=2, school_size=20, master_seed=4), 0)
    nodes_path, edges_path = DataUtils.export(nets, data, tmp_path)
    nets2, data2 = DataUtils.ingest(nodes_path, edges_path)
    assert [n.school_id for n in nets2] == ["0", "1"]
    for a, b in zip(nets, nets2):
        assert (a.adjacency != b.adjacency).nnz == 0
        assert a.node_ids == b.node_ids
    for a, b in zip(data, data2):
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.y, b.y)
        assert b.covariate_names == ("x1", "x2")

    DataUtils.export(nets2, data2, tmp_path, prefix="again_")
    assert (tmp_path / "again_nodes.csv").read_bytes() == nodes_path.read_bytes()


def test_ingest_isolated_only_school(tmp_path):
    nodes_path, edges_path = _write(
        tmp_path,
        "school_id,node_id,x1,gpa\nA,1,0.5,3.0\nA,2,1.5,2.0\nB,1,2.0,1.0\nB,2,0.0,4.0\n",
        "school_id,src,dst\nA,1,2\n",
    )
    nets, data = DataUtils.ingest(nodes_path, edges_path)
    assert nets[1].n_iso == 2
    np.testing.assert_array_equal(nets[0].iso_mask, [0, 1])
    np.testing.assert_array_equal(data[1].y, [1.0, 4.0])


def test_ingest_without_outcome(tmp_path):
    nodes_path, edges_path = _write(tmp_path, "school_id,node_id,x1\nA,1,0.5\nA,2,1.5\n", "school_id,src,dst\n")
    _, data = DataUtils.ingest(nodes_path, edges_path)
    assert np.isnan(data[0].y).all()


@pytest.mark.parametrize("nodes,edges,message", [
    ("school_id,node_id,x1\nA,1,0.5\nA,1,1.5\n", "school_id,src,dst\n", "Duplicate"),
    ("school_id,node_id,x1\nA,1,0.5\nA,2,\n", "school_id,src,dst\n", "missing covariate"),
    ("school_id,node_id,x1\nA,1,0.5\nB,2,1.5\n", "school_id,src,dst\nA,1,2\n", "cross-school"),
    ("school_id,node_id,x1\nA,1,0.5\nA,2,1.5\n", "school_id,src,dst\nC,1,2\n", "unknown schools"),
    ("school_id,node_id\nA,1\nA,2\n", "school_id,src,dst\n", "no covariate"),
])
def test_ingest_rejects_bad_tables(tmp_path, nodes, edges, message):
    nodes_path, edges_path = _write(tmp_path, nodes, edges)
    with pytest.raises(InputValidationError, match=message):
        DataUtils.ingest(nodes_path, edges_path)


def test_one_hot():
    frame = pd.DataFrame({"school_id": ["A"] * 3, "race": ["white", "black", "asian"], "age": [15, 16, 17]})
    out = DataUtils.one_hot(frame, {"race": "white"})
    assert list(out.columns) == ["school_id", "race_asian", "race_black", "age"]
    np.testing.assert_array_equal(out["race_black"], [0.0, 1.0, 0.0])
    with pytest.raises(InputValidationError):
        DataUtils.one_hot(frame, {"race": "martian"})


def test_write_json_replaces_nan(tmp_path):
    path = DataUtils.write_json(tmp_path / "out.json", {
        "value": np.float64("nan"), "array": np.array([1.0, np.inf]), "report": TestReport(weak_iv_F=2.5),
    })
    loaded = json.loads(path.read_text(encoding="utf-8"))
    assert loaded["value"] is None
    assert loaded["array"] == [1.0, None]
    assert loaded["report"]["weak_iv_F"] == 2.5


def test_write_csv(tmp_path):
    path = DataUtils.write_csv(tmp_path / "rows.csv", [{"a": 1, "b": 0.1}, {"a": 2, "b": 0.2}])
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["a", "b"]
    assert len(frame) == 2
