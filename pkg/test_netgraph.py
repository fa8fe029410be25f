"""
Tests for school networks, annihilators and identification checks.
"""

import logging

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.csgraph import shortest_path

from peernet.errors import InputValidationError
from peernet.netgraph import (
    SchoolNetwork,
    build_annihilator,
    check_distance3,
    check_linmaps_independence,
    check_variance_identification,
    identity_annihilator,
    read_edge_list,
    row_normalize,
)


def test_row_normalize_chain(chain_net):
    """Each non-isolated row of the chain holds a single 1."""
    G = chain_net.interaction.dense()
    expected = np.zeros((4, 4))
    expected[0, 2] = expected[2, 3] = expected[3, 1] = 1.0
    np.testing.assert_array_equal(G, expected)
    np.testing.assert_array_equal(chain_net.iso_mask, [0, 1, 0, 0])


def test_row_normalize_degrees():
    """Rows sum to one, or stay zero for isolated students."""
    A = np.zeros((5, 5))
    A[0, [1, 2, 3]] = 1.0
    A[4, 0] = 1.0
    G = row_normalize(A)
    np.testing.assert_allclose(G.dense()[0, [1, 2, 3]], 1.0 / 3.0)
    np.testing.assert_array_equal(G.row_sums(), [1.0, 0.0, 0.0, 0.0, 1.0])
    assert row_normalize(np.zeros((3, 3))).G.nnz == 0


@pytest.mark.parametrize("bad", [np.eye(3), np.array([[0, 2, 0], [0, 0, 1], [1, 0, 0]])])
def test_row_normalize_rejects_invalid(bad):
    """Self-loops and non-binary entries are input errors."""
    with pytest.raises(InputValidationError):
        row_normalize(bad)


def test_masks_partition(random_net):
    net = random_net(25, 0.05, seed=3)
    np.testing.assert_array_equal(net.iso_mask + net.noniso_mask, 1)
    np.testing.assert_array_equal(net.noniso_mask, net.interaction.row_sums())
    assert np.all(net.fully_isolated_mask <= net.iso_mask)


def test_annihilator_two_groups():
    """Two isolated and two non-isolated students give two centering blocks."""
    A = np.zeros((4, 4))
    A[2, 3] = A[3, 2] = 1.0
    ann = build_annihilator(SchoolNetwork("s", sp.csr_matrix(A)))
    block = np.array([[0.5, -0.5], [-0.5, 0.5]])
    np.testing.assert_allclose(ann.J[:2, :2], block, atol=1e-12)
    np.testing.assert_allclose(ann.J[2:, 2:], block, atol=1e-12)
    np.testing.assert_allclose(ann.J[:2, 2:], 0.0, atol=1e-12)
    assert ann.width == 2


def test_annihilator_single_group():
    A = np.ones((3, 3)) - np.eye(3)
    ann = build_annihilator(SchoolNetwork("s", sp.csr_matrix(A)))
    np.testing.assert_allclose(ann.J, np.eye(3) - np.ones((3, 3)) / 3.0, atol=1e-12)
    assert ann.width == 2


def test_annihilator_properties(random_net):
    """J is a symmetric projection killing both status indicators, and FF' = J."""
    net = random_net(30, 0.04, seed=8)
    assert 0 < net.n_iso < net.n
    ann = build_annihilator(net)
    J, F = ann.J, ann.F
    np.testing.assert_allclose(J, J.T, atol=1e-10)
    np.testing.assert_allclose(J @ J, J, atol=1e-10)
    np.testing.assert_allclose(J @ net.iso_mask, 0.0, atol=1e-12)
    np.testing.assert_allclose(J @ net.noniso_mask, 0.0, atol=1e-12)
    np.testing.assert_allclose(F.T @ F, np.eye(ann.width), atol=1e-10)
    np.testing.assert_allclose(F @ F.T, J, atol=1e-10)
    assert ann.width == net.n - 2

    M = np.random.default_rng(0).standard_normal((net.n, 3))
    np.testing.assert_allclose(ann.apply(M), J @ M, atol=1e-12)
    Q, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((ann.width, ann.width)))
    np.testing.assert_allclose((F @ Q) @ (F @ Q).T, J, atol=1e-10)


def test_identity_annihilator():
    ann = identity_annihilator(5)
    np.testing.assert_array_equal(ann.J, np.eye(5))
    assert ann.width == 5


def test_distance3_chain(chain_net):
    report = check_distance3(chain_net)
    assert report.passed
    assert report.witness == (0, 1)


def test_distance3_star_and_cycle():
    """A star has no pair at distance three; a directed 5-cycle does."""
    star = np.zeros((6, 6))
    star[1:, 0] = 1.0
    assert not check_distance3(SchoolNetwork("star", sp.csr_matrix(star))).passed
    cycle = np.roll(np.eye(5), 1, axis=1)
    assert check_distance3(SchoolNetwork("cycle", sp.csr_matrix(cycle))).passed


def test_distance3_matches_shortest_path_oracle(random_net):
    """BFS check agrees with all-pairs shortest paths on small random graphs."""
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 13))
        net = random_net(n, float(rng.uniform(0.05, 0.5)), seed=seed)
        dist = shortest_path(net.adjacency, method="D", directed=True, unweighted=True)
        report = check_distance3(net)
        assert report.passed == bool(np.any(dist == 3)), seed
        if report.passed:
            i, l = report.witness
            assert dist[i, l] == 3


def test_variance_identification(chain_star_net):
    """The chain with a shared friend passes; an all-isolated school and two reciprocal dyads do not."""
    report = check_variance_identification([chain_star_net])
    assert report.passed
    assert report.rank == 3

    empty = SchoolNetwork("empty", sp.csr_matrix((5, 5)))
    assert not check_variance_identification([empty]).passed

    dyads = np.zeros((4, 4))
    dyads[0, 1] = dyads[1, 0] = dyads[2, 3] = dyads[3, 2] = 1.0
    report = check_variance_identification([SchoolNetwork("dyads", sp.csr_matrix(dyads))])
    assert not report.passed
    assert report.rank < report.required_rank


def test_linmaps_independence(chain_net):
    assert check_linmaps_independence(chain_net).passed
    assert not check_linmaps_independence(SchoolNetwork("e", sp.csr_matrix((4, 4)))).passed
    complete = np.ones((5, 5)) - np.eye(5)
    assert not check_linmaps_independence(SchoolNetwork("k5", sp.csr_matrix(complete))).passed


def test_interaction_spectrum(random_net):
    G = random_net(20, 0.15, seed=4).interaction.dense()
    assert np.all(np.abs(np.linalg.eigvals(G)) <= 1.0 + 1e-10)


def test_from_edges_collapses_duplicates(caplog):
    with caplog.at_level(logging.WARNING, logger="peernet"):
        net = SchoolNetwork.from_edges("s", ["a", "b", "c"], ["a", "a", "b"], ["b", "b", "c"])
    assert net.adjacency.nnz == 2
    assert "duplicate" in caplog.text


def test_from_edges_unknown_node():
    with pytest.raises(InputValidationError):
        SchoolNetwork.from_edges("s", ["a", "b"], ["a"], ["z"])


def test_read_edge_list(tmp_path):
    path = tmp_path / "edges.csv"
    path.write_text("school_id,src,dst\n1,a,b\n1,b,c\n", encoding="utf-8")
    edges = read_edge_list(path)
    assert list(edges.columns) == ["school_id", "src", "dst"]
    assert len(edges) == 2

    path.write_text("school_id,src,dst\n1,a,a\n", encoding="utf-8")
    with pytest.raises(InputValidationError):
        read_edge_list(path)

    path.write_text("school,src,dst\n1,a,b\n", encoding="utf-8")
    with pytest.raises(InputValidationError):
        read_edge_list(path)
