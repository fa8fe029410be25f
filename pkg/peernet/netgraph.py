"""
Per-school directed friendship networks, fixed-effect annihilators and
graph-based identification checks.
"""

import logging
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy import linalg

from .config import IDENT_RANK_TOL
from .errors import InputValidationError

logger = logging.getLogger(__name__)

EDGE_COLUMNS = ("school_id", "src", "dst")


def _as_binary_csr(adjacency) -> sp.csr_matrix:
    """Validate a 0/1 adjacency with zero diagonal and return it in CSR form."""
    A = sp.csr_matrix(adjacency, dtype=float, copy=True)
    if A.shape[0] != A.shape[1]:
        raise InputValidationError(f"Adjacency matrix must be square, got {A.shape}", module="netgraph")
    A.eliminate_zeros()
    if np.any(A.diagonal() != 0):
        raise InputValidationError("Adjacency matrix has a nonzero diagonal entry", module="netgraph")
    if A.nnz and not np.all(A.data == 1.0):
        raise InputValidationError("Adjacency entries must be 0 or 1", module="netgraph")
    return A


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    """Row-normalized adjacency; each row sums to one, or to zero for an isolated student."""

    G: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.G.shape[0]

    def dense(self) -> np.ndarray:
        return self.G.toarray()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.G.sum(axis=1)).ravel()


def row_normalize(adjacency) -> InteractionMatrix:
    """
    Build the interaction matrix G from a binary adjacency matrix.

    Args:
        adjacency: n x n binary matrix (dense or sparse) with zero diagonal

    Returns:
        InteractionMatrix with g_ij = 1/n_i for nominated friends
    """
    A = _as_binary_csr(adjacency)
    degree = np.asarray(A.sum(axis=1)).ravel()
    inv = np.divide(1.0, degree, out=np.zeros_like(degree), where=degree > 0)
    G = sp.diags(inv) @ A
    return InteractionMatrix(G=sp.csr_matrix(G))


@dataclass(frozen=True, eq=False)
class SchoolNetwork:
    """Directed friendship network of one school."""

    school_id: str
    adjacency: sp.csr_matrix
    node_ids: Tuple[str, ...] = ()

    def __post_init__(self):
        A = _as_binary_csr(self.adjacency)
        if A.shape[0] < 1:
            raise InputValidationError(f"School {self.school_id} has no students", module="netgraph")
        object.__setattr__(self, "adjacency", A)
        if not self.node_ids:
            object.__setattr__(self, "node_ids", tuple(str(i) for i in range(A.shape[0])))
        elif len(self.node_ids) != A.shape[0]:
            raise InputValidationError(
                f"School {self.school_id}: {len(self.node_ids)} node ids for {A.shape[0]} nodes",
                module="netgraph",
            )

    @classmethod
    def from_edges(
        cls,
        school_id: str,
        node_ids: Sequence[str],
        src: Sequence[str],
        dst: Sequence[str],
    ) -> "SchoolNetwork":
        """Build a network from an edge list; duplicate edges are collapsed."""
        node_ids = tuple(str(v) for v in node_ids)
        index = {node: i for i, node in enumerate(node_ids)}
        rows, cols = [], []
        for s, d in zip(src, dst):
            s, d = str(s), str(d)
            for node in (s, d):
                if node not in index:
                    raise InputValidationError(
                        f"Edge {s}->{d} in school {school_id} references unknown node {node}",
                        module="netgraph",
                    )
            if s == d:
                raise InputValidationError(f"Self-loop on node {s} in school {school_id}", module="netgraph")
            rows.append(index[s])
            cols.append(index[d])
        n = len(node_ids)
        A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        A.sum_duplicates()
        duplicates = len(rows) - A.nnz
        if duplicates:
            logger.warning(f"School {school_id}: collapsed {duplicates} duplicate edges")
            A.data[:] = 1.0
        return cls(school_id=str(school_id), adjacency=A, node_ids=node_ids)

    def induced(self, keep: np.ndarray) -> "SchoolNetwork":
        """Subnetwork on the kept students; links to dropped students are removed."""
        idx = np.flatnonzero(np.asarray(keep, dtype=bool))
        return SchoolNetwork(
            school_id=self.school_id,
            adjacency=self.adjacency[idx][:, idx],
            node_ids=tuple(self.node_ids[i] for i in idx),
        )

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @cached_property
    def interaction(self) -> InteractionMatrix:
        return row_normalize(self.adjacency)

    @property
    def G(self) -> sp.csr_matrix:
        return self.interaction.G

    @cached_property
    def out_degree(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel().astype(int)

    @cached_property
    def in_degree(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=0)).ravel().astype(int)

    @cached_property
    def iso_mask(self) -> np.ndarray:
        return (self.out_degree == 0).astype(int)

    @cached_property
    def noniso_mask(self) -> np.ndarray:
        return 1 - self.iso_mask

    @property
    def fully_isolated_mask(self) -> np.ndarray:
        return ((self.out_degree == 0) & (self.in_degree == 0)).astype(int)

    @property
    def n_iso(self) -> int:
        return int(self.iso_mask.sum())

    @property
    def n_noniso(self) -> int:
        return int(self.noniso_mask.sum())


@dataclass(frozen=True, eq=False)
class Annihilator:
    """Projection J removing group intercepts, with an orthonormal basis F of its range."""

    J: np.ndarray
    F: np.ndarray
    groups: np.ndarray
    n_groups: int

    @property
    def width(self) -> int:
        return self.F.shape[1]

    def apply(self, M: np.ndarray) -> np.ndarray:
        """Compute J @ M by group demeaning."""
        out = np.array(M, dtype=float, copy=True)
        for g in range(self.n_groups):
            idx = self.groups == g
            out[idx] -= out[idx].mean(axis=0)
        return out


def _annihilator_from_groups(groups: np.ndarray, n_groups: int) -> Annihilator:
    n = len(groups)
    L = np.zeros((n, n_groups))
    for g in range(n_groups):
        idx = groups == g
        L[idx, g] = 1.0 / np.sqrt(idx.sum())
    J = np.eye(n) - L @ L.T
    if n_groups:
        Q, _ = linalg.qr(L, mode="full")
        F = Q[:, n_groups:]
    else:
        F = np.eye(n)
    return Annihilator(J=J, F=F, groups=groups, n_groups=n_groups)


def build_annihilator(net: SchoolNetwork, split_status: bool = True) -> Annihilator:
    """
    Annihilator of the school intercepts.

    With split_status, isolated and non-isolated students are demeaned
    separately; an empty group contributes nothing, so single-status schools
    get one centering block. Without it, the whole school is demeaned once.
    """
    if not split_status:
        return _annihilator_from_groups(np.zeros(net.n, dtype=int), 1)
    groups = np.full(net.n, -1, dtype=int)
    label = 0
    for mask in (net.iso_mask, net.noniso_mask):
        if mask.any():
            groups[mask == 1] = label
            label += 1
    return _annihilator_from_groups(groups, label)


def identity_annihilator(n: int) -> Annihilator:
    """No projection (global-intercept specification)."""
    return _annihilator_from_groups(np.full(n, -1, dtype=int), 0)


@dataclass(frozen=True)
class IdentificationReport:
    passed: bool
    witness: Optional[Tuple[int, int]] = None
    rank: Optional[int] = None
    required_rank: Optional[int] = None
    singular_values: Tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "witness": list(self.witness) if self.witness is not None else None,
            "rank": self.rank,
            "required_rank": self.required_rank,
            "singular_values": list(self.singular_values),
        }


def check_distance3(net: SchoolNetwork) -> IdentificationReport:
    """
    Look for a pair (i, l) whose shortest directed path has length exactly 3.

    Breadth-first search from every node, stopping at depth 3 and at the
    first witness found.
    """
    indptr, indices = net.adjacency.indptr, net.adjacency.indices
    for source in range(net.n):
        depth = np.full(net.n, -1, dtype=int)
        depth[source] = 0
        queue = deque([source])
        while queue:
            node = queue.popleft()
            if depth[node] == 3:
                continue
            for nxt in indices[indptr[node]:indptr[node + 1]]:
                if depth[nxt] < 0:
                    depth[nxt] = depth[node] + 1
                    if depth[nxt] == 3:
                        return IdentificationReport(passed=True, witness=(source, int(nxt)))
                    queue.append(nxt)
    return IdentificationReport(passed=False)


def _rank_report(columns: List[np.ndarray], required: int) -> IdentificationReport:
    stacked = np.column_stack(columns)
    sv = linalg.svd(stacked, compute_uv=False)
    rank = int(np.sum(sv > IDENT_RANK_TOL * sv[0])) if sv.size and sv[0] > 0 else 0
    return IdentificationReport(
        passed=rank == required, rank=rank, required_rank=required,
        singular_values=tuple(float(s) for s in sv),
    )


def check_variance_identification(nets: Sequence[SchoolNetwork]) -> IdentificationReport:
    """Rank test on vec(J), vec(J(G+G')J) and vec(J G G' J) stacked over schools."""
    blocks = [[], [], []]
    for net in nets:
        J = build_annihilator(net).J
        G = net.interaction.dense()
        blocks[0].append(J.ravel())
        blocks[1].append((J @ (G + G.T) @ J).ravel())
        blocks[2].append((J @ G @ G.T @ J).ravel())
    return _rank_report([np.concatenate(b) for b in blocks], required=3)


def check_linmaps_independence(net: SchoolNetwork) -> IdentificationReport:
    """Rank test on vec(I), vec(G), vec(G^2), vec(G^3)."""
    G = net.interaction.dense()
    mats = [np.eye(net.n)]
    for _ in range(3):
        mats.append(mats[-1] @ G)
    return _rank_report([m.ravel() for m in mats], required=4)


def read_edge_list(path: Union[str, Path]) -> pd.DataFrame:
    """
    Read an edge-list CSV with header school_id,src,dst.

    Self-loops are rejected; duplicate edges are dropped and counted in the log.
    """
    edges = pd.read_csv(path, dtype=str, encoding="utf-8", keep_default_na=False)
    missing = [c for c in EDGE_COLUMNS if c not in edges.columns]
    if missing:
        raise InputValidationError(f"Edge list {path} is missing columns {missing}", module="netgraph")
    edges = edges[list(EDGE_COLUMNS)]
    loops = edges[edges["src"] == edges["dst"]]
    if len(loops):
        first = loops.iloc[0]
        raise InputValidationError(
            f"Edge list {path} has {len(loops)} self-loops (e.g. school {first.school_id}, node {first.src})",
            module="netgraph",
        )
    before = len(edges)
    edges = edges.drop_duplicates().reset_index(drop=True)
    if len(edges) < before:
        logger.warning(f"Edge list {path}: collapsed {before - len(edges)} duplicate edges")
    return edges
