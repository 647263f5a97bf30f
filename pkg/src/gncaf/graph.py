"""Context graph over foreground tiles.

Nodes are foreground tiles, edges join 4-connected tiles, and propagation
uses the symmetric normalization ``D^-1/2 (A + I) D^-1/2`` where ``D`` holds
the degrees of ``A + I``.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .tiling import TileGrid

__all__ = [
    "UNREACHABLE",
    "ContextGraph",
    "EgoSubgraph",
    "build_context_graph",
    "normalize_adjacency",
    "hop_distance",
    "bfs_distances",
    "ego_subgraph",
    "hop_neighborhoods",
    "save_graph",
    "load_graph",
]

UNREACHABLE = -1


def _canonical_edges(edges, n: int) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise ValueError("edge endpoint out of range")
    if np.any(e[:, 0] == e[:, 1]):
        raise ValueError("self-loops are implicit and must not be listed")
    e = np.sort(e, axis=1)
    e = np.unique(e, axis=0)
    return e


def _degrees(edges: np.ndarray, n: int) -> np.ndarray:
    deg = np.ones(n, dtype=np.int64)
    np.add.at(deg, edges[:, 0], 1)
    np.add.at(deg, edges[:, 1], 1)
    return deg


def _normalized(edges: np.ndarray, n: int, degrees: np.ndarray) -> sp.csr_matrix:
    rows = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
    cols = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
    inv_sqrt = 1.0 / np.sqrt(degrees.astype(np.float64))
    vals = inv_sqrt[rows] * inv_sqrt[cols]
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    mat.sort_indices()
    return mat


def normalize_adjacency(edges, n: int) -> sp.csr_matrix:
    """Return ``D^-1/2 (A + I) D^-1/2`` for an undirected edge list."""
    e = _canonical_edges(edges, n)
    return _normalized(e, n, _degrees(e, n))


@dataclass(frozen=True)
class ContextGraph:
    n_nodes: int
    edges: np.ndarray  # (E, 2), i < j, lexicographically sorted
    degrees_with_self_loop: np.ndarray
    normalized_adjacency: sp.csr_matrix
    grid_coords: np.ndarray

    @classmethod
    def from_edges(cls, edges, n: int, grid_coords=None) -> "ContextGraph":
        e = _canonical_edges(edges, n)
        deg = _degrees(e, n)
        coords = np.zeros((n, 2), dtype=np.int64) if grid_coords is None else np.asarray(grid_coords)
        return cls(n, e, deg, _normalized(e, n, deg), coords)

    @property
    def adjacency(self) -> sp.csr_matrix:
        """Unweighted symmetric adjacency without self-loops."""
        n = self.n_nodes
        e = self.edges
        data = np.ones(2 * len(e))
        return sp.coo_matrix(
            (data, (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n)
        ).tocsr()

    def neighbors(self, i: int) -> np.ndarray:
        adj = self._csr()
        return adj.indices[adj.indptr[i] : adj.indptr[i + 1]]

    def _csr(self) -> sp.csr_matrix:
        cache = self.__dict__.get("_adj_cache")
        if cache is None:
            cache = self.adjacency
            object.__setattr__(self, "_adj_cache", cache)
        return cache


def build_context_graph(grid: TileGrid) -> ContextGraph:
    if grid.n_nodes == 0:
        raise ValueError("empty graph")
    index = np.full((grid.rows, grid.cols), -1, dtype=np.int64)
    index[grid.coords[:, 0], grid.coords[:, 1]] = np.arange(grid.n_nodes)
    right = (index[:, :-1] >= 0) & (index[:, 1:] >= 0)
    down = (index[:-1, :] >= 0) & (index[1:, :] >= 0)
    edges = np.concatenate(
        [
            np.stack([index[:, :-1][right], index[:, 1:][right]], axis=1),
            np.stack([index[:-1, :][down], index[1:, :][down]], axis=1),
        ]
    )
    return ContextGraph.from_edges(edges, grid.n_nodes, grid.coords)


def bfs_distances(graph: ContextGraph, source: int, max_depth: int | None = None) -> np.ndarray:
    """Hop distance from ``source`` to every node; ``UNREACHABLE`` beyond reach or depth."""
    if not 0 <= source < graph.n_nodes:
        raise IndexError(f"node {source} out of range")
    adj = graph._csr()
    dist = np.full(graph.n_nodes, UNREACHABLE, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        if max_depth is not None and dist[u] >= max_depth:
            continue
        for v in adj.indices[adj.indptr[u] : adj.indptr[u + 1]]:
            if dist[v] == UNREACHABLE:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def hop_distance(graph: ContextGraph, i: int, j: int) -> int:
    if not 0 <= j < graph.n_nodes:
        raise IndexError(f"node {j} out of range")
    return int(bfs_distances(graph, i)[j])


@dataclass(frozen=True)
class EgoSubgraph:
    """Radius-limited neighborhood of one node.

    The local normalized adjacency reuses full-graph degrees, so ``radius``
    propagation steps give the center exactly its full-graph value.
    """

    center_local_id: int
    local_to_global: np.ndarray
    normalized_adjacency: sp.csr_matrix
    hop: np.ndarray  # local node -> hop distance from the center
    radius: int

    @property
    def n_nodes(self) -> int:
        return len(self.local_to_global)


def ego_subgraph(graph: ContextGraph, center: int, radius: int) -> EgoSubgraph:
    if radius < 0:
        raise ValueError("radius must be non-negative")
    dist = bfs_distances(graph, center, max_depth=radius)
    nodes = np.flatnonzero(dist != UNREACHABLE)
    local = np.full(graph.n_nodes, -1, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    e = graph.edges
    keep = (local[e[:, 0]] >= 0) & (local[e[:, 1]] >= 0)
    sub_edges = local[e[keep]]
    adj = _normalized(sub_edges, len(nodes), graph.degrees_with_self_loop[nodes])
    return EgoSubgraph(int(local[center]), nodes, adj, dist[nodes], radius)


def hop_neighborhoods(graph: ContextGraph, k: int, nodes=None) -> tuple[np.ndarray, np.ndarray]:
    """Pairs ``(i, j)`` with ``d(i, j) <= k`` for each ``i`` in ``nodes``.

    Returned as two aligned index arrays grouped by ``i`` in ascending ``j``.
    """
    nodes = range(graph.n_nodes) if nodes is None else nodes
    src, dst = [], []
    for i in nodes:
        reach = np.flatnonzero(bfs_distances(graph, int(i), max_depth=k) != UNREACHABLE)
        src.append(np.full(len(reach), i, dtype=np.int64))
        dst.append(reach)
    if not src:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate(src), np.concatenate(dst)


def save_graph(path, graph: ContextGraph) -> None:
    doc = {
        "n_nodes": graph.n_nodes,
        "edges": graph.edges.tolist(),
        "degrees": graph.degrees_with_self_loop.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_graph(path, grid_coords=None) -> ContextGraph:
    doc = json.loads(Path(path).read_text())
    graph = ContextGraph.from_edges(doc["edges"], int(doc["n_nodes"]), grid_coords)
    if graph.degrees_with_self_loop.tolist() != list(doc["degrees"]):
        raise ValueError(f"{path}: stored degree vector disagrees with edge list")
    return graph
