"""Multi-hop context aggregation over the tile graph.

``K`` stacked graph convolutions ``X(t) = act(A_norm @ X(t-1) @ W(t-1))`` give
each node a ``K``-hop receptive field. The hop features ``[X(0), ..., X(K)]``
are concatenated per node and projected by a two-layer MLP into a single
context token. ADD/MEAN/MSA aggregators replace the convolutions for
ablations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F
from torch import nn

from .graph import ContextGraph, EgoSubgraph, hop_neighborhoods

__all__ = [
    "PropagationGraph",
    "gcn_layer",
    "GCN",
    "ContextMLP",
    "aggregate_context",
    "context_vector",
    "VariantAggregator",
    "aggregate_context_variant",
]

ACTIVATIONS = ("relu", "identity", "softmax_rows")
VARIANT_MODES = ("add", "mean", "msa")


@dataclass
class PropagationGraph:
    """Sparse normalized adjacency in tensor form, plus the nodes to read out.

    ``centers`` are the rows whose context is wanted (ego centers for a
    batch of ego subgraphs, every node for a full graph). ``pair_src`` /
    ``pair_dst`` list the hop-limited neighbor sets used by the ablation
    aggregators, keyed by position in ``centers``.
    """

    rows: torch.Tensor
    cols: torch.Tensor
    values: torch.Tensor
    n_nodes: int
    centers: torch.Tensor
    radius: int | None = None
    pair_src: torch.Tensor | None = None
    pair_dst: torch.Tensor | None = None

    def to(self, dtype) -> "PropagationGraph":
        self.values = self.values.to(dtype)
        return self

    @classmethod
    def from_sparse(cls, mat, centers=None, radius=None) -> "PropagationGraph":
        coo = sp.coo_matrix(mat)
        n = coo.shape[0]
        centers = np.arange(n) if centers is None else np.asarray(centers)
        return cls(
            torch.from_numpy(coo.row.astype(np.int64)),
            torch.from_numpy(coo.col.astype(np.int64)),
            torch.from_numpy(coo.data.astype(np.float64)),
            n,
            torch.as_tensor(centers, dtype=torch.int64),
            radius,
        )

    @classmethod
    def from_graph(cls, graph: ContextGraph, pair_hops: int | None = None) -> "PropagationGraph":
        pg = cls.from_sparse(graph.normalized_adjacency)
        if pair_hops is not None:
            src, dst = hop_neighborhoods(graph, pair_hops)
            pg.pair_src, pg.pair_dst = torch.from_numpy(src), torch.from_numpy(dst)
        return pg

    @classmethod
    def from_egos(cls, egos: Sequence[EgoSubgraph], pair_hops: int | None = None) -> "PropagationGraph":
        """Disjoint union of ego subgraphs; centers follow ``egos`` order."""
        rows, cols, vals, centers, src, dst = [], [], [], [], [], []
        offset = 0
        for b, ego in enumerate(egos):
            coo = ego.normalized_adjacency.tocoo()
            rows.append(coo.row + offset)
            cols.append(coo.col + offset)
            vals.append(coo.data)
            centers.append(offset + ego.center_local_id)
            if pair_hops is not None:
                if pair_hops > ego.radius:
                    raise ValueError("insufficient context radius")
                near = np.flatnonzero(ego.hop <= pair_hops)
                src.append(np.full(len(near), b))
                dst.append(near + offset)
            offset += ego.n_nodes
        pg = cls(
            torch.from_numpy(np.concatenate(rows).astype(np.int64)),
            torch.from_numpy(np.concatenate(cols).astype(np.int64)),
            torch.from_numpy(np.concatenate(vals).astype(np.float64)),
            offset,
            torch.tensor(centers, dtype=torch.int64),
            min(e.radius for e in egos),
        )
        if pair_hops is not None:
            pg.pair_src = torch.from_numpy(np.concatenate(src).astype(np.int64))
            pg.pair_dst = torch.from_numpy(np.concatenate(dst).astype(np.int64))
        return pg

    def propagate(self, x: torch.Tensor) -> torch.Tensor:
        msg = self.values.to(x.dtype).unsqueeze(1) * x[self.cols]
        return torch.zeros(self.n_nodes, x.shape[1], dtype=x.dtype).index_add_(0, self.rows, msg)


def _propagate(adj, x: torch.Tensor) -> torch.Tensor:
    if isinstance(adj, PropagationGraph):
        return adj.propagate(x)
    if sp.issparse(adj):
        return PropagationGraph.from_sparse(adj).propagate(x)
    return torch.as_tensor(adj, dtype=x.dtype) @ x


def _activate(h: torch.Tensor, activation: str) -> torch.Tensor:
    if activation == "relu":
        return torch.relu(h)
    if activation == "identity":
        return h
    if activation == "softmax_rows":
        return torch.softmax(h, dim=1)
    raise ValueError(f"unknown activation {activation!r}")


def gcn_layer(x: torch.Tensor, adj, weight: torch.Tensor, activation: str = "relu") -> torch.Tensor:
    """``activation(adj @ x @ weight)``; ``adj`` may be dense, scipy-sparse or a PropagationGraph."""
    if not torch.isfinite(x).all():
        raise ValueError("non-finite input features")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"feature dim {x.shape[1]} does not match weight {tuple(weight.shape)}")
    return _activate(_propagate(adj, x) @ weight, activation)


class GCN(nn.Module):
    def __init__(self, in_dim: int, hidden: Sequence[int], activation: str = "relu"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        dims = [in_dim, *hidden]
        self.weights = nn.ParameterList(
            [nn.Parameter(nn.init.xavier_uniform_(torch.empty(a, b))) for a, b in zip(dims[:-1], dims[1:])]
        )
        self.activation = activation
        self.dims = dims

    @property
    def hops(self) -> int:
        return len(self.weights)

    def forward(self, adj, x0: torch.Tensor) -> list[torch.Tensor]:
        if x0.shape[1] != self.dims[0]:
            raise ValueError(f"input dim {x0.shape[1]} != {self.dims[0]}")
        stack = [x0]
        for w in self.weights:
            stack.append(gcn_layer(stack[-1], adj, w, self.activation))
        return stack


def aggregate_context(adj, x0: torch.Tensor, gcn: GCN) -> list[torch.Tensor]:
    """Hop feature stack ``[X(0), ..., X(K)]``.

    Rows at ego centers are exact only if the ego radius is at least ``K``.
    """
    if isinstance(adj, PropagationGraph) and adj.radius is not None and adj.radius < gcn.hops:
        raise ValueError("insufficient context radius")
    if x0.shape[0] != (adj.n_nodes if isinstance(adj, PropagationGraph) else adj.shape[0]):
        raise ValueError("feature rows do not match graph nodes")
    return gcn(adj, x0)


class ContextMLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)
        self.in_dim = in_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(x)))


def context_vector(stack: Sequence[torch.Tensor], nodes, mlp: nn.Module) -> torch.Tensor:
    """Concatenate rows ``nodes`` across hop levels 0..K, then apply ``mlp``."""
    idx = torch.as_tensor(nodes, dtype=torch.int64)
    cat = torch.cat([level[idx] for level in stack], dim=-1)
    if getattr(mlp, "in_dim", cat.shape[-1]) != cat.shape[-1]:
        raise ValueError(f"MLP expects {mlp.in_dim} inputs, stack gives {cat.shape[-1]}")
    return mlp(cat)


def _segment_softmax(scores: torch.Tensor, seg: torch.Tensor, n_seg: int) -> torch.Tensor:
    # scores: (P, H); softmax over pairs sharing a segment id
    h = scores.shape[1]
    idx = seg.unsqueeze(1).expand(-1, h)
    peak = torch.full((n_seg, h), -torch.inf, dtype=scores.dtype).scatter_reduce(
        0, idx, scores, reduce="amax", include_self=True
    )
    ex = torch.exp(scores - peak[seg])
    denom = torch.zeros(n_seg, h, dtype=scores.dtype).index_add_(0, seg, ex)
    return ex / denom[seg]


class VariantAggregator(nn.Module):
    """Hop-limited ADD, MEAN or single-layer multi-head attention pooling."""

    def __init__(self, dim: int, mode: str, heads: int = 8):
        super().__init__()
        if mode not in VARIANT_MODES:
            raise ValueError(f"unknown aggregator mode {mode!r}")
        self.mode = mode
        self.dim = dim
        if mode == "msa":
            if dim % heads:
                raise ValueError(f"dim {dim} not divisible by {heads} heads")
            self.heads = heads
            self.q = nn.Linear(dim, dim)
            self.k = nn.Linear(dim, dim)
            self.v = nn.Linear(dim, dim)
            self.o = nn.Linear(dim, dim)

    def forward(self, x0: torch.Tensor, queries: torch.Tensor, pair_src: torch.Tensor, pair_dst: torch.Tensor):
        """Pool ``x0[pair_dst]`` into one vector per query position ``pair_src``."""
        n_out = len(queries)
        members = x0[pair_dst]
        if self.mode in ("add", "mean"):
            out = torch.zeros(n_out, x0.shape[1], dtype=x0.dtype).index_add_(0, pair_src, members)
            if self.mode == "mean":
                count = torch.bincount(pair_src, minlength=n_out).clamp_min(1).to(x0.dtype)
                out = out / count.unsqueeze(1)
            return out
        h, dh = self.heads, self.dim // self.heads
        q = self.q(x0[queries]).view(n_out, h, dh)
        k = self.k(members).view(-1, h, dh)
        v = self.v(members).view(-1, h, dh)
        scores = (q[pair_src] * k).sum(-1) / dh**0.5
        attn = _segment_softmax(scores, pair_src, n_out)
        pooled = torch.zeros(n_out, h, dh, dtype=x0.dtype).index_add_(0, pair_src, attn.unsqueeze(-1) * v)
        return self.o(pooled.reshape(n_out, self.dim))


def aggregate_context_variant(graph, x0: torch.Tensor, k: int, aggregator: VariantAggregator) -> torch.Tensor:
    """Per-node pooled context over ``{j : d(i, j) <= k}`` for every node of ``graph``."""
    if not isinstance(graph, PropagationGraph) or graph.pair_src is None:
        graph = PropagationGraph.from_graph(graph, pair_hops=k)
    src, dst = graph.pair_src, graph.pair_dst
    return aggregator(x0, graph.centers, src, dst)
