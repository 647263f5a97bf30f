import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gncaf.context_agg import (
    GCN,
    ContextMLP,
    PropagationGraph,
    VariantAggregator,
    aggregate_context,
    aggregate_context_variant,
    context_vector,
    gcn_layer,
)
from gncaf.graph import build_context_graph, ego_subgraph, hop_distance, normalize_adjacency
from gncaf.tiling import TileGrid

from .helpers import central_fd_check, random_grid

TWO = torch.tensor([[0.5, 0.5], [0.5, 0.5]], dtype=torch.float64)


def _line(n):
    return build_context_graph(TileGrid("l", 1, n, 4, np.ones((1, n), bool)))


def test_gcn_layer_hand_product():
    x = torch.eye(2, dtype=torch.float64)
    out = gcn_layer(x, TWO, torch.eye(2, dtype=torch.float64), "identity")
    torch.testing.assert_close(out, TWO)
    # same through the sparse path
    out = gcn_layer(x, normalize_adjacency([(0, 1)], 2), torch.eye(2, dtype=torch.float64), "identity")
    torch.testing.assert_close(out, TWO)


def test_gcn_layer_isolated_and_zero():
    x = torch.tensor([[3.0, -1.0]], dtype=torch.float64)
    torch.testing.assert_close(gcn_layer(x, np.array([[1.0]]), torch.eye(2, dtype=torch.float64), "identity"), x)
    z = gcn_layer(torch.zeros(3, 2), np.eye(3), torch.randn(2, 4), "relu")
    assert torch.count_nonzero(z) == 0


def test_gcn_layer_softmax_rows_and_errors():
    x = torch.randn(3, 4, dtype=torch.float64)
    out = gcn_layer(x, np.eye(3), torch.randn(4, 5, dtype=torch.float64), "softmax_rows")
    torch.testing.assert_close(out.sum(1), torch.ones(3, dtype=torch.float64))
    bad = x.clone()
    bad[0, 0] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        gcn_layer(bad, np.eye(3), torch.eye(4, dtype=torch.float64))
    with pytest.raises(ValueError):
        gcn_layer(x, np.eye(3), torch.eye(3, dtype=torch.float64))
    with pytest.raises(ValueError):
        gcn_layer(x, np.eye(3), torch.eye(4, dtype=torch.float64), "tanh")


def test_aggregate_k0_and_k1():
    x0 = torch.randn(2, 2, dtype=torch.float64)
    assert len(aggregate_context(TWO, x0, GCN(2, []).double())) == 1
    gcn = GCN(2, [2], "identity").double()
    with torch.no_grad():
        gcn.weights[0].copy_(torch.eye(2))
    stack = aggregate_context(TWO, x0, gcn)
    torch.testing.assert_close(stack[0], x0)
    torch.testing.assert_close(stack[1], TWO @ x0)


def test_aggregate_dim_chain_mismatch():
    with pytest.raises(ValueError):
        aggregate_context(TWO, torch.randn(2, 3, dtype=torch.float64), GCN(2, [4]).double())
    with pytest.raises(ValueError):
        aggregate_context(TWO, torch.randn(3, 2, dtype=torch.float64), GCN(2, [4]).double())


def test_line_perturbation_k2():
    g = _line(5)
    torch.manual_seed(0)
    gcn = GCN(3, [4, 4]).double()
    x = torch.randn(5, 3, dtype=torch.float64)
    y = x.clone()
    y[4] += 10.0
    a = aggregate_context(g.normalized_adjacency, x, gcn)[2][0]
    b = aggregate_context(g.normalized_adjacency, y, gcn)[2][0]
    assert torch.equal(a, b)


def test_context_vector_examples():
    x = torch.randn(3, 4)
    mlp = torch.nn.Linear(4, 4)
    with torch.no_grad():
        mlp.weight.copy_(torch.eye(4))
        mlp.bias.zero_()
    torch.testing.assert_close(context_vector([x], [1], mlp), x[[1]])

    zero = ContextMLP(4, 5, 3)
    with torch.no_grad():
        for p in zero.parameters():
            p.zero_()
        zero.fc2.bias.copy_(torch.tensor([1.0, 2.0, 3.0]))
    torch.testing.assert_close(context_vector([x], [0, 2], zero), torch.tensor([[1.0, 2.0, 3.0]] * 2))

    stack = [torch.full((2, 2), float(t)) for t in range(4)]
    seen = {}
    context_vector(stack, [1], lambda v: seen.setdefault("v", v))
    assert seen["v"].tolist() == [[0, 0, 1, 1, 2, 2, 3, 3]]


def test_context_vector_width_check():
    with pytest.raises(ValueError):
        context_vector([torch.randn(2, 3)], [0], ContextMLP(4, 4, 4))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.integers(0, 2**31 - 1), st.sampled_from([1, 2, 3]))
def test_ego_equivalence_float64(rows, cols, seed, k):
    grid = random_grid(rows, cols, seed)
    g = build_context_graph(grid)
    torch.manual_seed(seed % 1000)
    gcn = GCN(5, [6] * k).double()
    x = torch.randn(g.n_nodes, 5, dtype=torch.float64)
    full = aggregate_context(g.normalized_adjacency, x, gcn)[k]
    center = seed % g.n_nodes
    ego = ego_subgraph(g, center, k)
    local = aggregate_context(PropagationGraph.from_egos([ego]), x[ego.local_to_global], gcn)[k]
    torch.testing.assert_close(local[ego.center_local_id], full[center], rtol=1e-10, atol=1e-12)


def test_ego_equivalence_float32_batched():
    g = build_context_graph(random_grid(12, 12, 7))
    torch.manual_seed(0)
    gcn = GCN(8, [8, 8, 8])
    x = torch.randn(g.n_nodes, 8)
    full = aggregate_context(PropagationGraph.from_graph(g), x, gcn)[3]
    centers = list(range(0, g.n_nodes, 5))
    egos = [ego_subgraph(g, c, 3) for c in centers]
    pg = PropagationGraph.from_egos(egos)
    inputs = torch.cat([x[e.local_to_global] for e in egos])
    local = aggregate_context(pg, inputs, gcn)[3][pg.centers]
    torch.testing.assert_close(local, full[centers], rtol=1e-5, atol=1e-5)


def test_insufficient_radius():
    g = _line(5)
    pg = PropagationGraph.from_egos([ego_subgraph(g, 2, 1)])
    with pytest.raises(ValueError, match="insufficient context radius"):
        aggregate_context(pg, torch.randn(3, 2), GCN(2, [2, 2]))


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 8), st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_permutation_equivariance(rows, cols, seed):
    g = build_context_graph(random_grid(rows, cols, seed))
    n = g.n_nodes
    perm = np.random.default_rng(seed).permutation(n)
    a = g.normalized_adjacency.toarray()
    ap = a[np.ix_(perm, perm)]
    torch.manual_seed(0)
    gcn = GCN(3, [4, 4]).double()
    x = torch.randn(n, 3, dtype=torch.float64)
    s1 = aggregate_context(a, x, gcn)
    s2 = aggregate_context(ap, x[perm], gcn)
    for u, v in zip(s1, s2):
        torch.testing.assert_close(u[perm], v)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 8), st.integers(2, 8), st.integers(0, 2**31 - 1), st.sampled_from([0, 1, 2, 3]))
def test_hop_locality_exact(rows, cols, seed, k):
    g = build_context_graph(random_grid(rows, cols, seed, density=0.8))
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed % 97)
    gcn = GCN(4, [4] * k).double()
    x = torch.randn(g.n_nodes, 4, dtype=torch.float64)
    i = int(rng.integers(g.n_nodes))
    base = aggregate_context(g.normalized_adjacency, x, gcn)[k][i]
    for j in range(g.n_nodes):
        d = hop_distance(g, i, j)
        if d == -1 or d > k:
            y = x.clone()
            y[j] += torch.randn(4, dtype=torch.float64) * 5
            assert torch.equal(aggregate_context(g.normalized_adjacency, y, gcn)[k][i], base)


def test_variant_examples():
    iso = build_context_graph(TileGrid("s", 1, 1, 4, np.ones((1, 1), bool)))
    x = torch.tensor([[1.0, -2.0]])
    torch.testing.assert_close(aggregate_context_variant(iso, x, 2, VariantAggregator(2, "add")), x)

    two = _line(2)
    x = torch.tensor([[1.0, 2.0], [3.0, 6.0]])
    out = aggregate_context_variant(two, x, 1, VariantAggregator(2, "mean"))
    torch.testing.assert_close(out, torch.tensor([[2.0, 4.0], [2.0, 4.0]]))

    msa = VariantAggregator(8, "msa", heads=2)
    with torch.no_grad():
        msa.v.weight.zero_()
        msa.v.bias.zero_()
        msa.o.bias.zero_()
    out = aggregate_context_variant(_line(4), torch.randn(4, 8), 2, msa)
    assert torch.count_nonzero(out) == 0


def test_variant_hop_limited_sets():
    g = _line(5)
    x = torch.arange(5, dtype=torch.float64).unsqueeze(1)
    out = aggregate_context_variant(g, x, 1, VariantAggregator(1, "add"))
    assert out.ravel().tolist() == [1.0, 3.0, 6.0, 9.0, 7.0]


def test_variant_msa_matches_dense_attention():
    g = _line(4)
    torch.manual_seed(3)
    agg = VariantAggregator(4, "msa", heads=2).double()
    x = torch.randn(4, 4, dtype=torch.float64)
    out = aggregate_context_variant(g, x, 1, agg)
    # per-node dense oracle over {j : d(i, j) <= 1}
    for i in range(4):
        members = [j for j in range(4) if abs(i - j) <= 1]
        q = agg.q(x[i]).view(2, 2)
        k = agg.k(x[members]).view(-1, 2, 2)
        v = agg.v(x[members]).view(-1, 2, 2)
        w = torch.softmax((k * q).sum(-1) / 2**0.5, dim=0)
        expect = agg.o((w.unsqueeze(-1) * v).sum(0).reshape(4))
        torch.testing.assert_close(out[i], expect)


def test_variant_unknown_mode():
    with pytest.raises(ValueError):
        VariantAggregator(4, "max")


def test_gradient_gcn_and_mlp():
    g = build_context_graph(random_grid(3, 3, 11, density=0.9))
    n = g.n_nodes
    assert n <= 10
    torch.manual_seed(0)
    gcn = GCN(4, [5, 6]).double()
    mlp = ContextMLP(4 + 5 + 6, 7, 3).double()
    x0 = torch.randn(n, 4, dtype=torch.float64)
    adj = g.normalized_adjacency
    target = torch.randn(n, 3, dtype=torch.float64)

    def fn():
        z = context_vector(aggregate_context(adj, x0, gcn), np.arange(n), mlp)
        return (z * target).sum()

    params = [x0, *gcn.weights, *mlp.parameters()]
    assert central_fd_check(fn, params) <= 1e-4
