import numpy as np
import pytest
import torch

from rankformer.baselines import BaselineConfig, baseline_forward, lightgcn_layer
from rankformer.graph import graph_from_indices, random_graph
from rankformer.layers import warmup_layer


def dense_propagation(g, Z):
    """Symmetric-normalized bipartite adjacency times Z, built densely."""
    A = g.dense.astype(np.float64)
    du, di = A.sum(1), A.sum(0)
    with np.errstate(divide="ignore"):
        su = np.where(du > 0, 1 / np.sqrt(du), 0.0)
        si = np.where(di > 0, 1 / np.sqrt(di), 0.0)
    N = su[:, None] * A * si[None, :]
    full = np.block([[np.zeros((g.n, g.n)), N], [N.T, np.zeros((g.m, g.m))]])
    return full @ Z


def test_single_edge_swaps_rows():
    g = graph_from_indices(1, 1, [0], [0])
    Z = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
    assert torch.equal(lightgcn_layer(g, Z), Z.flip(0))


def test_two_unit_degree_items():
    g = graph_from_indices(1, 2, [0, 0], [0, 1])
    Z = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert np.allclose(lightgcn_layer(g, Z)[0].numpy(), [0.70710678, 0.70710678])


def test_matches_dense_adjacency(embeddings):
    g = random_graph(15, 20, 70, seed=5)
    Z = embeddings(g, 6)
    assert np.max(np.abs(lightgcn_layer(g, Z).numpy() - dense_propagation(g, Z.numpy()))) <= 1e-10


def test_isolated_item_maps_to_zero():
    g = graph_from_indices(1, 2, [0], [0])
    Z = torch.ones(3, 2, dtype=torch.float64)
    assert not lightgcn_layer(g, Z)[2].any()


class TestForward:
    def test_mf_is_identity(self, small_graph, embeddings):
        Z = embeddings(small_graph, 3)
        cfg = BaselineConfig(kind="mf", layers=4)
        assert cfg.layers == 0
        assert torch.equal(baseline_forward(small_graph, Z, cfg), Z)

    def test_zero_layers(self, small_graph, embeddings):
        Z = embeddings(small_graph, 3)
        assert torch.equal(baseline_forward(small_graph, Z, BaselineConfig(layers=0)), Z)

    def test_mean_of_two_layers(self, small_graph, embeddings):
        Z0 = embeddings(small_graph, 3)
        Z1 = lightgcn_layer(small_graph, Z0)
        Z2 = lightgcn_layer(small_graph, Z1)
        out = baseline_forward(small_graph, Z0, BaselineConfig(layers=2, combine="mean"))
        assert torch.allclose(out, (Z0 + Z1 + Z2) / 3, atol=1e-15)

    def test_last_layer(self, small_graph, embeddings):
        Z0 = embeddings(small_graph, 3)
        out = baseline_forward(small_graph, Z0, BaselineConfig(layers=2, combine="last"))
        assert torch.equal(out, lightgcn_layer(small_graph, lightgcn_layer(small_graph, Z0)))

    @pytest.mark.parametrize("kw", [{"kind": "gat"}, {"combine": "sum"}, {"layers": -1}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            BaselineConfig(**kw)


def test_uniform_weight_special_case(embeddings):
    """Positive-only uniform weights with unit normalizer at tau = 1 is mean
    neighbor aggregation, the degree-normalized cousin of LightGCN."""
    g = random_graph(10, 12, 40, seed=3)
    Z = embeddings(g, 4)
    A = g.dense.astype(np.float64)
    mean_u = (A / A.sum(1, keepdims=True)) @ Z.numpy()[g.n :]
    di = A.sum(0)
    mean_i = np.where(di[:, None] > 0, (A.T / np.maximum(di, 1)[:, None]) @ Z.numpy()[: g.n], Z.numpy()[g.n :])
    out = warmup_layer(g, Z, 1.0).numpy()
    assert np.allclose(out, np.vstack([mean_u, mean_i]), atol=1e-12)
    # LightGCN differs only in the degree convention: scaling item inputs by
    # sqrt(d_i) and user outputs by 1/sqrt(d_u) recovers the mean.
    scaled = Z.numpy().copy()
    scaled[g.n :] *= np.sqrt(di)[:, None]
    lg = lightgcn_layer(g, torch.from_numpy(scaled)).numpy()[: g.n]
    assert np.allclose(lg / np.sqrt(A.sum(1))[:, None], mean_u, atol=1e-12)
