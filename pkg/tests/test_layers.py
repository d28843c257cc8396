import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from rankformer.graph import graph_from_indices, random_graph
from rankformer.layers import (
    NonFiniteError,
    RankformerConfig,
    attention_weight_neg,
    attention_weight_pos,
    build_workspace,
    compute_benchmarks,
    compute_normalizers,
    forward,
    normalize_rows,
    rankformer_layer,
    warmup_layer,
)
from rankformer.oracle import naive_benchmarks, naive_layer, naive_warmup_layer, naive_weights


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture
def one_by_two():
    """One user, item 0 positive, item 1 negative."""
    g = graph_from_indices(1, 2, [0], [0])
    Z = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    return g, Z


class TestConfig:
    @pytest.mark.parametrize("kw", [{"tau": 1.5}, {"tau": -0.1}, {"alpha": -1.0}, {"layers": -1}, {"epsilon_div": 0}])
    def test_rejects_out_of_range(self, kw):
        with pytest.raises(ValueError):
            RankformerConfig(**kw)

    def test_sign_guarantee_flag(self):
        assert RankformerConfig(alpha=2).signs_guaranteed
        assert not RankformerConfig(alpha=1.9).signs_guaranteed
        assert not RankformerConfig(alpha=3, normalize_embeddings=False).signs_guaranteed


class TestNormalizeRows:
    def test_three_four_five(self):
        out, flag = normalize_rows(torch.tensor([[3.0, 4.0]]))
        assert torch.allclose(out, torch.tensor([[0.6, 0.8]]))
        assert not flag.any()

    def test_zero_row_flagged_and_unchanged(self):
        out, flag = normalize_rows(torch.zeros(1, 2))
        assert torch.equal(out, torch.zeros(1, 2)) and flag.tolist() == [True]

    def test_random_rows_unit_norm(self, rng):
        out, _ = normalize_rows(rng.standard_normal((10, 4)))
        assert np.allclose(out.norm(dim=1).numpy(), 1.0, atol=1e-6)


class TestBenchmarks:
    def test_orthogonal_example(self, one_by_two):
        g, Z = one_by_two
        b_pos, b_neg = compute_benchmarks(g, Z)
        assert b_pos.tolist() == [1.0] and b_neg.tolist() == [0.0]

    def test_constant_items(self):
        g = graph_from_indices(2, 4, [0, 0, 1], [0, 3, 2])
        e = torch.tensor([0.3, -0.7], dtype=torch.float64)
        Z = torch.cat([torch.tensor([[1.0, 2.0], [-1.0, 0.5]], dtype=torch.float64), e.repeat(4, 1)])
        b_pos, b_neg = compute_benchmarks(g, Z)
        s = Z[:2] @ e
        assert torch.allclose(b_pos, s) and torch.allclose(b_neg, s)

    def test_random_matches_double_loop(self, embeddings):
        g = random_graph(8, 12, 30, seed=3)
        Z = embeddings(g, 4)
        b_pos, b_neg = compute_benchmarks(g, Z)
        ref_pos, ref_neg = naive_benchmarks(g, Z.numpy())
        assert rel_err(b_pos, ref_pos) <= 1e-10 and rel_err(b_neg, ref_neg) <= 1e-10

    def test_user_with_every_item_gets_zero_negative_benchmark(self):
        g = graph_from_indices(2, 2, [0, 0, 1], [0, 1, 0])
        Z = torch.ones(4, 3, dtype=torch.float64)
        _, b_neg = compute_benchmarks(g, Z)
        assert b_neg[0].item() == 0.0


class TestAttentionWeights:
    def test_positive_example(self):
        assert attention_weight_pos(1.0, 0.0, 2.0, 1) == 3.0

    def test_negative_limit_example(self):
        assert attention_weight_neg(1.0, 1.0, 2.0, 0, 1) == -2.0

    def test_division_guards(self):
        with pytest.raises(ZeroDivisionError):
            attention_weight_pos(0.0, 0.0, 2.0, 0)
        with pytest.raises(ZeroDivisionError):
            attention_weight_neg(0.0, 0.0, 2.0, 3, 3)


class TestNormalizers:
    def test_c_user_six(self, one_by_two):
        g, Z = one_by_two
        b_pos, b_neg = compute_benchmarks(g, Z)
        C_user, C_item = compute_normalizers(g, Z, b_pos, b_neg, 2.0)
        assert C_user.tolist() == [6.0]
        assert C_item.tolist() == [3.0, 3.0]
        assert np.abs(naive_weights(g, Z.numpy(), 2.0)).sum() == 6.0

    def test_identical_unit_rows_give_two_alpha(self):
        g = random_graph(5, 7, 15, seed=2)
        Z = torch.full((12, 3), 1 / np.sqrt(3), dtype=torch.float64)
        b_pos, b_neg = compute_benchmarks(g, Z)
        C_user, _ = compute_normalizers(g, Z, b_pos, b_neg, 2.0)
        assert torch.allclose(C_user, torch.full((5,), 4.0, dtype=torch.float64))

    @pytest.mark.parametrize("alpha,normalize", [(2.0, True), (3.0, True), (1.0, True), (0.5, False)])
    def test_random_matches_absolute_sums(self, embeddings, alpha, normalize):
        g = random_graph(9, 11, 35, seed=int(alpha * 10))
        Z = embeddings(g, 4)
        if normalize:
            Z = normalize_rows(Z)[0]
        cfg = RankformerConfig(alpha=alpha, normalize_embeddings=normalize)
        b_pos, b_neg = compute_benchmarks(g, Z)
        C_user, C_item = compute_normalizers(g, Z, b_pos, b_neg, alpha, cfg)
        omega = np.abs(naive_weights(g, Z.numpy(), alpha))
        assert rel_err(C_user, omega.sum(1)) <= 1e-8
        assert rel_err(C_item, omega.sum(0)) <= 1e-8

    def test_clamped_below(self):
        g = graph_from_indices(1, 2, [0], [0])
        Z = torch.zeros(3, 2, dtype=torch.float64)
        b_pos, b_neg = compute_benchmarks(g, Z)
        C_user, C_item = compute_normalizers(g, Z, b_pos, b_neg, 0.0, RankformerConfig(alpha=0.0))
        assert torch.all(C_user >= 1e-12) and torch.all(C_item >= 1e-12)


class TestWorkspace:
    def test_moments_symmetric_psd(self, small_graph, embeddings):
        Z = normalize_rows(embeddings(small_graph, 5))[0]
        ws = build_workspace(small_graph, Z, RankformerConfig())
        for M in (ws.item_moment, ws.user_moment_scaled):
            assert torch.allclose(M, M.T, atol=1e-12)
            assert torch.linalg.eigvalsh(M).min() >= -1e-10
        assert torch.all(ws.C_user > 0) and torch.all(ws.C_item > 0)


class TestRankformerLayer:
    def test_worked_instance(self, one_by_two):
        g, Z = one_by_two
        cfg = RankformerConfig(tau=1.0, alpha=2.0)
        expected = np.array([[0.5, -0.5], [1.0, 0.0], [-1.0, 0.0]])
        assert np.allclose(rankformer_layer(g, Z, cfg).numpy(), expected, atol=1e-15)
        assert np.allclose(naive_layer(g, Z.numpy(), cfg), expected, atol=1e-15)

    @pytest.mark.parametrize("normalize", [True, False])
    def test_tau_zero_is_fixed_point(self, small_graph, embeddings, normalize):
        Z = embeddings(small_graph, 3)
        cfg = RankformerConfig(tau=0.0, normalize_embeddings=normalize)
        assert torch.equal(rankformer_layer(small_graph, Z, cfg), Z)
        assert torch.equal(warmup_layer(small_graph, Z, 0.0), Z)
        assert np.array_equal(naive_layer(small_graph, Z.numpy(), cfg), Z.numpy())

    def test_random_20_by_30(self, embeddings):
        g = random_graph(20, 30, 150, seed=4)
        Z = embeddings(g, 8)
        for tau in (0.3, 1.0):
            cfg = RankformerConfig(tau=tau)
            assert rel_err(rankformer_layer(g, Z, cfg), naive_layer(g, Z.numpy(), cfg)) <= 1e-6

    @pytest.mark.parametrize("alpha,normalize", [(1.0, True), (0.5, False), (0.0, True)])
    def test_fallback_regime_matches_naive(self, embeddings, alpha, normalize):
        g = random_graph(12, 15, 50, seed=6)
        Z = embeddings(g, 4)
        cfg = RankformerConfig(tau=0.7, alpha=alpha, normalize_embeddings=normalize)
        assert rel_err(rankformer_layer(g, Z, cfg), naive_layer(g, Z.numpy(), cfg)) <= 1e-6

    def test_non_finite_raises_with_row(self, small_graph, embeddings):
        Z = embeddings(small_graph, 3)
        Z[2, 1] = float("inf")
        with pytest.raises(NonFiniteError) as err:
            rankformer_layer(small_graph, Z, RankformerConfig(normalize_embeddings=False), layer_index=4)
        assert err.value.layer == 4

    def test_output_is_fresh(self, small_graph, embeddings):
        Z = embeddings(small_graph, 3)
        before = Z.clone()
        out = rankformer_layer(small_graph, Z, RankformerConfig())
        assert torch.equal(Z, before) and out.data_ptr() != Z.data_ptr()

    def test_float32_close_to_float64(self, small_graph, embeddings):
        Z = embeddings(small_graph, 4)
        cfg = RankformerConfig(tau=0.6)
        out32 = rankformer_layer(small_graph, Z.float(), cfg)
        assert out32.dtype == torch.float32
        assert rel_err(out32.double(), rankformer_layer(small_graph, Z, cfg)) <= 1e-5

    def test_autograd_matches_gradcheck(self):
        g = random_graph(4, 5, 9, seed=1)
        Z = torch.randn(9, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0), requires_grad=True)
        assert torch.autograd.gradcheck(lambda z: rankformer_layer(g, z, RankformerConfig(tau=0.8)), (Z,))

    @given(
        n=st.integers(1, 15),
        m=st.integers(2, 15),
        d=st.integers(1, 6),
        seed=st.integers(0, 2**31 - 1),
        tau=st.sampled_from([0.3, 1.0]),
        alpha=st.sampled_from([0.5, 2.0, 3.0]),
        normalize=st.booleans(),
    )
    def test_equivalence_property(self, n, m, d, seed, tau, alpha, normalize):
        rng = np.random.default_rng(seed)
        E = int(rng.integers(n, n * (m - 1) + 1))
        try:
            g = random_graph(n, m, E, seed=seed)
        except ValueError:
            return
        Z = rng.standard_normal((n + m, d))
        cfg = RankformerConfig(tau=tau, alpha=alpha, normalize_embeddings=normalize)
        got = rankformer_layer(g, torch.from_numpy(Z), cfg).numpy()
        assert rel_err(got, naive_layer(g, Z, cfg)) <= 1e-6


class TestWarmup:
    def test_single_item_endpoint(self):
        g = graph_from_indices(1, 2, [0], [1])
        Z = torch.tensor([[5.0, 5.0], [1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
        assert warmup_layer(g, Z, 1.0)[0].tolist() == [3.0, 4.0]

    def test_mean_then_blend(self):
        g = graph_from_indices(1, 2, [0, 0], [0, 1])
        Z = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        assert warmup_layer(g, Z, 0.5)[0].tolist() == [0.25, 0.25]

    def test_isolated_item_unchanged(self):
        g = graph_from_indices(1, 3, [0], [0])
        Z = torch.arange(8, dtype=torch.float64).reshape(4, 2)
        assert torch.equal(warmup_layer(g, Z, 0.7)[3], Z[3])

    def test_random_matches_positive_only_loop(self, embeddings):
        g = random_graph(10, 14, 40, seed=9)
        Z = embeddings(g, 5)
        assert rel_err(warmup_layer(g, Z, 0.4), naive_warmup_layer(g, Z.numpy(), 0.4)) <= 1e-12


class TestForward:
    def test_zero_layers(self, small_graph, embeddings):
        Z = embeddings(small_graph, 3)
        assert torch.equal(forward(small_graph, Z, RankformerConfig(layers=0)), Z)

    def test_one_layer_is_warmup(self, small_graph, embeddings):
        Z = embeddings(small_graph, 3)
        out = forward(small_graph, Z, RankformerConfig(layers=1, tau=0.4))
        assert torch.equal(out, warmup_layer(small_graph, Z, 0.4))

    @pytest.mark.parametrize("warmup", [True, False])
    def test_three_layers_match_manual_composition(self, small_graph, embeddings, warmup):
        Z = embeddings(small_graph, 4)
        cfg = RankformerConfig(layers=3, tau=0.6, warmup_first_layer=warmup)
        out, snaps = forward(small_graph, Z, cfg, return_layers=True)
        manual = warmup_layer(small_graph, Z, 0.6) if warmup else rankformer_layer(small_graph, Z, cfg)
        manual = rankformer_layer(small_graph, manual, cfg)
        manual = rankformer_layer(small_graph, manual, cfg)
        assert torch.equal(out, manual)
        assert len(snaps) == 4 and torch.equal(snaps[0], Z) and torch.equal(snaps[-1], out)
