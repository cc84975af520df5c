import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stmae.dynfc import build_dynamic_graph
from stmae.errors import ConfigError
from stmae.ingest import RoiTimeSeries
from stmae.model import ModelConfig, init_params, masked_node_row
from stmae.objectives import (
    LossBreakdown,
    MaskConfig,
    bce_loss,
    mask_snapshot,
    sample_context,
    sample_mask_times,
    sce_loss,
    spatial_step,
    stmae_step,
    temporal_step,
)


def make_graph(N=6, T_max=35, window=10, stride=5, seed=0):
    rng = np.random.default_rng(seed)
    ts = RoiTimeSeries("s", rng.standard_normal((N, T_max)))
    return build_dynamic_graph(ts, window=window, stride=stride, frac=0.4)


def make_params(N=6, D=4, n_layers=2, seed=0, dtype=torch.float64):
    return init_params(ModelConfig(n_nodes=N, dim=D, n_layers=n_layers),
                       seed=seed, dtype=dtype)


class TestSampleMaskTimes:
    def test_t3_forces_middle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert sample_mask_times(3, 0.5, rng) == [2]

    def test_size_and_range(self):
        rng = np.random.default_rng(1)
        tset = sample_mask_times(10, 0.5, rng)
        assert len(tset) == 4
        assert all(2 <= t <= 9 for t in tset)

    def test_uniform_frequencies(self):
        rng = np.random.default_rng(2)
        counts = {t: 0 for t in range(2, 10)}
        n = 10_000
        for _ in range(n):
            for t in sample_mask_times(10, 0.25, rng):
                counts[t] += 1
        for t, c in counts.items():
            assert abs(c / n - 2 / 8) < 0.02

    def test_too_short_errors(self):
        with pytest.raises(ConfigError, match="T >= 3"):
            sample_mask_times(2, 0.5, np.random.default_rng(0))


class TestSampleContext:
    def test_singleton(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert sample_context(2, 3, rng) == (1, 3)

    def test_uniform_over_pairs(self):
        rng = np.random.default_rng(3)
        counts = {}
        n = 10_000
        for _ in range(n):
            pair = sample_context(3, 5, rng)
            counts[pair] = counts.get(pair, 0) + 1
        assert set(counts) == {(1, 4), (1, 5), (2, 4), (2, 5)}
        for c in counts.values():
            assert abs(c / n - 0.25) < 0.02

    def test_strict_ordering_always(self):
        rng = np.random.default_rng(4)
        for _ in range(2000):
            T = int(rng.integers(3, 12))
            t = int(rng.integers(2, T))
            t_a, t_b = sample_context(t, T, rng)
            assert 1 <= t_a < t < t_b <= T

    def test_out_of_range_errors(self):
        rng = np.random.default_rng(0)
        for t in (1, 5):
            with pytest.raises(ConfigError):
                sample_context(t, 5, rng)


class TestMaskSnapshot:
    def setup_method(self):
        self.params = make_params()
        rng = np.random.default_rng(5)
        self.X = torch.tensor(rng.standard_normal((6, 4)))
        A = (rng.uniform(size=(6, 6)) > 0.5).astype(float)
        A = np.triu(A, 1)
        self.A = torch.tensor(A + A.T)

    def test_zero_ratios_identity(self):
        cfg = MaskConfig(ratio_node=0.0, ratio_edge=0.0)
        ms = mask_snapshot(self.X, self.A, cfg, self.params, np.random.default_rng(0))
        assert torch.equal(ms.X_m, self.X)
        assert torch.equal(ms.A_m, self.A)

    def test_full_node_mask_zero_mode(self):
        cfg = MaskConfig(ratio_node=1.0, ratio_edge=0.0, node_mode="zero")
        ms = mask_snapshot(self.X, self.A, cfg, self.params, np.random.default_rng(0))
        assert torch.equal(ms.X_m, torch.zeros_like(self.X))

    def test_token_mode_uses_projected_token(self):
        cfg = MaskConfig(ratio_node=0.5, ratio_edge=0.0, node_mode="token")
        ms = mask_snapshot(self.X, self.A, cfg, self.params, np.random.default_rng(1))
        row = masked_node_row(self.params)
        for v in ms.node_mask:
            torch.testing.assert_close(ms.X_m[v], row, rtol=0, atol=0)

    def test_full_edge_flip_complements(self):
        cfg = MaskConfig(ratio_node=0.0, ratio_edge=1.0)
        ms = mask_snapshot(self.X, self.A, cfg, self.params, np.random.default_rng(2))
        off = ~torch.eye(6, dtype=torch.bool)
        assert torch.equal(ms.A_m[off], 1.0 - self.A[off])
        assert torch.equal(torch.diag(ms.A_m), torch.diag(self.A))

    @given(seed=st.integers(0, 200), rn=st.floats(0, 1), re=st.floats(0, 1))
    @settings(max_examples=40, deadline=None)
    def test_mask_invariants(self, seed, rn, re):
        cfg = MaskConfig(ratio_node=rn, ratio_edge=re)
        rng = np.random.default_rng(seed)
        ms = mask_snapshot(self.X, self.A, cfg, self.params, rng)
        assert len(ms.node_mask) == round(rn * 6)
        untouched = sorted(set(range(6)) - set(ms.node_mask.tolist()))
        assert torch.equal(ms.X_m[untouched], self.X[untouched])
        # A_m differs from A exactly on the flipped pairs, symmetrically
        diff = (ms.A_m != self.A)
        expected = torch.zeros_like(diff)
        for i, j in ms.edge_flips:
            expected[i, j] = expected[j, i] = True
        assert torch.equal(diff, expected)
        assert torch.equal(ms.A_m, ms.A_m.T)
        assert len(ms.edge_flips) == round(re * 15)


class TestSceLoss:
    def test_perfect_reconstruction_is_zero(self):
        X = torch.tensor(np.random.default_rng(0).standard_normal((5, 3)))
        loss, skipped = sce_loss(X, X.clone(), np.arange(5))
        assert float(loss) <= 1e-12
        assert skipped == 0

    def test_antipodal_gamma_two(self):
        X = torch.tensor(np.random.default_rng(1).standard_normal((4, 3)))
        loss, _ = sce_loss(X, -X, np.arange(4), gamma=2.0)
        assert abs(float(loss) - 4.0) < 1e-12

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        X = torch.tensor(rng.standard_normal((5, 3)))
        Y = torch.tensor(rng.standard_normal((5, 3)))
        loss, _ = sce_loss(X, Y, np.arange(5), gamma=2.0)
        expected = 0.0
        for v in range(5):
            x, y = X[v].numpy(), Y[v].numpy()
            cos = float(np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y)))
            expected += (1 - cos) ** 2
        assert abs(float(loss) - expected / 5) < 1e-12

    def test_empty_subset_errors(self):
        X = torch.randn(4, 3)
        with pytest.raises(ConfigError, match="empty"):
            sce_loss(X, X, np.array([], dtype=int))

    def test_zero_norm_rows_skipped_with_counter(self):
        X = torch.tensor([[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]], dtype=torch.float64)
        Y = torch.randn(3, 2, dtype=torch.float64)
        loss, skipped = sce_loss(X, Y, np.arange(3))
        assert skipped == 1
        assert torch.isfinite(loss)


class TestBceLoss:
    def test_max_entropy_prediction(self):
        A = torch.tensor(np.random.default_rng(0).integers(0, 2, (5, 5)).astype(float))
        A_hat = torch.full((5, 5), 0.5, dtype=torch.float64)
        assert abs(float(bce_loss(A, A_hat)) - math.log(2)) < 1e-9

    def test_perfect_prediction_at_clamp(self):
        A = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
        A_hat = A.clone()
        loss = float(bce_loss(A, A_hat))
        assert abs(loss - (-math.log(1 - 1e-7))) < 1e-12

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        A = torch.tensor(rng.integers(0, 2, (4, 4)).astype(float))
        P = torch.tensor(rng.uniform(0.01, 0.99, (4, 4)))
        loss = float(bce_loss(A, P))
        expected = []
        for i in range(4):
            for j in range(4):
                if i == j:
                    continue
                a, p = float(A[i, j]), float(P[i, j])
                expected.append(-(a * math.log(p) + (1 - a) * math.log(1 - p)))
        assert abs(loss - sum(expected) / len(expected)) < 1e-12

    def test_shape_mismatch_errors(self):
        with pytest.raises(ConfigError):
            bce_loss(torch.zeros(3, 3), torch.full((4, 4), 0.5))


class TestSteps:
    def setup_method(self):
        self.graph = make_graph()
        self.params = make_params()

    def _features(self):
        from stmae.model import encode_time, node_features
        means = torch.tensor(self.graph.window_means)
        eta = encode_time(means, self.params)
        X = node_features(eta, self.params)
        A = torch.tensor(self.graph.adjacency_stack(), dtype=torch.float64)
        return X, A

    def test_spatial_losses_finite_nonnegative(self):
        X, A = self._features()
        out = spatial_step(X[0], A[0], self.params, MaskConfig(),
                           np.random.default_rng(0))
        for key in ("l_node", "l_edge"):
            v = float(out[key].detach())
            assert math.isfinite(v) and v >= 0

    def test_spatial_deterministic_to_the_bit(self):
        X, A = self._features()
        out1 = spatial_step(X[1], A[1], self.params, MaskConfig(),
                            np.random.default_rng(7))
        out2 = spatial_step(X[1], A[1], self.params, MaskConfig(),
                            np.random.default_rng(7))
        assert float(out1["l_node"].detach()) == float(out2["l_node"].detach())
        assert float(out1["l_edge"].detach()) == float(out2["l_edge"].detach())

    def test_temporal_context_forced_at_t3(self):
        graph = make_graph(T_max=20, window=10, stride=5)  # T = 3
        assert graph.T == 3
        X, A = self._features()
        out = temporal_step(X[:3], A[:3], 2, self.params, MaskConfig(),
                            np.random.default_rng(0))
        assert out["context"] == (1, 3)

    def test_temporal_edge_term_swap_invariant_node_term_not(self):
        from stmae.model import decode_edges_cross, decode_nodes, gin_encode

        X, A = self._features()
        Z_a, _ = gin_encode(X[0], A[0], self.params)
        Z_b, _ = gin_encode(X[4], A[4], self.params)
        A_ab = decode_edges_cross(Z_a, Z_b, self.params)
        A_ba = decode_edges_cross(Z_b, Z_a, self.params)
        assert torch.equal(A_ab, A_ba)
        X_ab = decode_nodes(torch.cat([Z_a, Z_b], -1) @ self.params.W_tp, self.params)
        X_ba = decode_nodes(torch.cat([Z_b, Z_a], -1) @ self.params.W_tp, self.params)
        assert not torch.allclose(X_ab, X_ba)

    def test_temporal_losses_finite_nonnegative(self):
        X, A = self._features()
        out = temporal_step(X, A, 3, self.params, MaskConfig(),
                            np.random.default_rng(1))
        for key in ("l_node", "l_edge"):
            v = float(out[key].detach())
            assert math.isfinite(v) and v >= 0


class TestStmaeStep:
    def test_additivity_exact(self):
        graph = make_graph()
        params = make_params()
        breakdown, total = stmae_step(graph, params, MaskConfig(),
                                      np.random.default_rng(0))
        assert breakdown.l_spatial == breakdown.l_sp_node + breakdown.l_sp_edge
        assert breakdown.l_temporal == breakdown.l_tp_node + breakdown.l_tp_edge
        assert breakdown.l_total == breakdown.l_spatial + breakdown.l_temporal
        assert math.isfinite(float(total.detach()))

    def test_t3_yields_single_contribution_per_task(self):
        graph = make_graph(T_max=20, window=10, stride=5)
        assert graph.T == 3
        params = make_params()
        cfg = MaskConfig(sce_subset="all", ratio_node=0.0, ratio_edge=0.0)
        breakdown, _ = stmae_step(graph, params, cfg, np.random.default_rng(2))
        # exactly one spatial and one temporal term at t=2
        X = torch.tensor(graph.window_means)
        from stmae.model import encode_time, node_features
        eta = encode_time(X, params)
        feats = node_features(eta, params)
        A = torch.tensor(graph.adjacency_stack(), dtype=torch.float64)
        sp = spatial_step(feats[1], A[1], params, cfg, np.random.default_rng(99))
        assert abs(breakdown.l_sp_node - float(sp["l_node"].detach())) < 1e-12
        assert breakdown.l_tp_node > 0

    def test_determinism_bitwise(self):
        graph = make_graph(seed=3)
        params = make_params(seed=3)
        b1, t1 = stmae_step(graph, params, MaskConfig(), np.random.default_rng(11))
        b2, t2 = stmae_step(graph, params, MaskConfig(), np.random.default_rng(11))
        assert b1 == b2
        assert float(t1.detach()) == float(t2.detach())

    def test_invariants_across_widths(self):
        graph = make_graph(seed=4)
        for D in (4, 8):
            params = make_params(D=D, seed=D)
            breakdown, total = stmae_step(graph, params, MaskConfig(),
                                          np.random.default_rng(D))
            assert math.isfinite(breakdown.l_total)
            assert breakdown.l_total >= 0
            assert breakdown.l_total == breakdown.l_spatial + breakdown.l_temporal
            assert math.isfinite(float(total.detach()))

    def test_short_series_requires_flag(self):
        graph = make_graph(T_max=15, window=10, stride=5)  # T = 2
        params = make_params()
        with pytest.raises(ConfigError, match="T=2"):
            stmae_step(graph, params, MaskConfig(), np.random.default_rng(0))
        with pytest.warns(RuntimeWarning, match="spatial-only"):
            breakdown, _ = stmae_step(graph, params,
                                      MaskConfig(allow_spatial_only=True),
                                      np.random.default_rng(0))
        assert breakdown.l_temporal == 0.0
        assert breakdown.l_total == breakdown.l_spatial

    def test_recon_target_gating(self):
        graph = make_graph(seed=5)
        params = make_params(seed=5)
        b_node, _ = stmae_step(graph, params, MaskConfig(recon_target="node-only"),
                               np.random.default_rng(1))
        b_edge, _ = stmae_step(graph, params, MaskConfig(recon_target="edge-only"),
                               np.random.default_rng(1))
        assert b_node.l_sp_edge == 0.0 and b_node.l_tp_edge == 0.0
        assert b_edge.l_sp_node == 0.0 and b_edge.l_tp_node == 0.0
        assert b_node.l_sp_node > 0 and b_edge.l_sp_edge > 0


class TestLossBreakdown:
    def test_from_parts_sums(self):
        b = LossBreakdown.from_parts(0.1, 0.2, 0.3, 0.4)
        assert b.l_spatial == 0.1 + 0.2
        assert b.l_temporal == 0.3 + 0.4
        assert b.l_total == b.l_spatial + b.l_temporal
