import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convfactor.cost import tdw_compresses
from convfactor.errors import InvalidArgument, UnsupportedConfiguration
from convfactor.factorize import (_free_energy, decompose_layer, estimate_tucker_ranks, evbmf_rank,
                                  hooi_tucker2, merge_depthsep, merged_kernel,
                                  select_bottleneck_rank, split_pointwise)
from convfactor.layers import (LayerSpec, conv2d_forward, depthsep_forward, layer_forward,
                               random_weights)
import oracles


def free_energy(m, sigma2):
    y = m if m.shape[0] <= m.shape[1] else m.T
    L, M = y.shape
    s = np.linalg.svd(y, compute_uv=False)
    tau = 2.5129 * np.sqrt(L / M)
    xubar = (1 + tau) * (1 + L / M / tau)
    return _free_energy(sigma2, L, M, s, 0.0, xubar)


def rel_fro(a, b):
    return float(np.linalg.norm(np.asarray(a, float) - b) / np.linalg.norm(b))


class TestHOOI:
    @pytest.mark.parametrize("k,c,n,r1,r2", [
        (3, 16, 16, 4, 6), (3, 32, 64, 8, 16), (1, 12, 10, 3, 3), (3, 64, 64, 32, 32),
    ])
    def test_exact_multilinear_rank(self, rng, k, c, n, r1, r2):
        kernel = oracles.tucker_kernel(rng, k, c, n, r1, r2)
        f = hooi_tucker2(kernel, r1, r2)
        assert f.ranks == (r1, r2)
        assert f.proj_in.shape == (c, r1) and f.core.shape == (k, k, r1, r2)
        assert f.proj_out.shape == (r2, n)
        assert f.reconstruction_error <= 1e-5
        assert rel_fro(f.reconstruct(), kernel) <= 1e-5

    def test_factor_orthonormality(self, rng):
        f = hooi_tucker2(rng.standard_normal((3, 3, 20, 24)), 5, 7)
        np.testing.assert_allclose(f.proj_in.T @ f.proj_in, np.eye(5), atol=1e-5)
        np.testing.assert_allclose(f.proj_out @ f.proj_out.T, np.eye(7), atol=1e-5)

    def test_full_rank_is_lossless(self, rng):
        kernel = rng.standard_normal((3, 3, 6, 5)).astype(np.float32)
        f = hooi_tucker2(kernel, 6, 5)
        assert f.reconstruction_error <= 1e-5

    def test_zero_kernel(self):
        f = hooi_tucker2(np.zeros((3, 3, 8, 8)), 2, 3)
        assert f.reconstruction_error == 0.0
        assert not np.any(f.core)

    @pytest.mark.parametrize("seed", range(5))
    def test_error_monotone(self, seed):
        rng = np.random.default_rng(seed)
        kernel = oracles.tucker_kernel(rng, 3, 24, 24, 6, 6) + 0.3 * rng.standard_normal((3, 3, 24, 24))
        f = hooi_tucker2(kernel, 4, 5)
        assert len(f.history) >= 2
        assert all(b <= a + 1e-12 for a, b in zip(f.history, f.history[1:]))
        assert f.history[-1] == pytest.approx(f.reconstruction_error)

    def test_error_decreases_with_rank(self, rng):
        kernel = rng.standard_normal((3, 3, 16, 16))
        errs = [hooi_tucker2(kernel, r, r).reconstruction_error for r in (2, 4, 8, 12, 16)]
        assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))
        assert errs[-1] <= 1e-5

    @pytest.mark.parametrize("ranks", [(0, 1), (1, 0), (9, 1), (1, 9)])
    def test_bad_ranks(self, ranks):
        with pytest.raises(InvalidArgument):
            hooi_tucker2(np.ones((3, 3, 8, 8)), *ranks)

    def test_rejects_non_kernel(self):
        with pytest.raises(InvalidArgument):
            hooi_tucker2(np.ones((8, 8)), 1, 1)


class TestEVBMF:
    def test_zero_matrix(self):
        est = evbmf_rank(np.zeros((20, 30)))
        assert est.rank == 0 and est.noise_variance == 0.0

    @pytest.mark.parametrize("r", [1, 3, 5, 10])
    def test_low_rank_plus_noise(self, r):
        rng = np.random.default_rng(100 + r)
        m = oracles.low_rank_matrix(rng, 100, 200, r, 0.01)
        est = evbmf_rank(m)
        assert est.rank == r
        assert est.noise_variance == pytest.approx(1e-4, rel=0.1)
        assert len(est.retained_singular_values) == r

    def test_transpose_invariant(self, rng):
        m = oracles.low_rank_matrix(rng, 40, 90, 4, 0.05)
        assert evbmf_rank(m).rank == evbmf_rank(m.T).rank == 4

    def test_identity_characterization(self):
        # Flat spectrum: no component stands above the noise floor.
        est = evbmf_rank(np.eye(50))
        assert est.rank == 0
        assert est.noise_variance == pytest.approx(0.02)

    def test_pure_noise(self, rng):
        assert evbmf_rank(rng.standard_normal((64, 64))).rank == 0

    @pytest.mark.parametrize("seed", range(6))
    def test_agrees_with_scipy_reference(self, seed):
        rng = np.random.default_rng(seed)
        rows, cols = int(rng.integers(20, 80)), int(rng.integers(20, 120))
        r = int(rng.integers(1, min(rows, cols) // 3))
        m = oracles.low_rank_matrix(rng, rows, cols, r, float(rng.uniform(0.01, 0.2)))
        ref_rank, ref_sigma2 = oracles.reference_evbmf_rank(m)
        est = evbmf_rank(m)
        assert est.rank == ref_rank
        # scipy's bounded search stops at an absolute step of 1e-5, so only
        # require our optimum to be at least as good and close by.
        assert est.noise_variance == pytest.approx(ref_sigma2, rel=1e-2)
        assert free_energy(m, est.noise_variance) <= free_energy(m, ref_sigma2) + 1e-9

    def test_rejects_bad_input(self):
        with pytest.raises(InvalidArgument):
            evbmf_rank(np.ones(5))
        with pytest.raises(InvalidArgument):
            evbmf_rank(np.full((3, 3), np.inf))


class TestDecompose:
    def test_estimates_planted_ranks(self, rng):
        kernel = oracles.tucker_kernel(rng, 3, 32, 48, 4, 6)
        kernel = kernel + 1e-3 * rng.standard_normal(kernel.shape).astype(np.float32)
        e1, e2 = estimate_tucker_ranks(kernel)
        assert (e1.rank, e2.rank) == (4, 6)
        f = decompose_layer(kernel)
        assert f.ranks == (4, 6) and f.ranks_estimated
        assert f.reconstruction_error < 1e-2

    def test_explicit_ranks(self, rng):
        f = decompose_layer(rng.standard_normal((3, 3, 8, 8)), (2, 3))
        assert f.ranks == (2, 3) and not f.ranks_estimated

    def test_zero_kernel_clamps_to_one(self):
        assert decompose_layer(np.zeros((3, 3, 4, 4))).ranks == (1, 1)

    def test_layer7_random_under_time_limit(self):
        rng = np.random.default_rng(0)
        kernel = (rng.standard_normal((8, 8, 128, 128)) * 0.01).astype(np.float32)
        start = time.perf_counter()
        f = decompose_layer(kernel)
        assert time.perf_counter() - start < 30.0
        assert 1 <= f.ranks[0] <= 128 and 1 <= f.ranks[1] <= 128


class TestMerge:
    def test_matches_depthsep_forward(self, rng):
        spec = LayerSpec("depthsep", 3, 5, 7, pad=1)
        w = random_weights(spec, rng)
        x = rng.standard_normal((8, 8, 5)).astype(np.float32)
        merged = merge_depthsep(w["depthwise"], w["pointwise"])
        dense = conv2d_forward(x, LayerSpec("standard", 3, 5, 7, pad=1), {"kernel": merged})
        assert oracles.rel_err(dense, depthsep_forward(x, spec, w)) <= 1e-5

    def test_elementwise_formula(self, rng):
        d = rng.standard_normal((2, 2, 3))
        p = rng.standard_normal((3, 4))
        m = merge_depthsep(d, p)
        for a in range(2):
            for b in range(2):
                for c in range(3):
                    for n in range(4):
                        assert m[a, b, c, n] == pytest.approx(d[a, b, c] * p[c, n], rel=1e-6)

    def test_width_multiplier_unsupported(self, rng):
        with pytest.raises(UnsupportedConfiguration):
            merge_depthsep(np.ones((3, 3, 8)), np.ones((8, 4)), t=2)

    def test_channel_mismatch(self):
        with pytest.raises(InvalidArgument):
            merge_depthsep(np.ones((3, 3, 4)), np.ones((5, 2)))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 8), st.integers(1, 8), st.integers(1, 2),
           st.integers(0, 2), st.integers(0, 2**31 - 1))
    def test_equivalence_property(self, k, c, n, stride, pad, seed):
        rng = np.random.default_rng(seed)
        spec = LayerSpec("depthsep", k, c, n, stride=stride, pad=pad)
        w = random_weights(spec, rng)
        x = rng.standard_normal((k + 4, k + 3, c)).astype(np.float32)
        dense = LayerSpec("standard", k, c, n, stride=stride, pad=pad)
        got = conv2d_forward(x, dense, {"kernel": merge_depthsep(w["depthwise"], w["pointwise"])})
        assert oracles.rel_err(got, depthsep_forward(x, spec, w)) <= 1e-4

    @pytest.mark.parametrize("spec", [
        LayerSpec("depthsep", 3, 4, 6, pad=1, t=3),
        LayerSpec("tdw", 3, 4, 6, pad=1, t=2, rank=3),
        LayerSpec("tucker2", 3, 4, 6, pad=1, r1=2, r2=3),
        LayerSpec("cdp", 3, 4, 6, pad=1, alpha=1),
        LayerSpec("cdp", 3, 4, 6, pad=1, alpha=0),
        LayerSpec("cdp", 3, 4, 6, pad=1, alpha=4),
    ])
    def test_merged_kernel_all_kinds(self, rng, spec):
        w = random_weights(spec, rng)
        x = rng.standard_normal((7, 7, spec.c)).astype(np.float32)
        dense = LayerSpec("standard", 3, spec.c, spec.n, pad=1)
        got = conv2d_forward(x, dense, {"kernel": merged_kernel(spec, w)})
        assert oracles.rel_err(got, layer_forward(x, spec, w)) <= 1e-5


class TestBottleneck:
    def test_rank_one(self, rng):
        p = np.outer(rng.standard_normal(64), rng.standard_normal(128))
        sel = select_bottleneck_rank(p)
        assert sel.rank == 1 and sel.compresses

    def test_zero_kernel_gives_one(self):
        assert select_bottleneck_rank(np.zeros((16, 32))).rank == 1

    def test_compression_condition(self):
        # 64 * 128 = 8192 against 64R + 128R: pays off up to R = 42.
        rng = np.random.default_rng(3)
        p = oracles.low_rank_matrix(rng, 64, 128, 33, 1e-3)
        sel = select_bottleneck_rank(p)
        assert sel.rank == 33 and sel.compresses
        assert tdw_compresses(64, 128, 42) and not tdw_compresses(64, 128, 43)

    def test_split_reconstructs_planted_rank(self, rng):
        p = oracles.low_rank_matrix(rng, 20, 30, 5, 0.0)
        b_in, b_out = split_pointwise(p, 5)
        assert b_in.shape == (20, 5) and b_out.shape == (5, 30)
        assert rel_fro(b_in.astype(float) @ b_out, p) <= 1e-5

    def test_split_rank_beyond_min_dim_pads(self, rng):
        p = rng.standard_normal((4, 10))
        b_in, b_out = split_pointwise(p, 6)
        assert b_in.shape == (4, 6)
        assert rel_fro(b_in.astype(float) @ b_out, p) <= 1e-5

    def test_split_bad_rank(self):
        with pytest.raises(InvalidArgument):
            split_pointwise(np.ones((4, 4)), 0)
