import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from convfactor.errors import InvalidArgument
from convfactor.tensor import as_tensor, fold, mode_multiply, svd, truncated_svd, unfold
from oracles import mode_product_by_sum, unfold_by_index


class TestUnfold:
    @pytest.mark.parametrize("mode", [0, 1, 2, 3])
    def test_matches_index_oracle(self, rng, mode):
        t = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
        np.testing.assert_array_equal(unfold(t, mode), unfold_by_index(t, mode))

    def test_three_way_column_order(self):
        t = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        # Mode 1: columns run over (mode 2, mode 0) with mode 0 fastest.
        got = unfold(t, 1)
        assert got.shape == (3, 8)
        assert got[1, 0] == t[0, 1, 0]
        assert got[1, 1] == t[1, 1, 0]
        assert got[1, 2] == t[0, 1, 1]

    @pytest.mark.parametrize("mode", [0, 1, 2, 3])
    def test_fold_inverts_unfold(self, rng, mode):
        t = rng.standard_normal((3, 3, 5, 7)).astype(np.float32)
        np.testing.assert_array_equal(fold(unfold(t, mode), mode, t.shape), t)

    def test_bad_mode(self):
        with pytest.raises(InvalidArgument):
            unfold(np.zeros((2, 2, 2), dtype=np.float32), 3)

    def test_fold_size_mismatch(self):
        with pytest.raises(InvalidArgument):
            fold(np.zeros((3, 5), dtype=np.float32), 0, (3, 2, 2))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float32, st.lists(st.integers(1, 4), min_size=2, max_size=4).map(tuple),
                  elements=st.floats(-10, 10, width=32)),
           st.data())
    def test_roundtrip_property(self, t, data):
        mode = data.draw(st.integers(0, t.ndim - 1))
        m = unfold(t, mode)
        assert m.shape == (t.shape[mode], t.size // t.shape[mode])
        np.testing.assert_array_equal(fold(m, mode, t.shape), t)


class TestModeMultiply:
    @pytest.mark.parametrize("mode", [0, 1, 2])
    def test_matches_sum_oracle(self, rng, mode):
        t = rng.standard_normal((3, 4, 5))
        m = rng.standard_normal((2, t.shape[mode]))
        got = mode_multiply(t, m, mode, dtype=np.float64)
        np.testing.assert_allclose(got, mode_product_by_sum(t, m, mode), rtol=1e-12, atol=1e-12)

    def test_distinct_modes_commute(self, rng):
        t = rng.standard_normal((3, 3, 6, 5))
        a = rng.standard_normal((4, 6))
        b = rng.standard_normal((2, 5))
        ab = mode_multiply(mode_multiply(t, a, 2, np.float64), b, 3, np.float64)
        ba = mode_multiply(mode_multiply(t, b, 3, np.float64), a, 2, np.float64)
        np.testing.assert_allclose(ab, ba, rtol=1e-12, atol=1e-12)

    def test_same_mode_composes(self, rng):
        t = rng.standard_normal((3, 6, 2))
        a = rng.standard_normal((4, 6))
        b = rng.standard_normal((5, 4))
        two = mode_multiply(mode_multiply(t, a, 1, np.float64), b, 1, np.float64)
        one = mode_multiply(t, b @ a, 1, np.float64)
        np.testing.assert_allclose(two, one, rtol=1e-12, atol=1e-12)

    def test_mismatch_rejected(self, rng):
        with pytest.raises(InvalidArgument):
            mode_multiply(rng.standard_normal((3, 4)), rng.standard_normal((2, 5)), 1)

    def test_default_dtype_float32(self, rng):
        assert mode_multiply(rng.standard_normal((2, 3)), np.eye(3), 1).dtype == np.float32


class TestSVD:
    def _check(self, m, res, tol, ortho=1e-8):
        ref = np.linalg.svd(m, compute_uv=False)
        scale = max(ref[0], 1.0)
        np.testing.assert_allclose(res.s, ref, atol=tol * scale)
        assert np.all(np.diff(res.s) <= 1e-12 * scale)
        k = len(res.s)
        np.testing.assert_allclose(res.u.T @ res.u, np.eye(k), atol=ortho)
        np.testing.assert_allclose(res.v.T @ res.v, np.eye(k), atol=ortho)
        np.testing.assert_allclose((res.u * res.s) @ res.v.T, m, atol=tol * scale)

    def test_against_numpy_many_shapes(self):
        rng = np.random.default_rng(7)
        shapes = [(int(rng.integers(1, 65)), int(rng.integers(1, 513))) for _ in range(100)]
        shapes += [(64, 512), (512, 64), (1, 1), (3, 1)]
        for rows, cols in shapes:
            m = rng.standard_normal((rows, cols))
            self._check(m, svd(m, dtype=np.float64), 1e-9)

    def test_float32_output(self, rng):
        m = rng.standard_normal((8, 5)).astype(np.float32)
        res = svd(m)
        assert res.u.dtype == res.s.dtype == res.v.dtype == np.float32
        self._check(m.astype(np.float64), res, 1e-5, ortho=1e-6)

    def test_rank_deficient(self, rng):
        m = rng.standard_normal((30, 3)) @ rng.standard_normal((3, 40))
        res = svd(m, dtype=np.float64)
        self._check(m, res, 1e-9)
        assert np.all(res.s[3:] < 1e-9 * res.s[0])

    def test_zero_matrix(self):
        res = svd(np.zeros((4, 6)), dtype=np.float64)
        np.testing.assert_array_equal(res.s, 0.0)
        np.testing.assert_allclose(res.u.T @ res.u, np.eye(4), atol=1e-12)

    def test_rejects_non_finite(self):
        m = np.ones((3, 3))
        m[1, 1] = np.nan
        with pytest.raises(InvalidArgument):
            svd(m)

    def test_truncated(self, rng):
        m = rng.standard_normal((20, 12))
        res = truncated_svd(m, 4)
        assert res.u.shape == (20, 4) and res.v.shape == (12, 4)
        np.testing.assert_allclose(res.s, np.linalg.svd(m, compute_uv=False)[:4], rtol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                  elements=st.floats(-100, 100)))
    def test_reconstruction_property(self, m):
        res = svd(m, dtype=np.float64)
        scale = max(float(np.max(np.abs(m))), 1.0)
        np.testing.assert_allclose((res.u * res.s) @ res.v.T, m, atol=1e-8 * scale * max(m.shape))


def test_as_tensor_checks_rank():
    with pytest.raises(InvalidArgument):
        as_tensor(np.zeros((2, 2)), ndim=(3,))
    assert as_tensor([[1, 2]]).dtype == np.float32
