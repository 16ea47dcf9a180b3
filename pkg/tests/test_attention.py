import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longsum import kernels
from longsum.attention import (
    AttentionHeadConfig,
    dense_attention_reference,
    sparse_attention,
    sparse_attention_forward,
    sparse_attention_weights,
)
from longsum.oracles import rel_err
from longsum.pattern import build_pattern
from longsum.tensor import ShapeError, Tensor, finite_difference_grad, mul, precision, tsum

BACKENDS = sorted(kernels.BACKENDS)


@st.composite
def patterns(draw, max_n=32):
    n = draw(st.integers(1, max_n))
    w = draw(st.integers(0, n + 2))
    g = draw(st.sets(st.integers(0, n - 1), max_size=min(n, 4)))
    return build_pattern(n, w, g)


class TestBuildPattern:
    def test_window_plus_global(self):
        assert build_pattern(5, 1, {0}).neighbors(2) == [0, 1, 2, 3]

    def test_degenerate_window(self):
        p = build_pattern(4, 0, set())
        assert [p.neighbors(i) for i in range(4)] == [[0], [1], [2], [3]]

    def test_two_globals_cover_row(self):
        p = build_pattern(6, 2, {0, 5})
        # enumerate {1..5} U {0, 5}
        assert p.neighbors(3) == [0, 1, 2, 3, 4, 5]
        assert len(p.neighbors(3)) == 6

    def test_global_rows_attend_everywhere(self):
        p = build_pattern(10, 1, {4})
        assert p.neighbors(4) == list(range(10))
        assert all(p.allowed(i, 4) for i in range(10))

    def test_global_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            build_pattern(4, 1, {4})

    @pytest.mark.parametrize("n,w", [(0, 1), (3, -1)])
    def test_bad_arguments(self, n, w):
        with pytest.raises(ValueError):
            build_pattern(n, w, ())

    def test_render(self):
        assert build_pattern(3, 0, {0}).render() == "###\n##.\n#.#"

    @settings(max_examples=100, deadline=None)
    @given(patterns())
    def test_neighbourhood_definition(self, p):
        G = set(p.globals)
        for i in range(p.n):
            nb = p.neighbors(i)
            assert i in nb
            if i in G:
                assert nb == list(range(p.n))
            else:
                assert set(nb) == {j for j in range(p.n) if abs(i - j) <= p.w} | G
                assert len(nb) <= 2 * p.w + 1 + len(G)
            assert all(p.allowed(i, j) == (j in nb) for j in range(p.n))

    @settings(max_examples=60, deadline=None)
    @given(patterns())
    def test_band_columns_cover_pattern_once(self, p):
        cols = p.band_columns()
        assert cols.shape == (p.n, p.band_width)
        for i in range(p.n):
            if p.is_global(i):
                assert np.all(cols[i] < 0)
                continue
            got = cols[i][cols[i] >= 0]
            assert len(got) == len(set(got.tolist()))
            assert sorted(got.tolist()) == p.neighbors(i)


def test_head_config():
    cfg = AttentionHeadConfig(64, 4)
    assert cfg.d_k == 16
    with pytest.raises(ValueError):
        AttentionHeadConfig(10, 4)


class TestWeights:
    def test_equal_scores_uniform_on_support(self):
        p = build_pattern(7, 1, {0})
        Q = np.zeros((7, 3))
        K = np.random.default_rng(0).standard_normal((7, 3))
        W = sparse_attention_weights(Q, K, p).to_dense()
        for i in range(7):
            nb = p.neighbors(i)
            np.testing.assert_allclose(W[i, nb], 1 / len(nb), atol=1e-7)
            assert np.all(np.delete(W[i], nb) == 0)

    def test_full_window_equals_dense(self):
        rng = np.random.default_rng(1)
        Q, K = rng.standard_normal((9, 4)), rng.standard_normal((9, 4))
        W = sparse_attention_weights(Q, K, build_pattern(9, 8, ())).to_dense()
        s = Q @ K.T / 2.0
        ref = np.exp(s - s.max(1, keepdims=True))
        ref /= ref.sum(1, keepdims=True)
        np.testing.assert_allclose(W, ref, atol=1e-6)

    def test_zero_window_is_identity(self):
        rng = np.random.default_rng(2)
        W = sparse_attention_weights(rng.standard_normal((3, 5)), rng.standard_normal((3, 5)), build_pattern(3, 0, ()))
        np.testing.assert_array_equal(W.to_dense(), np.eye(3))

    def test_scaling_by_sqrt_dk(self):
        Q = np.array([[1.0, 1.0, 1.0, 1.0], [0, 0, 0, 0]])
        K = np.array([[1.0, 1.0, 1.0, 1.0], [0, 0, 0, 0]])
        W = sparse_attention_weights(Q, K, build_pattern(2, 1, ())).to_dense()
        # scores 4/sqrt(4) = 2 and 0
        assert W[0, 0] == pytest.approx(np.exp(2) / (np.exp(2) + 1), abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sparse_attention_weights(np.ones((4, 2)), np.ones((4, 3)), build_pattern(4, 1, ()))
        with pytest.raises(ShapeError):
            sparse_attention_weights(np.ones((4, 2)), np.ones((4, 2)), build_pattern(5, 1, ()))

    @pytest.mark.parametrize("backend", BACKENDS)
    @settings(max_examples=80, deadline=None)
    @given(p=patterns(), seed=st.integers(0, 2**31 - 1))
    def test_row_stochastic_support(self, backend, p, seed):
        rng = np.random.default_rng(seed)
        W = sparse_attention_weights(rng.standard_normal((p.n, 4)) * 3, rng.standard_normal((p.n, 4)) * 3, p, backend=backend)
        np.testing.assert_allclose(W.row_sums(), 1.0, atol=1e-6)
        assert np.all(W.to_dense()[~p.to_mask()] == 0.0)

    def test_banded_storage_size(self):
        p = build_pattern(512, 16, {0})
        W = sparse_attention_weights(np.ones((512, 8)), np.ones((512, 8)), p)
        assert W.band.shape == (512, 2 * 16 + 1 + 1)
        assert W.global_rows.shape == (1, 512)
        assert W.band.size + W.global_rows.size == p.storage_size() <= 2 * 512 * p.band_width


class TestForward:
    def test_identical_values_pass_through(self):
        rng = np.random.default_rng(3)
        v = rng.standard_normal(5)
        out = sparse_attention_forward(rng.standard_normal((10, 5)), rng.standard_normal((10, 5)),
                                       np.tile(v, (10, 1)), build_pattern(10, 2, {0})).data
        np.testing.assert_allclose(out, np.tile(v, (10, 1)), atol=1e-6)

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_identity_pattern_returns_v(self, backend):
        rng = np.random.default_rng(4)
        V = rng.standard_normal((6, 3)).astype(np.float32)
        out = sparse_attention_forward(rng.standard_normal((6, 3)), rng.standard_normal((6, 3)), V,
                                       build_pattern(6, 0, ()), backend=backend).data
        np.testing.assert_array_equal(out, V)

    def test_dense_diagonal_mask_returns_v(self):
        rng = np.random.default_rng(5)
        V = rng.standard_normal((4, 3)).astype(np.float32)
        out = dense_attention_reference(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)), V, np.eye(4, dtype=bool))
        np.testing.assert_array_equal(out.data, V)

    def test_dense_full_mask_is_textbook(self):
        rng = np.random.default_rng(6)
        Q, K, V = (rng.standard_normal((5, 4)) for _ in range(3))
        s = Q @ K.T / 2.0
        a = np.exp(s - s.max(1, keepdims=True))
        a /= a.sum(1, keepdims=True)
        out = dense_attention_reference(Q, K, V, np.ones((5, 5), dtype=bool)).data
        np.testing.assert_allclose(out, a @ V, atol=1e-5)

    def test_dense_rejects_empty_row(self):
        mask = np.eye(3, dtype=bool)
        mask[1, 1] = False
        with pytest.raises(ValueError):
            dense_attention_reference(np.ones((3, 2)), np.ones((3, 2)), np.ones((3, 2)), mask)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sparse_attention_forward(np.ones((4, 2)), np.ones((4, 2)), np.ones((3, 2)), build_pattern(4, 1, ()))

    @pytest.mark.parametrize("backend", BACKENDS)
    @settings(max_examples=60, deadline=None)
    @given(p=patterns(), seed=st.integers(0, 2**31 - 1), d=st.integers(1, 8))
    def test_matches_dense_oracle(self, backend, p, seed, d):
        rng = np.random.default_rng(seed)
        Q, K, V = (rng.standard_normal((p.n, d)).astype(np.float32) for _ in range(3))
        sparse = sparse_attention_forward(Q, K, V, p, backend=backend).data
        dense = dense_attention_reference(Q, K, V, p.to_mask()).data
        assert np.max(np.abs(sparse - dense)) <= 1e-5

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_batched_heads_with_key_padding(self, backend):
        rng = np.random.default_rng(7)
        p = build_pattern(12, 2, {0, 6})
        Q, K, V = (rng.standard_normal((3, 2, 12, 4)).astype(np.float32) for _ in range(3))
        keys = rng.random((3, 1, 12)) > 0.4
        out = sparse_attention(Q, K, V, p, key_mask=keys, backend=backend).data
        mask = p.to_mask()[None, None] & (keys[..., None, :] | np.eye(12, dtype=bool))
        ref = dense_attention_reference(Q, K, V, mask).data
        assert np.max(np.abs(out - ref)) <= 1e-5

    def test_backends_agree(self):
        if len(BACKENDS) < 2:
            pytest.skip("compiled kernel not built")
        rng = np.random.default_rng(8)
        p = build_pattern(100, 5, {0, 50, 99})
        Q, K, V = (rng.standard_normal((2, 100, 8)).astype(np.float32) for _ in range(3))
        a = sparse_attention(Q, K, V, p, backend="native").data
        b = sparse_attention(Q, K, V, p, backend="python").data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_permutation_coherence(self):
        # reversal maps a symmetric window with globals {0, n-1} onto itself
        rng = np.random.default_rng(9)
        n = 11
        p = build_pattern(n, 2, {0, n - 1})
        Q, K, V = (rng.standard_normal((n, 4)).astype(np.float32) for _ in range(3))
        perm = np.arange(n)[::-1]
        out = sparse_attention_forward(Q, K, V, p).data
        out_perm = sparse_attention_forward(Q[perm], K[perm], V[perm], p).data
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-6)

    def test_float64_inputs_stay_float64(self):
        with precision(np.float64):
            out = sparse_attention_forward(np.ones((4, 2)), np.ones((4, 2)), np.ones((4, 2)), build_pattern(4, 1, ()))
        assert out.data.dtype == np.float64


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("n,w,G", [(8, 1, {0}), (6, 0, set()), (8, 2, {3, 7}), (5, 9, {2})])
def test_sparse_gradient_matches_finite_differences(backend, n, w, G):
    rng = np.random.default_rng(n * 10 + w)
    p = build_pattern(n, w, G)
    with precision(np.float64):
        arrs = [rng.standard_normal((n, 3)) for _ in range(3)]
        probe = rng.standard_normal((n, 3))
        for slot in range(3):
            def f(x, slot=slot):
                args = [Tensor(a) for a in arrs]
                args[slot] = x
                return tsum(mul(sparse_attention(*args, p, backend=backend), Tensor(probe)))

            x = Tensor(arrs[slot], requires_grad=True)
            args = [Tensor(a) for a in arrs]
            args[slot] = x
            tsum(mul(sparse_attention(*args, p, backend=backend), Tensor(probe))).backward()
            fd = finite_difference_grad(f, Tensor(arrs[slot]), eps=1e-3).data
            assert np.max(rel_err(x.grad, fd, floor=1e-3)) <= 1e-4
