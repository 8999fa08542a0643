import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from expansionnet import tensor as tn
from expansionnet.errors import ConfigurationError, ContractError, DimensionError
from expansionnet.expansion import (
    ExpansionMode,
    ExpansionParams,
    backward_expansion,
    build_dynamic_expansion,
    build_static_expansion,
    causal_masks,
    expansion_layer,
    expansion_step,
    forward_expansion,
    row_normalize,
    select,
)
from expansionnet.gradcheck import check_gradients
from expansionnet.tensor import Tensor

from oracles import expansion_backward_loop, expansion_forward_loop, phi_loop

EPS = 1e-9


def make_params(mode, d=6, n_e=3, seed=0):
    return ExpansionParams(d, n_e, mode, np.random.default_rng(seed))


class TestRowNormalize:
    def test_zero_row_stays_zero(self):
        np.testing.assert_array_equal(row_normalize(np.zeros((2, 3))).data, np.zeros((2, 3)))

    def test_symmetric(self):
        np.testing.assert_allclose(row_normalize(np.array([[2.0, 2.0]]), EPS).data, [[0.5, 0.5]], atol=1e-9)

    def test_row_sums(self):
        x = np.random.default_rng(0).random((4, 6))
        s = x.sum(axis=1)
        np.testing.assert_allclose(row_normalize(x, EPS).data.sum(axis=1), s / (s + EPS), atol=1e-12)

    def test_matches_loop(self):
        x = np.random.default_rng(1).random((3, 5))
        np.testing.assert_allclose(row_normalize(x, EPS).data, phi_loop(x, EPS), atol=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=st.floats(0, 1e3)))
    def test_rows_in_unit_interval(self, x):
        out = row_normalize(x, EPS).data
        assert np.all((out >= 0) & (out < 1))
        assert np.all(out.sum(axis=1) < 1)

    def test_negative_input_rejected_in_debug(self):
        with tn.debug_mode(), pytest.raises(ContractError):
            row_normalize(np.array([[1.0, -1.0]]))

    def test_epsilon_must_be_positive(self):
        with pytest.raises(ContractError):
            row_normalize(np.ones((1, 2)), 0.0)


class TestBuildExpansion:
    def test_static_is_bank_lookup(self):
        p = make_params(ExpansionMode.STATIC, n_e=1)
        E_Q, E_B = build_static_expansion(p)
        assert E_Q is p.q_bank and E_B is p.b_bank
        assert E_Q.shape == (1, 6)

    def test_static_rejected_on_dynamic_layer(self):
        with pytest.raises(ContractError):
            build_static_expansion(make_params(ExpansionMode.DYNAMIC_CAUSAL))

    def test_projection_counts(self):
        assert len(make_params(ExpansionMode.STATIC).projections) == 4
        assert len(make_params(ExpansionMode.DYNAMIC_CAUSAL).projections) == 5
        p = make_params(ExpansionMode.STATIC)
        assert p.q_bank.shape == p.b_bank.shape

    def test_zero_bank_repeats_conditionings(self):
        p = make_params(ExpansionMode.DYNAMIC_CAUSAL, d=4, n_e=3)
        p.q_bank.data[:] = 0
        C = np.random.default_rng(0).normal(size=(2, 4))
        E_Q, _, origin = build_dynamic_expansion(C, p)
        np.testing.assert_array_equal(E_Q.data, np.repeat(C, 3, axis=0))
        np.testing.assert_array_equal(origin, [0, 0, 0, 1, 1, 1])

    def test_single_row(self):
        p = make_params(ExpansionMode.DYNAMIC_CAUSAL, d=4, n_e=1)
        C = np.ones((1, 4))
        E_Q, E_B, _ = build_dynamic_expansion(C, p)
        np.testing.assert_array_equal(E_Q.data, C + p.q_bank.data)
        np.testing.assert_array_equal(E_B.data, C + p.b_bank.data)

    def test_origin_major_layout(self):
        p = make_params(ExpansionMode.DYNAMIC_CAUSAL, d=4, n_e=2)
        C = np.random.default_rng(2).normal(size=(3, 4))
        E_Q, E_B, origin = build_dynamic_expansion(C, p)
        for i in range(3):
            for j in range(2):
                r = i * 2 + j
                np.testing.assert_array_equal(E_Q.data[r], C[i] + p.q_bank.data[j])
                np.testing.assert_array_equal(E_B.data[r], C[i] + p.b_bank.data[j])
                assert origin[r] == i
        # row 4 comes from position 2 and bank vector 0
        np.testing.assert_array_equal(E_Q.data[4], C[2] + p.q_bank.data[0])

    def test_bank_gradients(self):
        p = make_params(ExpansionMode.STATIC, d=4, n_e=2)
        X = Tensor(np.random.default_rng(3).normal(size=(3, 4)))
        w = Tensor(np.random.default_rng(4).normal(size=(3, 4)))
        results = check_gradients(lambda: (expansion_layer(X, p) * w).sum(), [("q", p.q_bank), ("b", p.b_bank)])
        assert all(r.ok(1e-4) for r in results), results


class TestForwardBackward:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        L, T, d = 5, 4, 3
        EQ, K, V1, V2, EB = (rng.normal(size=s) for s in [(L, d), (T, d), (T, d), (T, d), (L, d)])
        F1, F2, Z = forward_expansion(EQ, K, V1, V2, EB, epsilon=EPS)
        o1, o2, oz = expansion_forward_loop(EQ, K, V1, V2, EB, EPS)
        np.testing.assert_allclose(Z.data, oz, atol=1e-12)
        np.testing.assert_allclose(F1.data, o1, atol=1e-12)
        np.testing.assert_allclose(F2.data, o2, atol=1e-12)
        B1, B2 = backward_expansion(Z, F1, F2, epsilon=EPS)
        b1, b2 = expansion_backward_loop(oz, o1, o2, EPS)
        np.testing.assert_allclose(B1.data, b1, atol=1e-12)
        np.testing.assert_allclose(B2.data, b2, atol=1e-12)

    def test_masked_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        T, n_e, d = 3, 2, 4
        L = T * n_e
        EQ, K, V1, V2, EB = (rng.normal(size=s) for s in [(L, d), (T, d), (T, d), (T, d), (L, d)])
        fwd, bwd = causal_masks(T, n_e)
        F1, F2, Z = forward_expansion(EQ, K, V1, V2, EB, fwd, EPS)
        o1, o2, _ = expansion_forward_loop(EQ, K, V1, V2, EB, EPS, allowed=fwd)
        np.testing.assert_allclose(F1.data, o1, atol=1e-12)
        np.testing.assert_allclose(F2.data, o2, atol=1e-12)
        B1, B2 = backward_expansion(Z, F1, F2, bwd, EPS)
        b1, b2 = expansion_backward_loop(Z.data, F1.data, F2.data, EPS, allowed=bwd)
        np.testing.assert_allclose(B1.data, b1, atol=1e-12)
        np.testing.assert_allclose(B2.data, b2, atol=1e-12)

    def test_fully_masked_row_gives_bias(self):
        rng = np.random.default_rng(1)
        EQ, EB = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        K, V1, V2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        mask = np.ones((2, 3), dtype=bool)
        mask[1] = False
        F1, F2, _ = forward_expansion(EQ, K, V1, V2, EB, mask, EPS)
        np.testing.assert_array_equal(F1.data[1], EB[1])
        np.testing.assert_array_equal(F2.data[1], EB[1])

    def test_scalar_sign_split(self):
        # d = 1 so Z = e_q * k; choose z = 2 > 0
        EQ, K = np.array([[1.0]]), np.array([[2.0]])
        v1, v2, eb = np.array([[3.0]]), np.array([[5.0]]), np.array([[0.25]])
        F1, F2, Z = forward_expansion(EQ, K, v1, v2, eb, epsilon=EPS)
        z = 2.0
        assert F1.data[0, 0] == pytest.approx(z / (z + EPS) * 3.0 + 0.25, abs=1e-15)
        assert F2.data[0, 0] == 0.25
        B1, B2 = backward_expansion(Z, F1, F2, epsilon=EPS)
        assert B1.data[0, 0] == pytest.approx(z / (z + EPS) * F1.data[0, 0], abs=1e-15)
        assert B2.data[0, 0] == 0.0

    def test_fully_masked_backward_row_is_zero(self):
        rng = np.random.default_rng(2)
        Z, F1, F2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        mask = np.ones((3, 4), dtype=bool)
        mask[0] = False
        B1, B2 = backward_expansion(Z, F1, F2, mask, EPS)
        np.testing.assert_array_equal(B1.data[0], 0.0)
        np.testing.assert_array_equal(B2.data[0], 0.0)

    def test_bad_mask_shape(self):
        rng = np.random.default_rng(0)
        with pytest.raises(DimensionError):
            forward_expansion(*(rng.normal(size=(2, 3)) for _ in range(5)), mask=np.ones((3, 2), dtype=bool))

    def test_mismatched_lengths(self):
        with pytest.raises(DimensionError):
            backward_expansion(np.ones((4, 3)), np.ones((5, 2)), np.ones((4, 2)))


class TestSelect:
    def test_saturated_gate(self):
        B1, B2 = np.random.default_rng(0).normal(size=(2, 3, 4))
        np.testing.assert_allclose(select(np.full((3, 4), 20.0), B1, B2).data, B1, atol=1e-8)

    def test_zero_gate_is_mean(self):
        B1, B2 = np.random.default_rng(1).normal(size=(2, 3, 4))
        np.testing.assert_allclose(select(np.zeros((3, 4)), B1, B2).data, (B1 + B2) / 2, atol=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, (3, 4), elements=st.floats(-50, 50)),
        arrays(np.float64, (3, 4), elements=st.floats(-1e6, 1e6)),
    )
    def test_equal_paths_returned_exactly(self, S, B):
        np.testing.assert_array_equal(select(S, B, B.copy()).data, B)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            select(np.ones((2, 3)), np.ones((2, 3)), np.ones((3, 2)))


class TestCausalMasks:
    def test_forward_and_backward_rules(self):
        fwd, bwd = causal_masks(3, 2)
        for r in range(6):
            for t in range(3):
                assert fwd[r, t] == (t <= r // 2)
                assert bwd[t, r] == (r // 2 <= t)


class TestExpansionLayer:
    @pytest.mark.parametrize("mode", list(ExpansionMode))
    @pytest.mark.parametrize("n_e", [1, 8, 16, 64])
    def test_length_restoration(self, mode, n_e):
        p = make_params(mode, d=4, n_e=n_e)
        X = np.random.default_rng(0).normal(size=(5, 4))
        assert expansion_layer(X, p).shape == (5, 4)

    @pytest.mark.parametrize("T", [1, 2, 7])
    @pytest.mark.parametrize("n_e", [1, 3])
    def test_length_sweep(self, T, n_e):
        p = make_params(ExpansionMode.DYNAMIC_CAUSAL, d=4, n_e=n_e)
        X = np.random.default_rng(T).normal(size=(T, 4))
        assert expansion_layer(X, p, autoregressive=True).shape == (T, 4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 7), st.integers(1, 4), st.integers(0, 2**31))
    def test_causality(self, T, n_e, seed):
        rng = np.random.default_rng(seed)
        p = ExpansionParams(6, n_e, ExpansionMode.DYNAMIC_CAUSAL, rng)
        X = rng.normal(size=(T, 6))
        t = int(rng.integers(1, T))
        X2 = X.copy()
        X2[t:] += rng.normal(size=(T - t, 6)) * 3
        a = expansion_layer(X, p, autoregressive=True).data
        b = expansion_layer(X2, p, autoregressive=True).data
        assert np.abs(a[:t] - b[:t]).max() < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**31))
    def test_static_permutation_equivariance(self, T, n_e, seed):
        rng = np.random.default_rng(seed)
        p = ExpansionParams(6, n_e, ExpansionMode.STATIC, rng)
        X = rng.normal(size=(T, 6))
        perm = rng.permutation(T)
        np.testing.assert_allclose(expansion_layer(X[perm], p).data, expansion_layer(X, p).data[perm], atol=1e-10)

    def test_padding_rows_do_not_leak(self):
        rng = np.random.default_rng(3)
        p = make_params(ExpansionMode.STATIC, d=6, n_e=4)
        X = rng.normal(size=(4, 6))
        padded = np.concatenate([X, rng.normal(size=(2, 6))])
        valid = np.array([True] * 4 + [False] * 2)
        out = expansion_layer(padded, p, key_valid=valid).data
        np.testing.assert_allclose(out[:4], expansion_layer(X, p).data, atol=1e-12)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(4)
        p = make_params(ExpansionMode.DYNAMIC_CAUSAL, d=6, n_e=2)
        X = rng.normal(size=(3, 5, 6))
        batched = expansion_layer(X, p, autoregressive=True).data
        for b in range(3):
            np.testing.assert_allclose(batched[b], expansion_layer(X[b], p, autoregressive=True).data, atol=1e-12)

    @pytest.mark.parametrize("mode", [ExpansionMode.STATIC, ExpansionMode.DYNAMIC_BIDIRECTIONAL])
    def test_non_causal_rejected_in_decoder(self, mode):
        with pytest.raises(ConfigurationError):
            expansion_layer(np.ones((2, 6)), make_params(mode), autoregressive=True)

    def test_bidirectional_is_unmasked_dynamic(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(3, 6))
        p = make_params(ExpansionMode.DYNAMIC_BIDIRECTIONAL)
        # later inputs should influence earlier outputs without a mask
        X2 = X.copy()
        X2[2] += 1.0
        assert np.abs(expansion_layer(X, p).data[0] - expansion_layer(X2, p).data[0]).max() > 1e-6

    def test_bad_construction(self):
        with pytest.raises(ConfigurationError):
            ExpansionParams(4, 0, ExpansionMode.STATIC, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            ExpansionParams(4, 2, ExpansionMode.STATIC, np.random.default_rng(0), epsilon=0.0)

    @pytest.mark.parametrize("mode", list(ExpansionMode))
    def test_gradients(self, mode):
        rng = np.random.default_rng(7)
        p = ExpansionParams(4, 2, mode, rng)
        X = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 4)))
        auto = mode is ExpansionMode.DYNAMIC_CAUSAL
        named = [*p.named_parameters(), ("X", X)]
        results = check_gradients(lambda: (expansion_layer(X, p, autoregressive=auto) * w).sum(), named)
        assert {r.name for r in results} >= {"q_bank", "b_bank", "W_K", "W_V1", "W_V2", "W_S"}
        assert all(r.ok(1e-4) for r in results), results


class TestIncremental:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 7), st.integers(1, 5), st.integers(0, 2**31))
    def test_step_matches_full_layer(self, T, n_e, seed):
        rng = np.random.default_rng(seed)
        p = ExpansionParams(6, n_e, ExpansionMode.DYNAMIC_CAUSAL, rng)
        X = rng.normal(size=(2, T, 6))
        full = expansion_layer(X, p, autoregressive=True).data
        cache = {}
        for t in range(T):
            out = expansion_step(X[:, t : t + 1], p, cache).data
            assert np.abs(out[:, 0] - full[:, t]).max() < 1e-10
        assert cache["F1"].shape == (2, T * n_e, 6)

    def test_static_rejected(self):
        with pytest.raises(ConfigurationError):
            expansion_step(np.ones((1, 6)), make_params(ExpansionMode.STATIC), {})

    def test_one_position_only(self):
        with pytest.raises(DimensionError):
            expansion_step(np.ones((2, 6)), make_params(ExpansionMode.DYNAMIC_CAUSAL), {})
