import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from peqa import ConfigError, NumericError, ShapeError
from peqa.qcore import (
    CHANNEL,
    CodeMatrix,
    GRID_ALPHAS,
    QuantConfig,
    ScaleSet,
    apply_scale_delta,
    dequantize,
    group_errors,
    init_scale_zero,
    minmax_scale_zero,
    quantize_codes,
    round_half_away,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False, width=64)
bits_st = st.sampled_from([2, 3, 4, 8])


def weights(max_rows=4, max_cols=16):
    return st.tuples(st.integers(1, max_rows), st.integers(1, max_cols)).flatmap(
        lambda nm: arrays(np.float64, nm, elements=finite)
    )


def ss(s, z, bits):
    return ScaleSet(np.atleast_2d(s), np.atleast_2d(z), bits)


# -- configuration ------------------------------------------------------------------


@pytest.mark.parametrize("bits", [1, 5, 16, True, 4.5])
def test_bits_outside_allowed_set_rejected(bits):
    with pytest.raises(ConfigError):
        QuantConfig(bits)


def test_group_size_must_divide_input_dim():
    cfg = QuantConfig(4, 3)
    with pytest.raises(ConfigError):
        init_scale_zero(np.ones((2, 8)), cfg)
    assert QuantConfig(4, 4).n_groups(8) == 2
    assert QuantConfig(4, CHANNEL).n_groups(8) == 1


def test_non_finite_weights_rejected():
    with pytest.raises(NumericError):
        init_scale_zero(np.array([[0.0, np.nan]]), QuantConfig(4))


def test_zero_point_out_of_range_rejected():
    with pytest.raises(ConfigError):
        ScaleSet(np.ones((1, 1)), np.array([[4]]), 2)
    with pytest.raises(ShapeError):
        ScaleSet(np.ones((2, 1)), np.zeros((1, 1), dtype=int), 2)


# -- init_scale_zero ---------------------------------------------------------------


def test_grid_aligned_row_is_exact():
    sc, codes = init_scale_zero(np.array([[0.0, 1.0, 2.0, 3.0]]), QuantConfig(2))
    assert sc.s[0, 0] == 1.0 and sc.z[0, 0] == 0
    assert codes.q.tolist() == [[0, 1, 2, 3]]
    assert group_errors(np.array([[0.0, 1.0, 2.0, 3.0]]), codes, sc)[0, 0] == 0.0


def test_zero_row_uses_unit_scale():
    sc, codes = init_scale_zero(np.zeros((1, 8)), QuantConfig(4))
    assert sc.s[0, 0] == 1.0 and sc.z[0, 0] == 0 and not codes.q.any()


@pytest.mark.parametrize("c, s, z, q", [(0.7, 0.7, 0, 1), (-2.5, 2.5, 1, 0)])
def test_constant_rows_reconstruct_exactly(c, s, z, q):
    W = np.full((1, 5), c)
    sc, codes = init_scale_zero(W, QuantConfig(3))
    assert (sc.s[0, 0], sc.z[0, 0]) == (s, z)
    assert (codes.q == q).all()
    np.testing.assert_array_equal(dequantize(codes, sc), W)


def test_small_row_matches_brute_force_oracles():
    w = np.array([0.13, -0.41, 0.27, 0.09])
    sc, codes = init_scale_zero(w[None, :], QuantConfig(3))
    err = group_errors(w[None, :], codes, sc)[0, 0]
    assert err <= oracles.grid_error(w, 3, 2001) + 1e-12
    assert err == pytest.approx(oracles.enumeration_error(w, 3), abs=1e-12)


@given(st.integers(2, 5), st.sampled_from([2, 3]), st.integers(0, 2**31 - 1))
def test_exact_search_equals_enumeration_optimum(length, bits, seed):
    w = np.random.default_rng(seed).normal(size=length)
    if bits == 3:
        w = w[:4]
    sc, codes = init_scale_zero(w[None, :], QuantConfig(bits))
    err = group_errors(w[None, :], codes, sc)[0, 0]
    assert err == pytest.approx(oracles.enumeration_error(w, bits), abs=1e-12)


@given(weights(), bits_st)
def test_never_worse_than_minmax_or_dense_grid(W, bits):
    sc, codes = init_scale_zero(W, QuantConfig(bits))
    errs = group_errors(W, codes, sc)
    for i, w in enumerate(W):
        if w.max() == w.min():
            assert errs[i, 0] == 0.0
            continue
        tol = 1e-12 * float(w @ w)
        assert errs[i, 0] <= oracles.minmax_error(w, bits) + tol
        assert errs[i, 0] <= oracles.grid_error(w, bits, 201) + tol


@given(weights(3, 12), st.sampled_from([2, 3, 4]))
def test_grid_method_is_the_91_point_search(W, bits):
    sc, codes = init_scale_zero(W, QuantConfig(bits), method="grid")
    exact_sc, exact_codes = init_scale_zero(W, QuantConfig(bits))
    errs = group_errors(W, codes, sc)
    for i, w in enumerate(W):
        if w.max() == w.min():
            continue
        ref = oracles.grid_error(w, bits, len(GRID_ALPHAS), 0.30, 1.20)
        assert errs[i, 0] == pytest.approx(ref, rel=1e-9, abs=1e-12 * float(w @ w))
    energy = (W * W).sum(axis=1, keepdims=True)
    assert np.all(group_errors(W, exact_codes, exact_sc) <= errs + 1e-12 * energy)


def test_group_wise_solves_groups_independently(rng):
    W = rng.normal(size=(3, 16))
    sc, _ = init_scale_zero(W, QuantConfig(4, 4))
    assert sc.shape == (3, 4)
    for g in range(4):
        part, _ = init_scale_zero(W[:, 4 * g : 4 * g + 4], QuantConfig(4))
        np.testing.assert_array_equal(sc.s[:, g], part.s[:, 0])
        np.testing.assert_array_equal(sc.z[:, g], part.z[:, 0])


def test_deterministic(rng):
    W = rng.normal(size=(8, 32))
    a, qa = init_scale_zero(W, QuantConfig(3, 8))
    b, qb = init_scale_zero(W.copy(), QuantConfig(3, 8))
    assert a.s.tobytes() == b.s.tobytes() and (qa.q == qb.q).all()


# -- quantize_codes / dequantize -----------------------------------------------------


@pytest.mark.parametrize("w, q", [(0.9, 1), (10.0, 3), (-0.5, 0)])
def test_quantize_codes_examples(w, q):
    assert quantize_codes(np.array([[w]]), ss(1.0, 0, 2), QuantConfig(2)).q[0, 0] == q


def test_round_half_away_from_zero():
    x = np.array([-2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 0.49999999999999994, -0.49999999999999994])
    np.testing.assert_array_equal(round_half_away(x), [-3, -2, -1, 1, 2, 3, 0, 0])
    np.testing.assert_array_equal(round_half_away(x), oracles.round_half_away(x))


def test_zero_scale_names_channel():
    s = ScaleSet(np.array([[1.0], [0.0]]), np.zeros((2, 1), dtype=int), 4)
    with pytest.raises(NumericError, match="channel 1"):
        quantize_codes(np.ones((2, 3)), s, QuantConfig(4))


def test_dequantize_examples():
    assert dequantize(CodeMatrix(np.array([[1]]), 2), ss(0.5, 0, 2))[0, 0] == 0.5
    assert dequantize(CodeMatrix(np.array([[0]]), 2), ss(0.5, 2, 2))[0, 0] == -1.0


@given(st.integers(1, 6), st.integers(1, 5), st.sampled_from([1, 2, 4]), st.integers(0, 2**31 - 1))
def test_grid_weights_round_trip_bit_exactly(n, gl, G, seed):
    r = np.random.default_rng(seed)
    m = gl * G
    q = r.integers(0, 16, size=(n, m))
    sc = ScaleSet(r.uniform(0.01, 2.0, (n, G)), r.integers(0, 16, (n, G)), 4)
    W = dequantize(CodeMatrix(q, 4), sc)
    codes = quantize_codes(W, sc, QuantConfig(4, gl if G > 1 else None))
    np.testing.assert_array_equal(dequantize(codes, sc), W)


@given(weights(), bits_st, st.integers(0, 2**31 - 1))
def test_codes_always_in_range(W, bits, seed):
    r = np.random.default_rng(seed)
    n = W.shape[0]
    s = r.choice([-1, 1], size=(n, 1)) * r.uniform(1e-6, 5, size=(n, 1))
    sc = ScaleSet(s, r.integers(0, 2**bits, (n, 1)), bits)
    q = quantize_codes(W, sc, QuantConfig(bits)).q
    assert q.min() >= 0 and q.max() <= 2**bits - 1


@given(weights(), bits_st, st.integers(-8, 8))
def test_scaling_equivariance_powers_of_two(W, bits, k):
    sc, codes = init_scale_zero(W, QuantConfig(bits))
    c = 2.0**k
    scaled = quantize_codes(c * W, sc.with_scales(c * sc.s), QuantConfig(bits))
    np.testing.assert_array_equal(scaled.q, codes.q)


def test_scaling_equivariance_arbitrary_factor(rng):
    W = rng.normal(size=(16, 64))
    sc, codes = init_scale_zero(W, QuantConfig(4))
    for c in (0.3, 1.7, 123.456):
        np.testing.assert_array_equal(quantize_codes(c * W, sc.with_scales(c * sc.s), QuantConfig(4)).q, codes.q)


@given(weights(), bits_st)
def test_quantize_dequantize_idempotent(W, bits):
    cfg = QuantConfig(bits)
    sc, codes = init_scale_zero(W, cfg)
    once = dequantize(codes, sc)
    twice = dequantize(quantize_codes(once, sc, cfg), sc)
    np.testing.assert_array_equal(once, twice)


def test_minmax_baseline_matches_oracle(rng):
    W = rng.normal(size=(6, 10))
    sc, codes = minmax_scale_zero(W, QuantConfig(3))
    errs = group_errors(W, codes, sc)
    for i, w in enumerate(W):
        assert errs[i, 0] == pytest.approx(oracles.minmax_error(w, 3), rel=1e-12)


# -- apply_scale_delta ----------------------------------------------------------------


def test_apply_scale_delta_examples():
    assert apply_scale_delta([1.0], [0.0]).tolist() == [1.0]
    assert apply_scale_delta([0.5], [-0.1])[0] == pytest.approx(0.4)
    with pytest.raises(ShapeError):
        apply_scale_delta([1.0, 2.0], [0.0])


def test_adapted_scales_match_dense_oracle(rng):
    for _ in range(20):
        W = rng.normal(size=(8, 8))
        sc, codes = init_scale_zero(W, QuantConfig(4))
        s = apply_scale_delta(sc.s, rng.normal(0, 0.01, sc.s.shape))
        x = rng.normal(size=8)
        got = dequantize(codes, sc.with_scales(s)) @ x
        want = oracles.matvec(codes.q, s, sc.z, x)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)
