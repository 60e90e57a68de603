from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mxnpu.numerics import (
    COL_AXIS, FI32_ZERO, ROW_AXIS, Fi32, Fi32Tensor, IntTensor, MxTensor,
    dequantize_mx, dot32, fi32_align_add, fi32_from_real, fi32_mul,
    fi32_normalize, fi32_to_real, mx_nbytes, quantize_int, quantize_mx,
)
from oracles import fi32_round, fi32_value

normal_fi32 = st.builds(
    lambda e, f, neg: Fi32(e, -f if neg else f),
    st.integers(1, 254), st.integers(1 << 22, (1 << 23) - 1), st.booleans(),
)


def test_fi32_one_and_zero():
    one = fi32_from_real(1.0)
    assert (one.exp, one.frac) == (127, 1 << 22)
    assert fi32_from_real(0.0) == Fi32(0, 0)


def test_fi32_three_and_a_half_round_trips():
    v = fi32_from_real(3.5)
    assert abs(v.to_fraction() - Fraction(7, 2)) <= Fraction(7, 2) * Fraction(1, 1 << 23)
    assert v.is_normalized


@given(st.floats(min_value=1e-30, max_value=1e30) | st.floats(min_value=-1e30, max_value=-1e-30))
def test_fi32_from_real_matches_rational_rounding(x):
    got = fi32_from_real(x)
    assert (got.exp, got.frac) == fi32_round(Fraction(x))
    assert abs(got.to_fraction() - Fraction(x)) <= abs(Fraction(x)) / (1 << 23)


def test_fi32_overflow_saturates_and_flags():
    v = fi32_from_real(1e300)
    assert v.saturated and v.exp == 255 and v.frac == (1 << 23) - 1
    assert fi32_from_real(-1e300).frac == -((1 << 23) - 1)
    assert fi32_from_real(1e-300) == FI32_ZERO


def test_align_add_identities():
    a = fi32_from_real(1.0)
    assert fi32_align_add(a, FI32_ZERO) == a
    two = fi32_align_add(a, a)
    assert fi32_to_real(two) == 2.0 and two.is_normalized


@given(normal_fi32, normal_fi32)
def test_align_add_commutes_and_matches_oracle(a, b):
    got = fi32_align_add(a, b)
    assert got == fi32_align_add(b, a)
    assert (got.exp, got.frac) == fi32_round(a.to_fraction() + b.to_fraction())


def test_align_add_random_pairs_within_one_ulp(rng):
    for _ in range(1000):
        x, y = rng.normal(size=2) * 10.0 ** rng.integers(-5, 5, size=2)
        a, b = fi32_from_real(x), fi32_from_real(y)
        got = fi32_align_add(a, b)
        exact = a.to_fraction() + b.to_fraction()
        if exact == 0:
            assert got == FI32_ZERO
            continue
        ulp = Fraction(2) ** (got.exp - 149)
        assert abs(got.to_fraction() - exact) <= ulp


@given(normal_fi32, normal_fi32)
def test_mul_matches_oracle(a, b):
    got = fi32_mul(a, b)
    assert (got.exp, got.frac) == fi32_round(a.to_fraction() * b.to_fraction())


def test_tensor_ops_agree_with_scalar(rng):
    x = rng.normal(size=500) * 10.0 ** rng.integers(-8, 8, size=500)
    y = rng.normal(size=500) * 10.0 ** rng.integers(-8, 8, size=500)
    tx, ty = Fi32Tensor.from_real(x), Fi32Tensor.from_real(y)
    s, p = tx.add(ty), tx.mul(ty)
    for i in range(500):
        a, b = fi32_from_real(x[i]), fi32_from_real(y[i])
        assert tx.scalar(i) == a
        assert s.scalar(i) == fi32_align_add(a, b)
        assert p.scalar(i) == fi32_mul(a, b)


def test_normalize_large_integers_vectorized(rng):
    s = rng.integers(-(1 << 61), 1 << 61, size=2000)
    e = rng.integers(-40, 60, size=2000)
    t = Fi32Tensor.from_int(s, e)
    for i in range(0, 2000, 7):
        ref = fi32_normalize(int(s[i]), int(e[i]))
        assert (int(t.exp[i]), int(t.frac[i])) == (ref.exp, ref.frac)


# -- dot32 ---------------------------------------------------------------

def test_dot32_one_hot_projects_first_element():
    a = [1] + [0] * 31
    b = list(range(-16, 16))
    out = dot32(a, 0, b, -3)
    assert fi32_to_real(out) == -16 * 2.0 ** -3


def test_dot32_all_ones():
    assert fi32_to_real(dot32([1] * 32, 0, [1] * 32, 0)) == 32.0


def test_dot32_short_block_is_zero_padded():
    assert dot32([3, 4], 0, [5, 6, 7], 0) == dot32([3, 4, 0], 0, [5, 6, 7], 0)


def test_dot32_random_blocks_bit_exact(rng):
    for _ in range(2000):
        a = rng.integers(-127, 128, 32)
        b = rng.integers(-127, 128, 32)
        ea, eb = rng.integers(-50, 50, 2)
        exact = Fraction(int(np.dot(a, b))) * Fraction(2) ** int(ea + eb)
        got = dot32(a, int(ea), b, int(eb))
        assert (got.exp, got.frac) == fi32_round(exact)
        assert got.to_fraction() == exact  # 8-bit operands never round


# -- MX ------------------------------------------------------------------

def test_quantize_mx_ones_exact():
    t = quantize_mx(np.ones((1, 32)))
    assert np.all(t.elems == t.elems[0, 0])
    assert np.all(dequantize_mx(t) == 1.0)
    assert t.shared_exps[0, 0] == 127


def test_quantize_mx_zero_block():
    t = quantize_mx(np.zeros((2, 40)))
    assert np.all(t.elems == 0) and np.all(t.shared_exps == 0)


def test_quantize_mx_error_bound_random_blocks(rng):
    x = rng.uniform(-1, 1, size=(10_000, 32))
    t = quantize_mx(x)
    err = np.abs(dequantize_mx(t) - x).max(axis=1)
    bmax = np.abs(x).max(axis=1)
    assert np.all(err <= 2.0 ** -7 * bmax)
    assert np.all(np.abs(t.elems) <= 127)
    assert np.all(np.abs(t.elems).max(axis=1) >= 64)


@given(st.integers(-20, 20), st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_quantize_mx_scale_equivariant(k, seed):
    x = np.random.default_rng(seed).normal(size=(3, 70))
    a, b = quantize_mx(x), quantize_mx(x * 2.0 ** k)
    assert np.array_equal(a.elems, b.elems)
    assert np.array_equal(a.shared_exps + k, b.shared_exps)


def test_quantize_mx_row_axis_and_transpose(rng):
    x = rng.normal(size=(70, 5))
    t = quantize_mx(x, shared_axis=ROW_AXIS)
    assert t.shared_exps.shape == (3, 5)
    np.testing.assert_array_equal(dequantize_mx(t.T), dequantize_mx(t).T)


def test_mx_storage_matches_rmsnorm_tile_budget():
    assert mx_nbytes(96, 3072) == 304_128 == 297 * 1024
    t = quantize_mx(np.ones((96, 3072)))
    assert t.nbytes == 297 * 1024


def test_mx_bytes_round_trip(rng):
    t = quantize_mx(rng.normal(size=(5, 45)))
    data = t.to_bytes()
    assert len(data) == t.nbytes
    back = MxTensor.from_bytes(data, 5, 45)
    assert np.array_equal(back.elems, t.elems) and np.array_equal(back.shared_exps, t.shared_exps)


def test_mx_to_fi32_is_exact(rng):
    t = quantize_mx(rng.normal(size=(4, 64)))
    assert np.array_equal(t.to_fi32().to_real(), dequantize_mx(t))


# -- integers ------------------------------------------------------------

def test_int_tensor_range_checked():
    with pytest.raises(ValueError):
        IntTensor(np.array([[16]]), "UINT4")
    with pytest.raises(ValueError):
        IntTensor(np.array([[1, 2]]), "UINT4", scale=np.ones(3))


def test_quantize_int16_bound(rng):
    x = rng.normal(size=(8, 8))
    q = quantize_int(x, "INT16")
    assert np.abs(q.to_real() - x).max() <= 2.0 ** (q.exp_code - 127) / 2
    assert np.abs(q.elems).max() <= 32767


def test_int_tensor_bytes():
    assert IntTensor(np.zeros((128, 3072), np.int64), "UINT4").nbytes == 128 * 1536
    assert IntTensor(np.zeros((2, 3), np.int64), "INT16").nbytes == 12


def test_col_axis_default():
    assert quantize_mx(np.ones((1, 1))).shared_axis == COL_AXIS
