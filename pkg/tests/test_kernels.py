import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestedsparse.exceptions import DimensionError, LevelError
from nestedsparse.kernels import (
    KernelConfig,
    accumulator_bound_ok,
    conv_sparse,
    conv_sparse_q,
    dense_matmul,
    dequantize,
    mac_count,
    quantize_layer,
    quantize_tensor,
    requant_shift,
    requantize,
    spmm,
    spmm_q,
)
from nestedsparse.netcore import LayerSpec
from nestedsparse.nestedcsr import decode, encode
from nestedsparse.pruning import BlockMask, NestedMaskSet, apply_mask

import oracles

W = np.array([[3, 4, 0, 0], [1, 1, 5, 5]], dtype=np.float32)


def example():
    grids = [[[1, 0], [1, 1]], [[1, 0], [0, 1]], [[0, 0], [0, 1]]]
    ms = NestedMaskSet(tuple(BlockMask.from_block_grid(np.array(g), s, 1, 2)
                             for g, s in zip(grids, (0.25, 0.5, 0.75))))
    return encode(W, ms)


def random_sparse(rng, dtype=np.float32):
    bm, bn = [(1, 1), (1, 2), (2, 2), (2, 1)][int(rng.integers(4))]
    gr, gc = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    levels = oracles.random_levels(rng, int(rng.integers(1, 5)))
    shape = (gr * bm, gc * bn)
    ms = oracles.random_nested_masks(rng, shape, levels, bm, bn)
    if dtype == np.int8:
        Wr = rng.integers(-127, 128, size=shape).astype(np.int8)
    else:
        Wr = rng.normal(size=shape).astype(np.float32)
    return encode(Wr, ms), ms


# --- examples ------------------------------------------------------------------

def test_spmm_examples():
    A = example()
    for level in range(3):
        assert np.array_equal(spmm(A, np.eye(4), KernelConfig(4, level)), decode(A, level))
    assert spmm(A, np.ones((4, 1)), KernelConfig(selected_level=2)).tolist() == [[0], [10]]


def test_mac_count_examples():
    A = example()
    assert mac_count(A, 0, 1) == 6
    assert mac_count(A, 2, 1) == 2
    zero = encode(np.zeros((2, 4)), NestedMaskSet((BlockMask(np.zeros((2, 4), np.uint8), 1.0, 1, 2),)))
    assert mac_count(zero, 0, 5) == 0


def test_spmm_errors():
    A = example()
    with pytest.raises(DimensionError):
        spmm(A, np.ones((3, 2)))
    with pytest.raises(LevelError):
        spmm(A, np.ones((4, 2)), KernelConfig(selected_level=3))
    with pytest.raises(ValueError):
        KernelConfig(tile_M=0)


def test_quantize_examples():
    q, n = quantize_tensor(np.zeros(5))
    assert n == 0 and not q.any()
    w = np.array([127.0, -3.4, 2.5])
    q, n = quantize_tensor(w)
    assert n == 0 and q.tolist() == [127, -3, 3]  # half rounds away from zero
    w = np.array([1.0, -0.5, 0.25])
    q, n = quantize_tensor(w)
    assert (q.tolist(), n) == ([64, -32, 16], -6)
    layer = quantize_layer(w[None, :])
    assert np.all(np.abs(dequantize(layer) - w) <= 2.0 ** (n - 1))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-6, 1e6))
def test_quantization_bounds(seed, scale):
    rng = np.random.default_rng(seed)
    w = (rng.normal(size=(4, 6)) * scale).astype(np.float32)
    layer = quantize_layer(w)
    n = layer.scale_exponent
    assert np.abs(w).max() / 2.0 ** n <= 127 < np.abs(w).max() / 2.0 ** (n - 1)
    assert np.max(np.abs(layer.payload.astype(int))) <= 127
    assert np.all(np.abs(dequantize(layer) - w) <= 2.0 ** (n - 1) * (1 + 1e-6))


def test_quantized_layer_with_masks():
    rng = np.random.default_rng(1)
    A, ms = random_sparse(rng)
    Wd = decode(A, 0)
    layer = quantize_layer(Wd, ms)
    assert layer.is_sparse and layer.payload.dtype == np.int8
    for i, m in enumerate(ms):
        ref = np.ldexp(quantize_tensor(Wd)[0].astype(np.float64), layer.scale_exponent) * m.bits
        assert np.array_equal(dequantize(layer, i), ref.astype(np.float32))


def test_requantize_rounding_and_saturation():
    acc = np.array([5, -5, 6, -6, 7, 1000, -1000, 0])
    assert requantize(acc, 2).tolist() == [1, -1, 2, -2, 2, 127, -127, 0]  # 1.25,-1.25,1.5,-1.5,1.75
    assert requantize(np.array([3, -3]), -2).tolist() == [12, -12]
    assert requant_shift(-6, -4, -3) == 7


def test_accumulator_bound():
    assert accumulator_bound_ok(133_144)
    assert not accumulator_bound_ok(133_145)  # 133145 * 127**2 >= 2**31


def test_identity_like_int8_operand():
    rng = np.random.default_rng(2)
    A, _ = random_sparse(rng, np.int8)
    for level in range(A.n_levels):
        acc = spmm_q(A, np.eye(A.cols, dtype=np.int8), KernelConfig(4, level))
        assert acc.dtype == np.int32
        assert np.array_equal(acc, decode(A, level).astype(np.int32))


def test_int8_rejects_minus_128():
    A, _ = random_sparse(np.random.default_rng(3), np.int8)
    B = np.full((A.cols, 2), -128, dtype=np.int8)
    with pytest.raises(ValueError):
        spmm_q(A, B)


# --- properties ------------------------------------------------------------------------

@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 9))
def test_float_oracle_and_tile_invariance(seed, bcols):
    rng = np.random.default_rng(seed)
    A, ms = random_sparse(rng)
    B = rng.normal(size=(A.cols, bcols)).astype(np.float32)
    for level in range(A.n_levels):
        ref = dense_matmul(decode(A, level), B)
        outs = [spmm(A, B, KernelConfig(t, level)) for t in (1, 2, 4, 8)]
        assert np.max(np.abs(outs[2] - ref)) <= 1e-5
        assert all(np.max(np.abs(o - outs[0])) <= 1e-6 for o in outs)
        assert mac_count(A, level, bcols) == ms[level].nonzero_blocks * A.block_size * bcols
        if level:
            assert mac_count(A, level, bcols) <= mac_count(A, level - 1, bcols)
            if A.bands[A.n_levels - level].n_blocks:
                assert mac_count(A, level, bcols) < mac_count(A, level - 1, bcols)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 9))
def test_int_oracle_bit_exact(seed, bcols):
    rng = np.random.default_rng(seed)
    A, _ = random_sparse(rng, np.int8)
    B = rng.integers(-127, 128, size=(A.cols, bcols)).astype(np.int8)
    for level in range(A.n_levels):
        ref = oracles.int_matmul(decode(A, level), B)
        outs = [spmm_q(A, B, KernelConfig(t, level)) for t in (1, 2, 4, 8)]
        assert all(np.array_equal(o, ref) for o in outs)


def test_level_switch_reuses_same_matrix():
    rng = np.random.default_rng(4)
    A, _ = random_sparse(rng)
    B = rng.normal(size=(A.cols, 3)).astype(np.float32)
    before = (A.nz_values.copy(), A.nz_iidx.copy(), A.nz_jidx.copy())
    ptrs = [a.ctypes.data for a in (A.nz_values, A.nz_iidx, A.nz_jidx)]
    first = spmm(A, B, KernelConfig(selected_level=A.n_levels - 1))
    spmm(A, B, KernelConfig(selected_level=0))
    again = spmm(A, B, KernelConfig(selected_level=A.n_levels - 1))
    assert np.array_equal(first, again)
    assert [a.ctypes.data for a in (A.nz_values, A.nz_iidx, A.nz_jidx)] == ptrs
    assert all(np.array_equal(x, y) for x, y in zip(before, (A.nz_values, A.nz_iidx, A.nz_jidx)))


# --- convolution ------------------------------------------------------------------------------

def conv_case(rng, c=2, oc=4, k=3, h=5, stride=1, pad=1, levels=(0.3, 0.6)):
    spec = LayerSpec.conv(c, oc, k, h, stride=stride, padding=pad)
    Wr = rng.normal(size=spec.weight_shape).astype(np.float32)
    ms = oracles.random_nested_masks(rng, Wr.shape, levels, 1, 1 if spec.weight_shape[1] % 2 else 2)
    return spec, Wr, ms


def test_conv_1x1_dense_level():
    rng = np.random.default_rng(5)
    spec = LayerSpec.conv(2, 2, 1, 3)
    Wr = rng.normal(size=spec.weight_shape).astype(np.float32)
    A = encode(Wr, NestedMaskSet((BlockMask(np.ones(Wr.shape, np.uint8), 0.0, 1, 2),)))
    x = rng.normal(size=(2, 3, 3, 2)).astype(np.float32)
    ref = oracles.direct_conv(x.astype(np.float64), oracles.conv_weight_4d(Wr, 1, 1, 2))
    assert np.max(np.abs(conv_sparse(spec, A, x.reshape(2, -1)) - ref.reshape(2, -1))) < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 2), st.integers(0, 1))
def test_conv_sparse_matches_direct_loop(seed, stride, pad):
    rng = np.random.default_rng(seed)
    spec, Wr, ms = conv_case(rng, stride=stride, pad=pad)
    A = encode(Wr, ms)
    bias = rng.normal(size=spec.out_channels).astype(np.float32)
    x = rng.normal(size=(2, 5, 5, 2)).astype(np.float32)
    for level, m in enumerate(ms):
        ref = oracles.direct_conv(x.astype(np.float64),
                                  oracles.conv_weight_4d(apply_mask(Wr, m), 3, 3, 2), stride, pad, bias)
        out = conv_sparse(spec, A, x.reshape(2, -1), level, bias)
        assert np.max(np.abs(out - ref.reshape(2, -1))) < 1e-5


def test_conv_sparse_int8_exact():
    rng = np.random.default_rng(6)
    spec, Wr, ms = conv_case(rng)
    layer = quantize_layer(Wr, ms)
    x_q = rng.integers(-127, 128, size=(2, 5 * 5 * 2)).astype(np.int8)
    for level in range(len(ms)):
        w4 = decode(layer.payload, level).astype(np.int64).reshape(4, 3, 3, 2)
        ref = oracles.direct_conv(x_q.reshape(2, 5, 5, 2).astype(np.float64), w4.astype(np.float64), 1, 1)
        acc = conv_sparse_q(spec, layer.payload, x_q, level)
        assert np.array_equal(acc, ref.reshape(2, -1).astype(np.int64))
