"""Sparse x dense kernels over NestedCSR with run-time level selection.

The product ``C = A @ B`` is computed one block row of ``A`` at a time.
For each row the columns of ``B`` are processed in tiles of ``tile_M``
columns, and the row's contribution is gathered band by band (sparsest
band first, matching storage order). Selecting a sparser level simply
stops the band loop earlier, so switching levels never touches ``A``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._validation import as_matrix
from .exceptions import DimensionError
from .netcore import im2col
from .nestedcsr import NestedCSRMatrix, decode, encode

INT8_MAX = 127


@dataclass(frozen=True)
class KernelConfig:
    tile_M: int = 4
    selected_level: int = 0

    def __post_init__(self):
        if self.tile_M < 1:
            raise ValueError(f"tile_M must be >= 1, got {self.tile_M}")


def _as_config(cfg):
    if cfg is None:
        return KernelConfig()
    if isinstance(cfg, KernelConfig):
        return cfg
    return KernelConfig(selected_level=int(cfg))


def _tiled(B, tile_M, block_n, acc_dtype):
    """B padded to whole tiles and viewed as (block_cols, block_n, tiles, tile_M)."""
    k, ncols = B.shape
    tiles = max(1, math.ceil(ncols / tile_M))
    padded = np.zeros((k, tiles * tile_M), dtype=acc_dtype)
    padded[:, :ncols] = B
    return padded.reshape(k // block_n, block_n, tiles, tile_M)


def _spmm_core(A, B, level, tile_M, acc_dtype):
    m, n = A.block_m, A.block_n
    ncols = B.shape[1]
    Bt = _tiled(B, tile_M, n, acc_dtype)
    tiles = Bt.shape[2]
    out = np.zeros((A.rows // m, m, tiles, tile_M), dtype=acc_dtype)
    bands = A.active_bands(level)
    values = A.nz_values
    jidx = A.nz_jidx
    for r in range(A.rows // m):
        acc = out[r]
        row = r * m
        for band in bands:
            lo = band.start + int(band.row_ptr[row])
            hi = band.start + int(band.row_ptr[row + m])
            if hi == lo:
                continue
            blocks = values[lo * m * n:hi * m * n].reshape(hi - lo, m, n).astype(acc_dtype, copy=False)
            panel = Bt[jidx[lo:hi]]  # (k, n, tiles, tile_M)
            acc += np.tensordot(blocks, panel, axes=([0, 2], [0, 1]))
    return out.reshape(A.rows, tiles * tile_M)[:, :ncols]


def _check_operands(A, B):
    if A.cols != B.shape[0]:
        raise DimensionError(f"A is {A.rows}x{A.cols} but B has {B.shape[0]} rows")


def spmm(A, B, cfg=None):
    """Float32 ``decode(A, level) @ B`` computed from the active bands only."""
    cfg = _as_config(cfg)
    level = A.check_level(cfg.selected_level)
    B = as_matrix(B, "B")
    _check_operands(A, B)
    return _spmm_core(A, B, level, cfg.tile_M, np.float32)


def dense_matmul(A, B):
    """Reference dense product with float64 accumulation, returned as float32."""
    return (np.asarray(A, dtype=np.float64) @ np.asarray(B, dtype=np.float64)).astype(np.float32)


def mac_count(A, level, b_cols):
    """Multiply-accumulates performed by :func:`spmm` at `level`."""
    return A.nonzero_blocks(level) * A.block_size * int(b_cols)


# --- int8 path -------------------------------------------------------------

def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def scale_exponent(max_abs):
    """Smallest integer n with ``max_abs / 2**n <= 127`` (0 for an all-zero tensor)."""
    if max_abs == 0:
        return 0
    n = math.ceil(math.log2(max_abs / INT8_MAX))
    while math.ldexp(max_abs, -(n - 1)) <= INT8_MAX:
        n -= 1
    while math.ldexp(max_abs, -n) > INT8_MAX:
        n += 1
    return n


def quantize_tensor(x, exponent=None):
    """Symmetric power-of-two quantization; returns (int8 array, exponent)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    if exponent is None:
        exponent = scale_exponent(float(np.abs(x).max()) if x.size else 0.0)
    q = np.clip(round_half_away(np.ldexp(x, -exponent)), -INT8_MAX, INT8_MAX)
    return q.astype(np.int8), int(exponent)


@dataclass(frozen=True)
class QuantizedLayer:
    """int8 weights with real value ``q * 2**scale_exponent``.

    ``payload`` is a dense int8 array or a NestedCSR matrix with int8 values.
    Activation exponents are optional calibration results.
    """

    payload: object
    scale_exponent: int
    in_exponent: int | None = None
    out_exponent: int | None = None

    @property
    def is_sparse(self):
        return isinstance(self.payload, NestedCSRMatrix)


def quantize_layer(weights, masks=None):
    """Quantize a weight matrix; with `masks`, store it as int8 NestedCSR."""
    w = as_matrix(weights, "weights")
    if masks is not None:
        w = w * masks[0].bits
    q, n = quantize_tensor(w)
    payload = encode(q, masks) if masks is not None else q
    return QuantizedLayer(payload, n)


def dequantize(layer, level=0):
    q = decode(layer.payload, level) if layer.is_sparse else layer.payload
    return np.ldexp(q.astype(np.float32), layer.scale_exponent).astype(np.float32)


def accumulator_bound_ok(k):
    return k * INT8_MAX * INT8_MAX < 2 ** 31


def spmm_q(A, B, cfg=None):
    """Exact int32 accumulation of an int8 NestedCSR times an int8 matrix."""
    cfg = _as_config(cfg)
    level = A.check_level(cfg.selected_level)
    if A.dtype != np.int8:
        raise TypeError(f"spmm_q needs int8 weights, got {A.dtype}")
    B = np.asarray(B)
    if B.ndim != 2 or B.dtype != np.int8:
        raise TypeError("B must be a 2-D int8 matrix")
    if np.any(B == -128):
        raise ValueError("int8 activations must be symmetric, in [-127, 127]")
    _check_operands(A, B)
    if not accumulator_bound_ok(A.cols):
        raise OverflowError(f"K={A.cols}: K*127*127 does not fit an int32 accumulator")
    return _spmm_core(A, B, level, cfg.tile_M, np.int32)


def requantize(acc, shift):
    """Scale int32 accumulators by ``2**-shift`` to int8.

    Right shifts round half away from zero; results saturate to [-127, 127].
    """
    acc = np.asarray(acc, dtype=np.int64)
    if shift > 0:
        mag = (np.abs(acc) + (1 << (shift - 1))) >> shift
        out = np.sign(acc) * mag
    else:
        out = acc << (-shift)
    return np.clip(out, -INT8_MAX, INT8_MAX).astype(np.int8)


def requant_shift(weight_exponent, in_exponent, out_exponent):
    """Shift taking ``acc * 2**(w + in)`` to the output scale ``2**out``."""
    return out_exponent - weight_exponent - in_exponent


# --- convolution -----------------------------------------------------------

def conv_sparse(spec, A, x, level=0, bias=None, tile_M=4):
    """Convolution through im2col and :func:`spmm`.

    `x` is a flattened NHWC batch ``(N, H*W*C)``; the result is flattened
    NHWC as well.
    """
    x = np.asarray(x, dtype=np.float32)
    n = x.shape[0]
    if A.shape != spec.weight_shape:
        raise DimensionError(f"weights {A.shape} vs conv spec {spec.weight_shape}", layer=spec.name)
    cols = im2col(x.reshape(n, spec.in_h, spec.in_w, spec.in_channels),
                  spec.kernel_h, spec.kernel_w, spec.stride, spec.padding)
    out = spmm(A, cols.T, KernelConfig(tile_M, level)).T
    if bias is not None:
        out = out + bias
    return np.ascontiguousarray(out).reshape(n, -1)


def conv_sparse_q(spec, A, x_q, level=0, tile_M=4):
    """int8 convolution; returns int32 accumulators shaped (N, out_h*out_w*out_c)."""
    n = x_q.shape[0]
    cols = im2col(np.asarray(x_q).reshape(n, spec.in_h, spec.in_w, spec.in_channels),
                  spec.kernel_h, spec.kernel_w, spec.stride, spec.padding)
    acc = spmm_q(A, np.ascontiguousarray(cols.T), KernelConfig(tile_M, level)).T
    return np.ascontiguousarray(acc).reshape(n, -1)
