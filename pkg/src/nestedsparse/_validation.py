"""Input validation helpers."""

import numpy as np

from .exceptions import DimensionError

FLOAT = np.float32


def as_matrix(a, name="matrix", dtype=FLOAT, layer=None):
    """Return `a` as a C-contiguous 2-D array with finite entries."""
    arr = np.ascontiguousarray(a, dtype=dtype)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}", layer=layer)
    if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_same_shape(a, b, what="operands"):
    if a.shape != b.shape:
        raise DimensionError(f"{what} shape mismatch: {a.shape} vs {b.shape}")


def check_block_shape(block_m, block_n):
    block_m, block_n = int(block_m), int(block_n)
    if block_m < 1 or block_n < 1:
        raise ValueError(f"block shape must be positive, got {block_m}x{block_n}")
    return block_m, block_n


def check_fraction(s, name="sparsity"):
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {s}")
    return s
