"""Block grouping, L2 magnitude ranking and nested block masks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._validation import as_matrix, check_block_shape, check_fraction, check_same_shape
from .exceptions import BlockShapeError, DimensionError, NestingError


@dataclass(frozen=True)
class SparsityLevelSet:
    """Strictly increasing sparsity fractions sharing one block shape."""

    levels: tuple = (0.7, 0.8, 0.9)
    block_m: int = 1
    block_n: int = 2

    def __post_init__(self):
        levels = tuple(float(s) for s in np.atleast_1d(self.levels))
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise ValueError("at least one sparsity level is required")
        if any(not 0.0 < s < 1.0 for s in levels):
            raise ValueError(f"sparsity levels must lie in (0, 1), got {levels}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"sparsity levels must be strictly increasing, got {levels}")
        check_block_shape(self.block_m, self.block_n)

    @property
    def block_shape(self):
        return (self.block_m, self.block_n)

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)


def _block_dims(shape, block_m, block_n):
    rows, cols = shape
    block_m, block_n = check_block_shape(block_m, block_n)
    if rows % block_m or cols % block_n:
        raise BlockShapeError(
            f"matrix {rows}x{cols} is not divisible by block {block_m}x{block_n}; "
            "shapes must be padded by the caller")
    return rows // block_m, cols // block_n


def group_blocks(weights, block_m, block_n):
    """L2 norm of every ``block_m x block_n`` block, as a block grid."""
    w = as_matrix(weights, "weights", dtype=np.float64)
    br, bc = _block_dims(w.shape, block_m, block_n)
    blocks = w.reshape(br, block_m, bc, block_n)
    return np.sqrt((blocks * blocks).sum(axis=(1, 3)))


def pruned_block_count(s, total_blocks):
    # round first so that e.g. 0.7 * 10 counts as 7, not 8
    return min(total_blocks, math.ceil(round(s * total_blocks, 9)))


def expand_blocks(grid, block_m, block_n):
    return np.repeat(np.repeat(grid, block_m, axis=0), block_n, axis=1)


@dataclass(frozen=True, eq=False)
class BlockMask:
    """Binary block-constant mask; ``bits`` is a 2-D uint8 array of 0/1."""

    bits: np.ndarray
    requested: float
    block_m: int = 1
    block_n: int = 2

    @property
    def rows(self):
        return self.bits.shape[0]

    @property
    def cols(self):
        return self.bits.shape[1]

    @property
    def shape(self):
        return self.bits.shape

    @property
    def sparsity(self):
        """Realized fraction of zero entries."""
        return 1.0 - float(self.bits.sum()) / self.bits.size

    @property
    def block_grid(self):
        return self.bits[::self.block_m, ::self.block_n].astype(bool)

    @property
    def support(self):
        return self.bits.astype(bool)

    @property
    def nonzero_blocks(self):
        return int(self.block_grid.sum())

    def __eq__(self, other):
        return (isinstance(other, BlockMask) and self.requested == other.requested
                and self.block_m == other.block_m and self.block_n == other.block_n
                and np.array_equal(self.bits, other.bits))

    @classmethod
    def from_block_grid(cls, grid, requested, block_m, block_n):
        bits = expand_blocks(np.asarray(grid, dtype=np.uint8), block_m, block_n)
        return cls(np.ascontiguousarray(bits), float(requested), block_m, block_n)


@dataclass(frozen=True, eq=False)
class NestedMaskSet:
    """Masks ordered by ascending sparsity whose supports shrink monotonically."""

    masks: tuple

    def __post_init__(self):
        masks = tuple(self.masks)
        object.__setattr__(self, "masks", masks)
        if not masks:
            raise ValueError("a mask set needs at least one mask")
        first = masks[0]
        for m in masks[1:]:
            if m.shape != first.shape or (m.block_m, m.block_n) != (first.block_m, first.block_n):
                raise DimensionError("all masks in a set must share shape and block shape")
        for i in range(len(masks) - 1):
            # M_{i+1} must imply M_i
            if np.any(masks[i + 1].bits & (1 - masks[i].bits)):
                raise NestingError(
                    f"mask {i + 1} keeps entries that mask {i} prunes")

    @property
    def levels(self):
        return tuple(m.requested for m in self.masks)

    @property
    def shape(self):
        return self.masks[0].shape

    @property
    def block_shape(self):
        return (self.masks[0].block_m, self.masks[0].block_n)

    def __len__(self):
        return len(self.masks)

    def __getitem__(self, i):
        return self.masks[i]

    def __iter__(self):
        return iter(self.masks)

    def __eq__(self, other):
        return (isinstance(other, NestedMaskSet) and len(self) == len(other)
                and all(a == b for a, b in zip(self.masks, other.masks)))


def rank_blocks(weights, block_m, block_n):
    """Block indices (row-major) from weakest to strongest; ties keep index order."""
    norms = group_blocks(weights, block_m, block_n)
    return np.argsort(norms.ravel(), kind="stable"), norms.shape


def _mask_from_ranking(order, grid_shape, s, block_m, block_n):
    total = order.size
    keep = np.ones(total, dtype=np.uint8)
    keep[order[:pruned_block_count(s, total)]] = 0
    return BlockMask.from_block_grid(keep.reshape(grid_shape), s, block_m, block_n)


def get_mask(weights, s, block_m=1, block_n=2):
    """Zero the ``ceil(s * blocks)`` lowest-norm blocks."""
    s = check_fraction(s)
    order, grid_shape = rank_blocks(weights, block_m, block_n)
    return _mask_from_ranking(order, grid_shape, s, block_m, block_n)


def get_nested_masks(weights, levels):
    """One mask per level, all cut from a single ranking of `weights`."""
    if not isinstance(levels, SparsityLevelSet):
        levels = SparsityLevelSet(tuple(levels))
    order, grid_shape = rank_blocks(weights, levels.block_m, levels.block_n)
    return NestedMaskSet(tuple(
        _mask_from_ranking(order, grid_shape, s, levels.block_m, levels.block_n)
        for s in levels.levels))


def apply_mask(weights, mask):
    """Hadamard product of `weights` with a mask (BlockMask or 0/1 array).

    Pruned entries are written as +0.0 (a plain product would keep the sign
    of negative weights), so the result matches a decoded NestedCSR bit for bit.
    """
    w = np.asarray(weights)
    bits = mask.bits if isinstance(mask, BlockMask) else np.asarray(mask)
    check_same_shape(w, bits, "weights/mask")
    return np.where(bits.astype(bool), w, w.dtype.type(0))
