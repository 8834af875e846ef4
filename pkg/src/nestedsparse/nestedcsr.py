"""NestedCSR: one block-CSR payload holding N nested sparsity configurations.

The nonzero blocks of the least sparse mask are split into N disjoint
*bands*. Band 0 holds the blocks kept at the sparsest level, band j the
blocks that appear at level ``N-1-j`` but not at the next sparser one.
Bands are concatenated sparsest first, so level ``i`` (0 = least sparse)
reads the prefix made of bands ``0 .. N-1-i``.

Per band, ``nz_iidx`` holds one count per matrix row. For block heights
above one the count of a block row is stored in its first row and the
remaining rows of that block row hold zero, so ``len(nz_iidx) == N * R``
for every block shape.

Binary layout (little endian)::

    magic "NCSR" | version u16 | R u32 | C u32 | block_m u8 | block_n u8 |
    N u8 | levels u16[N] (per mille) | dtype u8 (0=f32, 1=i8) |
    nz_iidx u32[N*R] | nz_jidx u32[nblocks] | nz_values dtype[nblocks*m*n]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._validation import check_block_shape
from .exceptions import (
    BadMagicError,
    DimensionError,
    InvariantError,
    LevelError,
    TruncatedError,
    UnsupportedVersionError,
)
from .pruning import NestedMaskSet, apply_mask

MAGIC = b"NCSR"
FORMAT_VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("i1")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("int8"): 1}
_HEAD = struct.Struct("<4sHIIBBB")


def _per_mille(s):
    return int(round(float(s) * 1000))


@dataclass(frozen=True)
class BandView:
    """Read-only window onto one band of a :class:`NestedCSRMatrix`."""

    index: int
    start: int  # first block of the band in nz_jidx (values start at start*m*n)
    stop: int
    row_counts: np.ndarray  # slice of nz_iidx for this band, length R
    row_ptr: np.ndarray  # prefix sums of row_counts, length R+1, relative to start

    @property
    def n_blocks(self):
        return self.stop - self.start


class Footprint(NamedTuple):
    values: int
    iidx: int
    jidx: int
    total: int


class NestedCSRMatrix:
    """Immutable band-partitioned block-CSR matrix."""

    def __init__(self, rows, cols, block_m, block_n, levels, nz_values, nz_iidx, nz_jidx):
        self.rows = int(rows)
        self.cols = int(cols)
        self.block_m, self.block_n = check_block_shape(block_m, block_n)
        self.levels = tuple(_per_mille(s) / 1000 for s in levels)
        self.nz_values = np.ascontiguousarray(nz_values)
        self.nz_iidx = np.ascontiguousarray(nz_iidx, dtype=np.uint32)
        self.nz_jidx = np.ascontiguousarray(nz_jidx, dtype=np.uint32)
        if self.nz_values.dtype not in _TAG_OF:
            self.nz_values = self.nz_values.astype(np.float32)
        self.validate()
        for a in (self.nz_values, self.nz_iidx, self.nz_jidx):
            a.flags.writeable = False
        counts = self.nz_iidx.astype(np.int64).reshape(self.n_levels, self.rows)
        band_sizes = counts.sum(axis=1)
        offsets = np.concatenate([[0], np.cumsum(band_sizes)])
        self._bands = tuple(
            BandView(j, int(offsets[j]), int(offsets[j + 1]), self.nz_iidx[j * self.rows:(j + 1) * self.rows],
                     np.concatenate([[0], np.cumsum(counts[j])]))
            for j in range(self.n_levels))

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def block_size(self):
        return self.block_m * self.block_n

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def dtype(self):
        return self.nz_values.dtype

    @property
    def bands(self):
        return self._bands

    def check_level(self, level):
        if not 0 <= int(level) < self.n_levels:
            raise LevelError(f"level {level} out of range for {self.n_levels} levels")
        return int(level)

    def active_bands(self, level):
        """Bands read at `level` (0 = least sparse, reads every band)."""
        level = self.check_level(level)
        return self._bands[:self.n_levels - level]

    def nonzero_blocks(self, level):
        bands = self.active_bands(level)
        return bands[-1].stop

    def band_block_counts(self):
        return [b.n_blocks for b in self._bands]

    def realized_sparsity(self, level):
        return 1.0 - self.nonzero_blocks(level) * self.block_size / (self.rows * self.cols)

    def validate(self):
        """Raise :class:`InvariantError` naming the first broken invariant."""
        validate_arrays(self.rows, self.cols, self.block_m, self.block_n,
                        [_per_mille(s) for s in self.levels], self.nz_values,
                        self.nz_iidx, self.nz_jidx)

    def __eq__(self, other):
        return (isinstance(other, NestedCSRMatrix)
                and self.shape == other.shape
                and (self.block_m, self.block_n) == (other.block_m, other.block_n)
                and self.levels == other.levels
                and self.dtype == other.dtype
                and np.array_equal(self.nz_iidx, other.nz_iidx)
                and np.array_equal(self.nz_jidx, other.nz_jidx)
                and np.array_equal(self.nz_values, other.nz_values))

    def __repr__(self):
        return (f"NestedCSRMatrix({self.rows}x{self.cols}, block={self.block_m}x{self.block_n}, "
                f"levels={self.levels}, bands={self.band_block_counts()}, dtype={self.dtype})")


def validate_arrays(rows, cols, block_m, block_n, levels_pm, nz_values, nz_iidx, nz_jidx):
    if block_m < 1 or block_n < 1 or rows % block_m or cols % block_n:
        raise InvariantError("block-shape", f"{rows}x{cols} with block {block_m}x{block_n}")
    n = len(levels_pm)
    if n < 1:
        raise InvariantError("level-count")
    if any(not 0 <= p <= 1000 for p in levels_pm) or any(b <= a for a, b in zip(levels_pm, levels_pm[1:])):
        raise InvariantError("level-order", str(list(levels_pm)))
    if nz_iidx.shape != (n * rows,):
        raise InvariantError("iidx-length", f"{nz_iidx.size} != {n}*{rows}")
    br, bc = rows // block_m, cols // block_n
    counts = nz_iidx.astype(np.int64).reshape(n, br, block_m)
    if block_m > 1 and np.any(counts[:, :, 1:]):
        raise InvariantError("iidx-block-row", "counts must sit on the first row of a block row")
    counts = counts[:, :, 0]
    if np.any(counts > bc):
        raise InvariantError("iidx-capacity", "more blocks in a row than block columns")
    total = int(counts.sum())
    if nz_jidx.shape != (total,):
        raise InvariantError("jidx-length", f"{nz_jidx.size} != {total}")
    if nz_values.shape != (total * block_m * block_n,):
        raise InvariantError("values-length", f"{nz_values.size} != {total * block_m * block_n}")
    jidx = nz_jidx.astype(np.int64)
    if total and jidx.max() >= bc:
        raise InvariantError("jidx-range", f"column index {int(jidx.max())} >= {bc}")
    block_rows = np.repeat(np.tile(np.arange(br), n), counts.ravel())
    keys = block_rows * bc + jidx
    band_of = np.repeat(np.arange(n), counts.sum(axis=1))
    # row-major order inside a band <=> keys strictly increase within the band
    same_band = band_of[1:] == band_of[:-1]
    if np.any(np.diff(keys)[same_band] <= 0):
        raise InvariantError("jidx-order", "blocks of a band must be row-major and unique")
    if np.unique(keys).size != total:
        raise InvariantError("band-disjoint", "a block appears in more than one band")
    if nz_values.dtype.kind == "f" and not np.all(np.isfinite(nz_values)):
        raise InvariantError("values-finite")
    if nz_values.dtype == np.int8 and np.any(nz_values == -128):
        raise InvariantError("values-range", "int8 payload must lie in [-127, 127]")


def _blocks_of(w, block_m, block_n):
    """View of `w` as (block_rows, block_cols, m, n)."""
    r, c = w.shape
    return w.reshape(r // block_m, block_m, c // block_n, block_n).transpose(0, 2, 1, 3)


def encode(weights, masks):
    """Encode `weights` restricted to the least sparse mask of `masks`."""
    if not isinstance(masks, NestedMaskSet):
        masks = NestedMaskSet(tuple(masks))  # raises NestingError when not nested
    w = np.asarray(weights)
    if w.shape != masks.shape:
        raise DimensionError(f"weights {w.shape} vs masks {masks.shape}")
    if w.dtype not in _TAG_OF:
        w = w.astype(np.float32)
    m, n = masks.block_shape
    w = apply_mask(w, masks[0])
    blocks = _blocks_of(w, m, n)
    grids = [mk.block_grid for mk in masks]
    nlev = len(grids)
    rows = w.shape[0]
    iidx = np.zeros((nlev, rows), dtype=np.uint32)
    jidx, values = [], []
    for j in range(nlev):
        band = grids[nlev - 1 - j].copy()
        if j:
            band &= ~grids[nlev - j]
        br, bc = np.nonzero(band)
        iidx[j, ::m] = np.bincount(br, minlength=band.shape[0])
        jidx.append(bc)
        values.append(blocks[br, bc].reshape(-1))
    return NestedCSRMatrix(rows, w.shape[1], m, n, masks.levels,
                           np.concatenate(values).astype(w.dtype),
                           iidx.ravel(), np.concatenate(jidx))


def band_coordinates(mat, band):
    """(block_row, block_col) of every block stored in `band`."""
    counts = band.row_counts[::mat.block_m].astype(np.int64)
    brow = np.repeat(np.arange(counts.size), counts)
    return brow, mat.nz_jidx[band.start:band.stop].astype(np.int64)


def decode(mat, level):
    """Dense matrix of the configuration at `level` (0 = least sparse)."""
    m, n = mat.block_m, mat.block_n
    out = np.zeros(mat.shape, dtype=mat.dtype)
    view = _blocks_of(out, m, n)
    for band in mat.active_bands(level):
        br, bc = band_coordinates(mat, band)
        vals = mat.nz_values[band.start * m * n:band.stop * m * n].reshape(-1, m, n)
        view[br, bc] = vals
    return out


def footprint(mat, value_bytes=None, index_bytes=4):
    """Byte counts of the three arrays and their total."""
    if value_bytes is None:
        value_bytes = mat.dtype.itemsize
    v = mat.nz_values.size * value_bytes
    i = mat.nz_iidx.size * index_bytes
    j = mat.nz_jidx.size * index_bytes
    return Footprint(v, i, j, v + i + j)


def block_csr_footprint(nonzero_blocks, rows, block_m, block_n, value_bytes=4, index_bytes=4):
    """Footprint of a plain single-level block CSR with the same row-count convention."""
    v = nonzero_blocks * block_m * block_n * value_bytes
    i = rows * index_bytes
    j = nonzero_blocks * index_bytes
    return Footprint(v, i, j, v + i + j)


def serialize(mat):
    levels = [_per_mille(s) for s in mat.levels]
    head = _HEAD.pack(MAGIC, FORMAT_VERSION, mat.rows, mat.cols, mat.block_m,
                      mat.block_n, mat.n_levels)
    parts = [head, struct.pack(f"<{len(levels)}H", *levels),
             struct.pack("<B", _TAG_OF[mat.dtype]),
             mat.nz_iidx.astype("<u4").tobytes(),
             mat.nz_jidx.astype("<u4").tobytes(),
             mat.nz_values.astype(DTYPE_TAGS[_TAG_OF[mat.dtype]]).tobytes()]
    return b"".join(parts)


def deserialize(data):
    """Parse and fully validate a serialized matrix."""
    data = bytes(data)
    if len(data) < 4:
        raise TruncatedError("stream shorter than the magic number")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    if len(data) < _HEAD.size:
        raise TruncatedError("header truncated")
    _, version, rows, cols, bm, bn, nlev = _HEAD.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version}, expected {FORMAT_VERSION}")
    pos = _HEAD.size
    need = pos + 2 * nlev + 1
    if len(data) < need:
        raise TruncatedError("level table truncated")
    levels = list(struct.unpack_from(f"<{nlev}H", data, pos))
    pos += 2 * nlev
    tag = data[pos]
    pos += 1
    if tag not in DTYPE_TAGS:
        raise InvariantError("value-dtype", f"unknown dtype tag {tag}")
    if bm < 1 or bn < 1 or rows % bm or cols % bn:
        raise InvariantError("block-shape", f"{rows}x{cols} with block {bm}x{bn}")
    n_iidx = nlev * rows
    if len(data) < pos + 4 * n_iidx:
        raise TruncatedError("nz_iidx truncated")
    iidx = np.frombuffer(data, dtype="<u4", count=n_iidx, offset=pos)
    pos += 4 * n_iidx
    nblocks = int(iidx.astype(np.int64).sum())
    n_vals = nblocks * bm * bn
    vdtype = DTYPE_TAGS[tag]
    end = pos + 4 * nblocks + vdtype.itemsize * n_vals
    if len(data) < end:
        raise TruncatedError("block arrays truncated")
    if len(data) > end:
        raise InvariantError("stream-length", f"{len(data) - end} trailing bytes")
    jidx = np.frombuffer(data, dtype="<u4", count=nblocks, offset=pos)
    pos += 4 * nblocks
    values = np.frombuffer(data, dtype=vdtype, count=n_vals, offset=pos)
    validate_arrays(rows, cols, bm, bn, levels, values, iidx, jidx)
    native = np.float32 if tag == 0 else np.int8
    return NestedCSRMatrix(rows, cols, bm, bn, [p / 1000 for p in levels],
                           values.astype(native), iidx.copy(), jidx.copy())


__all__ = [
    "BandView", "Footprint", "NestedCSRMatrix", "band_coordinates",
    "block_csr_footprint", "decode", "deserialize", "encode", "footprint", "serialize",
    "validate_arrays",
]
