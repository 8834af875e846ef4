import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestedsparse.exceptions import (
    BadMagicError,
    DimensionError,
    InvariantError,
    LevelError,
    NestingError,
    TruncatedError,
    UnsupportedVersionError,
)
from nestedsparse.nestedcsr import (
    NestedCSRMatrix,
    band_coordinates,
    block_csr_footprint,
    decode,
    deserialize,
    encode,
    footprint,
    serialize,
)
from nestedsparse.pruning import BlockMask, NestedMaskSet, SparsityLevelSet, apply_mask, get_nested_masks

import oracles

W = np.array([[3, 4, 0, 0], [1, 1, 5, 5]], dtype=np.float32)


def example_masks():
    grids = [[[1, 0], [1, 1]], [[1, 0], [0, 1]], [[0, 0], [0, 1]]]
    return NestedMaskSet(tuple(BlockMask.from_block_grid(np.array(g), s, 1, 2)
                               for g, s in zip(grids, (0.25, 0.5, 0.75))))


def random_case(seed, empty_core=False):
    rng = np.random.default_rng(seed)
    bm, bn = [(1, 1), (1, 2), (2, 2)][int(rng.integers(3))]
    gr, gc = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    levels = oracles.random_levels(rng, int(rng.integers(1, 5)))
    Wr = rng.normal(size=(gr * bm, gc * bn)).astype(np.float32)
    return Wr, oracles.random_nested_masks(rng, Wr.shape, levels, bm, bn, empty_core)


def test_encode_example():
    A = encode(W, example_masks())
    assert A.nz_values.tolist() == [5, 5, 3, 4, 1, 1]
    assert A.nz_iidx.tolist() == [0, 1, 1, 0, 0, 1]
    assert A.nz_jidx.tolist() == [1, 0, 0]
    assert A.band_block_counts() == [1, 1, 1]


def test_decode_example():
    A = encode(W, example_masks())
    assert decode(A, 2).tolist() == [[0, 0, 0, 0], [0, 0, 5, 5]]
    assert decode(A, 0).tolist() == W.tolist()
    with pytest.raises(LevelError):
        decode(A, 3)


def test_footprint_example():
    assert tuple(footprint(encode(W, example_masks()), 1, 2)) == (6, 12, 6, 24)


def test_single_dense_level_is_plain_block_csr():
    Wr = np.arange(1, 9, dtype=np.float32).reshape(2, 4)
    A = encode(Wr, NestedMaskSet((BlockMask(np.ones((2, 4), np.uint8), 0.0, 1, 2),)))
    assert A.nz_values.size == Wr.size
    assert A.nz_values.tolist() == Wr.ravel().tolist()
    assert footprint(A, 4).values == Wr.size * 4


def test_empty_sparsest_band():
    Wr, ms = random_case(3, empty_core=True)
    A = encode(Wr, ms)
    assert A.band_block_counts()[0] == 0
    assert not np.any(A.nz_iidx[:A.rows])
    assert not decode(A, A.n_levels - 1).any()
    assert deserialize(serialize(A)) == A


def test_adding_a_level_grows_only_iidx():
    rng = np.random.default_rng(0)
    Wr = rng.normal(size=(8, 16)).astype(np.float32)
    two = encode(Wr, get_nested_masks(Wr, SparsityLevelSet((0.5, 0.7))))
    three = encode(Wr, get_nested_masks(Wr, SparsityLevelSet((0.5, 0.7, 0.9))))
    f2, f3 = footprint(two, 4, 2), footprint(three, 4, 2)
    assert (f3.values, f3.jidx) == (f2.values, f2.jidx)
    assert f3.iidx - f2.iidx == Wr.shape[0] * 2


def test_encode_errors():
    with pytest.raises(DimensionError):
        encode(np.zeros((2, 6)), example_masks())
    a = BlockMask.from_block_grid(np.array([[1, 0]]), 0.5, 1, 2)
    b = BlockMask.from_block_grid(np.array([[0, 1]]), 0.5, 1, 2)
    with pytest.raises(NestingError):
        encode(np.ones((1, 4)), [a, b])


def test_arrays_are_read_only():
    A = encode(W, example_masks())
    with pytest.raises(ValueError):
        A.nz_values[0] = 1


def test_block_rows_use_first_row_counts():
    Wr = np.arange(1, 17, dtype=np.float32).reshape(4, 4)
    grid = np.array([[1, 0], [1, 1]])
    A = encode(Wr, NestedMaskSet((BlockMask.from_block_grid(grid, 0.25, 2, 2),)))
    assert A.nz_iidx.tolist() == [1, 0, 2, 0]
    assert np.array_equal(decode(A, 0), apply_mask(Wr, BlockMask.from_block_grid(grid, 0.25, 2, 2)))


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_roundtrip_accounting_and_bands(seed):
    Wr, ms = random_case(seed, empty_core=seed % 7 == 0)
    A = encode(Wr, ms)
    R, C = Wr.shape
    bm, bn = ms.block_shape
    N = len(ms)
    for i, m in enumerate(ms):
        assert decode(A, i).tobytes() == apply_mask(Wr, m).tobytes()
    s_min = ms[0].sparsity
    assert A.nz_values.size == round((1 - s_min) * R * C)
    assert A.nz_iidx.size == N * R
    assert A.nz_jidx.size == round((1 - s_min) * R * C / (bm * bn))
    # bands are disjoint and prefixes rebuild each mask's support
    seen = set()
    for k, band in enumerate(A.bands):
        br, bc = band_coordinates(A, band)
        coords = set(zip(br.tolist(), bc.tolist()))
        assert not coords & seen
        seen |= coords
        grid = ms[N - 1 - k].block_grid
        assert seen == set(zip(*map(lambda a: a.tolist(), np.nonzero(grid))))
        assert int(band.row_counts.sum()) == band.n_blocks
    for ib in (1, 2, 4):
        fp = footprint(A, 4, ib)
        single = block_csr_footprint(ms[0].nonzero_blocks, R, bm, bn, 4, ib)
        assert fp.total - single.total == (N - 1) * R * ib
        separate = sum(block_csr_footprint(m.nonzero_blocks, R, bm, bn, 4, ib).total for m in ms)
        assert fp.total <= separate
    blob = serialize(A)
    assert deserialize(blob) == A
    assert serialize(deserialize(blob)) == blob


def test_serialization_is_canonical():
    a = encode(W, example_masks())
    b = encode(W.copy(), example_masks())
    assert serialize(a) == serialize(b)
    c = NestedCSRMatrix(2, 4, 1, 2, (0.25, 0.5, 0.75), a.nz_values.copy(), a.nz_iidx.copy(),
                        a.nz_jidx.copy())
    assert serialize(c) == serialize(a)


def test_header_layout():
    blob = serialize(encode(W, example_masks()))
    assert blob[:4] == b"NCSR"
    assert blob[4:6] == (1).to_bytes(2, "little")
    assert blob[17:23] == bytes([250, 0, 244, 1, 238, 2])  # 250, 500, 750 per mille


def test_format_errors():
    blob = serialize(encode(W, example_masks()))
    with pytest.raises(TruncatedError):
        deserialize(blob[:-1])
    with pytest.raises(BadMagicError):
        deserialize(b"XCSR" + blob[4:])
    with pytest.raises(UnsupportedVersionError):
        deserialize(blob[:4] + (2).to_bytes(2, "little") + blob[6:])
    # bump the first count of band 1 (row 0 of the second band)
    bad = bytearray(blob)
    off = 24 + 4 * 2
    bad[off] += 1
    with pytest.raises((InvariantError, TruncatedError)):
        deserialize(bytes(bad))
    with pytest.raises(InvariantError) as exc:
        deserialize(blob + b"\0")
    assert exc.value.invariant == "stream-length"


def test_flipped_iidx_detected_as_invariant():
    # swap counts between rows so lengths still match but capacity/order break
    Wr = np.ones((2, 4), dtype=np.float32)
    A = encode(Wr, NestedMaskSet((BlockMask(np.ones((2, 4), np.uint8), 0.0, 1, 2),)))
    blob = bytearray(serialize(A))
    iidx_at = 4 + 2 + 4 + 4 + 3 + 2 + 1
    blob[iidx_at:iidx_at + 8] = (3).to_bytes(4, "little") + (1).to_bytes(4, "little")
    with pytest.raises(InvariantError) as exc:
        deserialize(bytes(blob))
    assert exc.value.invariant == "iidx-capacity"
