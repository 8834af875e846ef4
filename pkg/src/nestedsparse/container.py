"""Model container files: a JSON header plus named per-layer binary records.

Layout (little endian)::

    magic "NSCM" | version u16 | kind u8 | meta_len u32 | meta (UTF-8 JSON) |
    n_records u16 | records

    record: name_len u16 | name | type u8 | payload_len u32 | payload

A trained model (kind 0) stores dense weights, biases and packed nested
masks. An encoded model (kind 1) stores prunable weights as NestedCSR blobs
(f32, or i8 preceded by an i8 scale exponent) and keeps dense layers raw.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import BadMagicError, InvariantError, TruncatedError, UnsupportedVersionError
from .nestedcsr import deserialize, serialize
from .pruning import BlockMask, NestedMaskSet

MAGIC = b"NSCM"
FORMAT_VERSION = 1
KIND_MODEL, KIND_ENCODED = 0, 1

DENSE_F32, VECTOR_F32, MASKS, NCSR, NCSR_Q = range(5)
RECORD_NAMES = {DENSE_F32: "dense", VECTOR_F32: "vector", MASKS: "masks", NCSR: "ncsr",
                NCSR_Q: "ncsr-int8"}

_HEAD = struct.Struct("<4sHBI")


@dataclass
class Record:
    name: str
    type: int
    payload: bytes


@dataclass
class Container:
    kind: int
    meta: dict
    records: list = field(default_factory=list)

    def record(self, name):
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    def names(self):
        return [r.name for r in self.records]


# --- payload codecs ----------------------------------------------------------

def pack_dense(a):
    a = np.ascontiguousarray(a, dtype="<f4")
    return struct.pack("<II", *a.shape) + a.tobytes()


def unpack_dense(p):
    if len(p) < 8:
        raise TruncatedError("dense record header truncated")
    r, c = struct.unpack_from("<II", p)
    if len(p) != 8 + 4 * r * c:
        raise TruncatedError(f"dense record: {len(p) - 8} bytes for {r}x{c}")
    return np.frombuffer(p, dtype="<f4", offset=8).reshape(r, c).astype(np.float32)


def pack_vector(v):
    v = np.ascontiguousarray(v, dtype="<f4")
    return struct.pack("<I", v.size) + v.tobytes()


def unpack_vector(p):
    if len(p) < 4:
        raise TruncatedError("vector record truncated")
    (n,) = struct.unpack_from("<I", p)
    if len(p) != 4 + 4 * n:
        raise TruncatedError("vector record length mismatch")
    return np.frombuffer(p, dtype="<f4", offset=4).astype(np.float32)


def pack_masks(ms):
    r, c = ms.shape
    bm, bn = ms.block_shape
    head = struct.pack("<IIBBB", r, c, bm, bn, len(ms))
    levels = struct.pack(f"<{len(ms)}H", *(int(round(s * 1000)) for s in ms.levels))
    bits = b"".join(np.packbits(m.bits.ravel()).tobytes() for m in ms)
    return head + levels + bits


def unpack_masks(p):
    """Decode a mask record; raises NestingError for non-nested masks."""
    if len(p) < 11:
        raise TruncatedError("mask record truncated")
    r, c, bm, bn, n = struct.unpack_from("<IIBBB", p)
    pos = 11
    if len(p) < pos + 2 * n:
        raise TruncatedError("mask levels truncated")
    levels = struct.unpack_from(f"<{n}H", p, pos)
    pos += 2 * n
    per = (r * c + 7) // 8
    if len(p) != pos + n * per:
        raise TruncatedError("mask bits length mismatch")
    masks = []
    for i in range(n):
        raw = np.frombuffer(p, dtype=np.uint8, count=per, offset=pos + i * per)
        bits = np.unpackbits(raw)[: r * c].reshape(r, c)
        grid = bits[::bm, ::bn]
        if not np.array_equal(bits, np.repeat(np.repeat(grid, bm, 0), bn, 1)):
            raise InvariantError("mask-block-constant", f"mask {i}")
        masks.append(BlockMask(np.ascontiguousarray(bits), levels[i] / 1000, bm, bn))
    return NestedMaskSet(tuple(masks))


def pack_ncsr_q(mat, exponent):
    return struct.pack("<b", exponent) + serialize(mat)


def unpack_ncsr_q(p):
    if len(p) < 1:
        raise TruncatedError("quantized record truncated")
    (exp,) = struct.unpack_from("<b", p)
    return deserialize(p[1:]), exp


def decode_record(rec):
    if rec.type == DENSE_F32:
        return unpack_dense(rec.payload)
    if rec.type == VECTOR_F32:
        return unpack_vector(rec.payload)
    if rec.type == MASKS:
        return unpack_masks(rec.payload)
    if rec.type == NCSR:
        return deserialize(rec.payload)
    if rec.type == NCSR_Q:
        return unpack_ncsr_q(rec.payload)
    raise InvariantError("record-type", f"{rec.name}: unknown type {rec.type}")


# --- container codec -----------------------------------------------------------

def dumps(container):
    meta = json.dumps(container.meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [_HEAD.pack(MAGIC, FORMAT_VERSION, container.kind, len(meta)), meta,
             struct.pack("<H", len(container.records))]
    for rec in container.records:
        name = rec.name.encode()
        parts += [struct.pack("<H", len(name)), name,
                  struct.pack("<BI", rec.type, len(rec.payload)), rec.payload]
    return b"".join(parts)


def loads(data):
    """Split a container into records; record payloads are decoded lazily."""
    if data[:4] != MAGIC:
        raise BadMagicError("not a model container")
    if len(data) < _HEAD.size:
        raise TruncatedError("container header truncated")
    _, version, kind, meta_len = _HEAD.unpack_from(data)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"container version {version}")
    pos = _HEAD.size
    if len(data) < pos + meta_len + 2:
        raise TruncatedError("container metadata truncated")
    try:
        meta = json.loads(data[pos:pos + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvariantError("metadata-json", str(exc)) from None
    pos += meta_len
    (n,) = struct.unpack_from("<H", data, pos)
    pos += 2
    records = []
    for _ in range(n):
        if len(data) < pos + 2:
            raise TruncatedError("record name truncated")
        (nl,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if len(data) < pos + nl + 5:
            raise TruncatedError("record header truncated")
        name = data[pos:pos + nl].decode(errors="replace")
        pos += nl
        rtype, plen = struct.unpack_from("<BI", data, pos)
        pos += 5
        if len(data) < pos + plen:
            raise TruncatedError(f"record {name} truncated")
        records.append(Record(name, rtype, bytes(data[pos:pos + plen])))
        pos += plen
    if pos != len(data):
        raise InvariantError("stream-length", f"{len(data) - pos} trailing bytes")
    return Container(kind, meta, records)


def save(container, path):
    data = dumps(container)
    with open(path, "wb") as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())


def file_sha256(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


__all__ = ["Container", "Record", "decode_record", "dumps", "load", "loads",
           "save", "pack_dense", "pack_vector", "pack_masks", "pack_ncsr_q", "unpack_masks"]
