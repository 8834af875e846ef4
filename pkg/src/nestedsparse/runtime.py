"""Conversions between trained models, containers, and the sparse runtime."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container as C
from .exceptions import DimensionError, InvariantError, LevelError
from .kernels import (
    KernelConfig,
    conv_sparse,
    conv_sparse_q,
    mac_count,
    quantize_layer,
    quantize_tensor,
    spmm,
    spmm_q,
)
from .netcore import LayerKind, LayerSpec, ToyNetwork, conv_forward
from .nestedcsr import block_csr_footprint, encode, footprint, serialize


def _weight_names(net):
    return [net.layer_name(k) for k in range(len(net.weights))]


def model_container(net, masks, meta):
    """Container (kind model) holding dense theta, biases and nested masks."""
    meta = dict(meta, layers=[s.to_dict() for s in net.layers])
    records = []
    for k, name in enumerate(_weight_names(net)):
        records.append(C.Record(f"{name}.weight", C.DENSE_F32, C.pack_dense(net.weights[k])))
        if net.biases[k] is not None:
            records.append(C.Record(f"{name}.bias", C.VECTOR_F32, C.pack_vector(net.biases[k])))
        if masks is not None and masks[k] is not None:
            records.append(C.Record(f"{name}.masks", C.MASKS, C.pack_masks(masks[k])))
    return C.Container(C.KIND_MODEL, meta, records)


def layers_from_meta(meta):
    try:
        return [LayerSpec.from_dict(d) for d in meta["layers"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvariantError("metadata-layers", str(exc)) from None


def load_model(cont):
    """(net, masks) from a model container; masks is None for dense models."""
    if cont.kind != C.KIND_MODEL:
        raise InvariantError("container-kind", "expected a trained model container")
    layers = layers_from_meta(cont.meta)
    probe = ToyNetwork(layers)
    names = _weight_names(probe)
    weights, biases, masks = [], [], []
    for k, name in enumerate(names):
        weights.append(C.decode_record(cont.record(f"{name}.weight")))
        biases.append(C.decode_record(cont.record(f"{name}.bias"))
                      if f"{name}.bias" in cont.names() else None)
        masks.append(C.decode_record(cont.record(f"{name}.masks"))
                     if f"{name}.masks" in cont.names() else None)
        if masks[-1] is not None and masks[-1].shape != weights[-1].shape:
            raise DimensionError("mask/weight shape mismatch", layer=name)
    net = ToyNetwork(layers, weights=weights, biases=biases)
    return net, (masks if any(m is not None for m in masks) else None)


@dataclass
class FootprintRow:
    layer: str
    values: int
    iidx: int
    jidx: int
    total: int
    per_level: list  # bytes of a single block-CSR holding only that level


def encode_model(cont, quantize=False, index_bytes=4):
    """Encode every masked layer of a model container as NestedCSR.

    Returns ``(encoded_container, footprint_rows)``.
    """
    net, masks = load_model(cont)
    if masks is None:
        raise InvariantError("no-masks", "model has no nested masks to encode")
    records, rows = [], []
    for k, name in enumerate(_weight_names(net)):
        w, ms = net.weights[k], masks[k]
        if ms is None:
            records.append(C.Record(f"{name}.weight", C.DENSE_F32, C.pack_dense(w)))
        elif quantize:
            ql = quantize_layer(w, ms)
            records.append(C.Record(f"{name}.weight", C.NCSR_Q,
                                    C.pack_ncsr_q(ql.payload, ql.scale_exponent)))
            mat = ql.payload
        else:
            mat = encode(w, ms)
            records.append(C.Record(f"{name}.weight", C.NCSR, serialize(mat)))
        if net.biases[k] is not None:
            records.append(C.Record(f"{name}.bias", C.VECTOR_F32, C.pack_vector(net.biases[k])))
        if ms is not None:
            fp = footprint(mat, index_bytes=index_bytes)
            per_level = [block_csr_footprint(mat.nonzero_blocks(i), mat.rows, mat.block_m,
                                             mat.block_n, mat.dtype.itemsize, index_bytes).total
                         for i in range(mat.n_levels)]
            rows.append(FootprintRow(name, *fp, per_level))
    meta = dict(cont.meta, quantized=bool(quantize))
    return C.Container(C.KIND_ENCODED, meta, records), rows


class SparseModel:
    """Runs an encoded container with the sparse kernels at a chosen level."""

    def __init__(self, cont, tile_M=4):
        if cont.kind != C.KIND_ENCODED:
            raise InvariantError("container-kind", "expected an encoded container")
        self.meta = cont.meta
        self.layers = layers_from_meta(cont.meta)
        self.tile_M = tile_M
        self.params = []  # per weighted layer: (name, weight, exponent, bias)
        n_levels = None
        for i, spec in enumerate(self.layers):
            if not spec.weighted:
                continue
            name = spec.name or f"layer{i}"
            rec = cont.record(f"{name}.weight")
            value = C.decode_record(rec)
            exp = None
            if rec.type == C.NCSR_Q:
                value, exp = value
            if rec.type in (C.NCSR, C.NCSR_Q):
                if value.shape != spec.weight_shape:
                    raise DimensionError("encoded weight shape mismatch", layer=name)
                if n_levels is not None and value.n_levels != n_levels:
                    raise InvariantError("level-count", f"{name} has {value.n_levels} levels")
                n_levels = value.n_levels
            elif value.shape != spec.weight_shape:
                raise DimensionError("dense weight shape mismatch", layer=name)
            bias = (C.decode_record(cont.record(f"{name}.bias"))
                    if f"{name}.bias" in cont.names() else None)
            self.params.append((name, value, exp, bias))
        self.n_levels = n_levels or 1
        self.input_size = ToyNetwork(self.layers).input_size  # also validates shape chaining

    def check_level(self, level):
        if not 0 <= level < self.n_levels:
            raise LevelError(f"level {level} out of range for {self.n_levels} levels")
        return level

    def run(self, X, level=0):
        """Logits and a per-layer MAC report for level `level` (0 = least sparse)."""
        self.check_level(level)
        x = np.ascontiguousarray(X, dtype=np.float32)
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise DimensionError(f"data has shape {x.shape}, model expects {self.input_size} features")
        macs = []
        k = 0
        for spec in self.layers:
            if spec.kind is LayerKind.RELU:
                x = np.maximum(x, 0)
                continue
            if not spec.weighted:
                continue
            name, w, exp, bias = self.params[k]
            k += 1
            n = x.shape[0]
            positions = n * (spec.out_hw[0] * spec.out_hw[1] if spec.kind is LayerKind.CONV else 1)
            if isinstance(w, np.ndarray):
                if spec.kind is LayerKind.CONV:
                    x, _ = conv_forward(spec, x, w, bias)
                else:
                    x = x @ w.T
                    if bias is not None:
                        x = x + bias
                macs.append((name, w.size * positions))
                continue
            macs.append((name, mac_count(w, level, positions)))
            if exp is None:
                if spec.kind is LayerKind.CONV:
                    x = conv_sparse(spec, w, x, level, bias, self.tile_M)
                else:
                    x = spmm(w, x.T, KernelConfig(self.tile_M, level)).T
                    if bias is not None:
                        x = x + bias
            else:
                x_q, in_exp = quantize_tensor(x)
                if spec.kind is LayerKind.CONV:
                    acc = conv_sparse_q(spec, w, x_q, level, self.tile_M)
                else:
                    acc = spmm_q(w, np.ascontiguousarray(x_q.T), KernelConfig(self.tile_M, level)).T
                x = np.ldexp(acc.astype(np.float64), exp + in_exp).astype(np.float32)
                if bias is not None:
                    x = (x.reshape(n, -1, bias.size) + bias).reshape(n, -1)
            x = np.ascontiguousarray(x)
        return x, macs
