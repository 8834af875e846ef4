"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 divergence.

Metrics files are tab-separated with a header line and the fixed columns
``step frame level loss lr accuracy``. ``frame`` is ``dense``, ``sparse``
or ``eval``; ``level`` is the sparsity fraction (0 for dense frames);
``lr`` is ``-`` on eval rows and ``accuracy`` is ``-`` on training rows.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from fractions import Fraction

import numpy as np

from . import config as config_mod
from . import container as C
from . import datasets
from .exceptions import ConfigError, DivergenceError, FormatError, LevelError, NestedSparseError
from .kernels import KernelConfig, mac_count, spmm
from .nestedcsr import MAGIC as NCSR_MAGIC
from .nestedcsr import block_csr_footprint, deserialize
from .presets import build
from .runtime import SparseModel, encode_model, model_container
from .training import Mode, evaluate_full, level_weights, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
METRIC_COLUMNS = ("step", "frame", "level", "loss", "lr", "accuracy")


class UsageError(NestedSparseError):
    pass


def _out(msg=""):
    print(msg, flush=True)


def format_metric(rec):
    lr = "-" if rec["lr"] is None else f"{rec['lr']:.9g}"
    acc = "-" if rec["accuracy"] is None else f"{rec['accuracy']:.6f}"
    return f"{rec['step']}\t{rec['frame']}\t{rec['level']:.3f}\t{rec['loss']:.9g}\t{lr}\t{acc}"


def read_metrics(path):
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        rows = [dict(zip(header, line.rstrip("\n").split("\t"))) for line in f if line.strip()]
    return rows


# --- dataset -------------------------------------------------------------------

def cmd_dataset(kind, out_path, n=1000, seed=0, n_classes=None):
    if n <= 0:
        raise UsageError(f"sample count must be positive, got {n}")
    try:
        ds = datasets.make_dataset(kind, n, seed=seed, n_classes=n_classes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    datasets.save(ds, out_path)
    _out(f"wrote {out_path}: {len(ds)} samples, shape {ds.feature_shape}, "
         f"{ds.n_classes} classes, sha256 {ds.checksum()}")
    return {"path": out_path, "checksum": ds.checksum()}


# --- train ---------------------------------------------------------------------

def _split(ds, test_fraction):
    if test_fraction <= 0:
        return ds, ds
    return ds.split(test_fraction)


def level_table(net, masks, levels, X, y):
    """Per-level accuracy, per-sample MACs and single block-CSR bytes (f32 / u32)."""
    rows = []
    for i, s in enumerate(levels):
        acc, _, _ = evaluate_full(net, masks, i, X, y)
        macs, nbytes = 0, 0
        for k, (spec, w) in enumerate(zip(net.weighted_specs, level_weights(net, masks, i))):
            positions = spec.out_hw[0] * spec.out_hw[1] if spec.kind.value == "conv" else 1
            nnz = int(np.count_nonzero(w)) if spec.prunable else w.size
            macs += nnz * positions
            if spec.prunable and masks is not None:
                ms = masks[k]
                nbytes += block_csr_footprint(ms[i].nonzero_blocks, w.shape[0], *ms.block_shape).total
            else:
                nbytes += w.size * 4
        rows.append({"level": s, "accuracy": acc, "macs": macs, "bytes": nbytes})
    return rows


def cmd_train(config_path, model_out=None, metrics_out=None):
    run = config_mod.load(config_path)
    run.model_out = model_out or run.model_out
    run.metrics_out = metrics_out or run.metrics_out
    ds = datasets.load(run.data)
    train_ds, test_ds = _split(ds, run.test_fraction)
    cfg = run.train
    net = build(run.architecture, ds.feature_shape, ds.n_classes, seed=cfg.seed)
    with open(run.metrics_out, "w", encoding="utf-8") as mf:
        mf.write("\t".join(METRIC_COLUMNS) + "\n")
        model = train(
            net, train_ds.X, train_ds.y, cfg, eval_data=(test_ds.X, test_ds.y),
            on_record=lambda rec: mf.write(format_metric(rec) + "\n"))
    levels = [0.0] if cfg.mode is Mode.DENSE else list(cfg.levels.levels)
    meta = {"config": run.snapshot(), "seed": cfg.seed, "mode": cfg.mode.value,
            "levels": levels, "block": list(cfg.levels.block_shape),
            "test_fraction": run.test_fraction, "dataset_sha256": ds.checksum(),
            "n_classes": ds.n_classes, "feature_shape": list(ds.feature_shape),
            "final_accuracy": model.final_accuracy()}
    digest = C.save(model_container(model.net, model.masks, meta), run.model_out)
    manifest = {"config": run.snapshot(), "seed": cfg.seed, "model_sha256": digest,
                "levels": level_table(model.net, model.masks, levels, test_ds.X, test_ds.y)}
    with open(run.model_out + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    for row in manifest["levels"]:
        _out(f"level {row['level']:.2f}: accuracy {row['accuracy']:.4f}  "
             f"MACs/sample {row['macs']}  bytes {row['bytes']}")
    _out(f"model {run.model_out} (sha256 {digest[:16]}), metrics {run.metrics_out}")
    return {"model": run.model_out, "metrics": run.metrics_out, "sha256": digest,
            "final_accuracy": model.final_accuracy(), "manifest": manifest}


# --- encode --------------------------------------------------------------------

def cmd_encode(model_path, out_path, quantize=False, index_bytes=4):
    cont = C.load(model_path)
    encoded, rows = encode_model(cont, quantize=quantize, index_bytes=index_bytes)
    C.save(encoded, out_path)
    n = len(rows[0].per_level) if rows else 0
    head = f"{'layer':<10}{'values':>10}{'iidx':>8}{'jidx':>8}{'total':>10}" + "".join(
        f"{'L' + str(i + 1):>10}" for i in range(n))
    _out(head)
    for r in rows:
        _out(f"{r.layer:<10}{r.values:>10}{r.iidx:>8}{r.jidx:>8}{r.total:>10}"
             + "".join(f"{b:>10}" for b in r.per_level))
    tot = [sum(getattr(r, a) for r in rows) for a in ("values", "iidx", "jidx", "total")]
    per = [sum(r.per_level[i] for r in rows) for i in range(n)]
    _out(f"{'TOTAL':<10}{tot[0]:>10}{tot[1]:>8}{tot[2]:>8}{tot[3]:>10}"
         + "".join(f"{b:>10}" for b in per))
    _out("L<k> columns: bytes of a single block-CSR holding only level k")
    return {"rows": rows, "total": tot[3], "per_level": per}


# --- infer ---------------------------------------------------------------------

def _load_encoded(path):
    cont = C.load(path)
    if cont.kind == C.KIND_MODEL:
        cont, _ = encode_model(cont)
    return cont


def cmd_infer(ncsr_path, data_path, level, split="auto", tile_M=4):
    """`level` is 1-based: 1 is the least sparse configuration."""
    model = SparseModel(_load_encoded(ncsr_path), tile_M=tile_M)
    if not 1 <= level <= model.n_levels:
        raise LevelError(f"--sparsity-level {level} outside 1..{model.n_levels}")
    ds = datasets.load(data_path)
    tf = model.meta.get("test_fraction", 0)
    if split == "test" or (split == "auto" and tf > 0 and ds.checksum() == model.meta.get("dataset_sha256")):
        ds = _split(ds, tf)[1]
    logits, macs = model.run(ds.X, level - 1)
    acc = float(np.mean(logits.argmax(axis=1) == ds.y))
    s = model.meta.get("levels", [0.0])[level - 1]
    _out(f"level {level} (sparsity {s:.2f}): accuracy {acc:.6f} on {len(ds)} samples")
    for name, m in macs:
        _out(f"  {name:<10} MACs {m}")
    total = sum(m for _, m in macs)
    _out(f"  {'TOTAL':<10} MACs {total}")
    return {"accuracy": acc, "macs": macs, "total_macs": total, "logits": logits}


# --- bench ---------------------------------------------------------------------

def _sparse_layers(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] == NCSR_MAGIC:
        return [("matrix", deserialize(data))]
    cont = C.loads(data)
    if cont.kind == C.KIND_MODEL:
        cont, _ = encode_model(cont)
    out = []
    for rec in cont.records:
        if rec.type == C.NCSR:
            out.append((rec.name, C.decode_record(rec)))
    return out


def bench_matrix(A, repeats=7, cols=64, tile_M=4, seed=0):
    """Median spmm time per level, normalized to level 0, with MAC ratios."""
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((A.cols, cols)).astype(np.float32)
    ident = (id(A), A.nz_values.ctypes.data, A.nz_jidx.ctypes.data, A.nz_iidx.ctypes.data)
    spmm(A, B, KernelConfig(tile_M, 0))  # warm-up
    medians = []
    for level in range(A.n_levels):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            spmm(A, B, KernelConfig(tile_M, level))
            times.append(time.perf_counter() - t0)
        medians.append(statistics.median(times))
    assert ident == (id(A), A.nz_values.ctypes.data, A.nz_jidx.ctypes.data, A.nz_iidx.ctypes.data)
    base_macs = mac_count(A, 0, cols)
    rows = []
    for level, med in enumerate(medians):
        ratio = Fraction(mac_count(A, level, cols), base_macs) if base_macs else Fraction(0)
        rows.append({"level": level + 1, "sparsity": A.levels[level], "median_s": med,
                     "normalized": med / medians[0], "mac_ratio": ratio,
                     "realized_sparsity": A.realized_sparsity(level)})
    return rows


def cmd_bench(path, repeats=7, cols=64, tile_M=4, threads=None):
    if repeats < 1:
        raise UsageError("--repeats must be >= 1")
    from threadpoolctl import threadpool_limits

    results = {}
    with threadpool_limits(limits=threads or 1):
        for name, A in _sparse_layers(path):
            rows = bench_matrix(A, repeats, cols, tile_M)
            results[name] = rows
            _out(f"{name} {A.rows}x{A.cols} block {A.block_m}x{A.block_n}")
            _out(f"  {'level':>5} {'sparsity':>9} {'median[s]':>11} {'norm time':>10} {'MAC ratio':>10}")
            for r in rows:
                _out(f"  {r['level']:>5} {r['sparsity']:>9.3f} {r['median_s']:>11.6f} "
                     f"{r['normalized']:>10.3f} {float(r['mac_ratio']):>10.4f}")
    return results


# --- inspect -------------------------------------------------------------------

def _inspect_ncsr(data, indent=""):
    try:
        A = deserialize(data)
    except FormatError as exc:
        kind = getattr(exc, "invariant", type(exc).__name__)
        _out(f"{indent}FAIL {kind}: {exc}")
        return False
    _out(f"{indent}NestedCSR {A.rows}x{A.cols} block {A.block_m}x{A.block_n} dtype {A.dtype} "
         f"levels {list(A.levels)}")
    _out(f"{indent}bands (sparsest first): {A.band_block_counts()} blocks")
    for i in range(A.n_levels):
        _out(f"{indent}  level {i + 1}: {A.nonzero_blocks(i)} blocks, "
             f"realized sparsity {A.realized_sparsity(i):.4f}")
    _out(f"{indent}PASS all invariants")
    return True


def cmd_inspect(path):
    """Print a description of `path`; returns True iff every check passed."""
    with open(path, "rb") as f:
        data = f.read()
    magic = data[:4]
    if magic == NCSR_MAGIC:
        return _inspect_ncsr(data)
    if magic == datasets.MAGIC:
        try:
            ds = datasets.loads(data)
        except FormatError as exc:
            _out(f"FAIL dataset: {exc}")
            return False
        _out(f"dataset: {len(ds)} samples, shape {ds.feature_shape}, {ds.n_classes} classes, "
             f"sha256 {ds.checksum()}")
        return True
    try:
        cont = C.loads(data)
    except FormatError as exc:
        _out(f"FAIL {getattr(exc, 'invariant', type(exc).__name__)}: {exc}")
        return False
    kind = {C.KIND_MODEL: "trained model", C.KIND_ENCODED: "encoded model"}.get(cont.kind, "unknown")
    _out(f"container: {kind}, {len(cont.records)} records, mode {cont.meta.get('mode')}, "
         f"levels {cont.meta.get('levels')}")
    ok = cont.kind in (C.KIND_MODEL, C.KIND_ENCODED)
    for rec in cont.records:
        label = C.RECORD_NAMES.get(rec.type, f"type {rec.type}")
        _out(f"- {rec.name}: {label}, {len(rec.payload)} bytes")
        try:
            if rec.type in (C.NCSR, C.NCSR_Q):
                payload = rec.payload if rec.type == C.NCSR else rec.payload[1:]
                if rec.type == C.NCSR_Q:
                    _out(f"    scale exponent {int(np.frombuffer(rec.payload[:1], np.int8)[0])}")
                ok &= _inspect_ncsr(payload, indent="    ")
                continue
            value = C.decode_record(rec)
            if rec.type == C.DENSE_F32:
                _out(f"    dense, not encoded: {value.shape[0]}x{value.shape[1]}")
            elif rec.type == C.VECTOR_F32:
                _out(f"    vector of {value.size}")
            elif rec.type == C.MASKS:
                _out(f"    {len(value)} nested masks, realized sparsity "
                     f"{[round(m.sparsity, 4) for m in value]}; PASS nesting")
        except (FormatError, ValueError) as exc:
            _out(f"    FAIL {getattr(exc, 'invariant', type(exc).__name__)}: {exc}")
            ok = False
    _out("all checks passed" if ok else "some checks FAILED")
    return ok


# --- entry point ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def make_parser():
    p = _Parser(prog="nestedsparse", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", help="generate a toy dataset file")
    d.add_argument("kind", choices=datasets.KINDS)
    d.add_argument("out")
    d.add_argument("--n", type=int, default=1000, help="sample count")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--classes", type=int, default=None)

    t = sub.add_parser("train", help="train from a key=value config file",
                       description=f"Keys: {', '.join(config_mod.KEYS)}. " + __doc__.split("\n\n")[2],
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("config")
    t.add_argument("--model", default=None, help="model output (default <config>.model)")
    t.add_argument("--metrics", default=None, help="metrics output (default <config>.metrics.tsv)")

    e = sub.add_parser("encode", help="encode a trained model as NestedCSR")
    e.add_argument("model")
    e.add_argument("out")
    e.add_argument("--quantize", action="store_true", help="int8 weights, power-of-two scale")
    e.add_argument("--index-bytes", type=int, default=4, help="index width for the footprint table")

    i = sub.add_parser("infer", help="run the sparse kernels at one sparsity level")
    i.add_argument("ncsr")
    i.add_argument("data")
    i.add_argument("--sparsity-level", type=int, default=1, help="1 = least sparse")
    i.add_argument("--split", choices=("auto", "test", "all"), default="auto")
    i.add_argument("--tile", type=int, default=4)

    b = sub.add_parser("bench", help="time spmm at every level")
    b.add_argument("ncsr")
    b.add_argument("--repeats", type=int, default=7)
    b.add_argument("--cols", type=int, default=64, help="dense operand columns")
    b.add_argument("--tile", type=int, default=4)
    b.add_argument("--threads", type=int, default=None)

    n = sub.add_parser("inspect", help="dump headers and check invariants")
    n.add_argument("path")
    return p


def main(argv=None):
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        if args.command == "dataset":
            cmd_dataset(args.kind, args.out, args.n, args.seed, args.classes)
        elif args.command == "train":
            cmd_train(args.config, args.model, args.metrics)
        elif args.command == "encode":
            cmd_encode(args.model, args.out, args.quantize, args.index_bytes)
        elif args.command == "infer":
            cmd_infer(args.ncsr, args.data, args.sparsity_level, args.split, args.tile)
        elif args.command == "bench":
            cmd_bench(args.ncsr, args.repeats, args.cols, args.tile, args.threads)
        elif args.command == "inspect":
            return EXIT_OK if cmd_inspect(args.path) else EXIT_DATA
    except (UsageError, LevelError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FormatError, NestedSparseError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
