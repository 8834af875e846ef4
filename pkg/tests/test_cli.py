import hashlib
import json
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from nestedsparse import cli
from nestedsparse import container as C
from nestedsparse import datasets
from nestedsparse.nestedcsr import decode, encode, footprint, serialize
from nestedsparse.presets import build
from nestedsparse.pruning import SparsityLevelSet, get_nested_masks
from nestedsparse.runtime import load_model, model_container
from nestedsparse.training import evaluate


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def write_config(path, **keys):
    path.write_text("".join(f"{k} = {v}\n" for k, v in keys.items()))
    return path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["dataset", "spiral-images", str(d / "data.nsds"), "--n", "400", "--seed", "1"]) == 0
    write_config(d / "run.cfg", data="data.nsds", steps=150, eval_interval=50, test_fraction=0.25)
    assert cli.main(["train", str(d / "run.cfg")]) == 0
    assert cli.main(["encode", str(d / "run.model"), str(d / "run.enc")]) == 0
    return d


def test_dataset_command(tmp_path, capsys):
    out = tmp_path / "b.nsds"
    assert cli.main(["dataset", "blobs", str(out), "--n", "1000"]) == 0
    assert capsys.readouterr().out.strip().endswith(datasets.load(out).checksum())
    assert cli.main(["dataset", "blobs", str(out), "--n", "0"]) == 1
    assert cli.main(["dataset", "blobs", str(tmp_path / "missing" / "x.nsds")]) == 2
    assert cli.main(["dataset", "nope", str(out)]) == 1
    assert cli.main([]) == 1


def test_dense_smoke_run_is_fast(tmp_path, workdir):
    cfg = write_config(tmp_path / "dense.cfg", data=workdir / "data.nsds", steps=50, mode="dense")
    t0 = time.perf_counter()
    assert cli.main(["train", str(cfg)]) == 0
    assert time.perf_counter() - t0 < 10
    rows = cli.read_metrics(tmp_path / "dense.metrics.tsv")
    assert {r["frame"] for r in rows} == {"dense", "eval"}


def test_metrics_schema_and_eval_rows(workdir):
    header = open(workdir / "run.metrics.tsv").readline().strip().split("\t")
    assert header == list(cli.METRIC_COLUMNS)
    rows = cli.read_metrics(workdir / "run.metrics.tsv")
    evals = [r for r in rows if r["frame"] == "eval"]
    assert [(r["step"], r["level"]) for r in evals] == [
        (str(s), lv) for s in (50, 100, 150) for lv in ("0.700", "0.800", "0.900")]
    assert all(r["lr"] == "-" for r in evals)
    assert all(r["accuracy"] == "-" for r in rows if r["frame"] != "eval")
    # 15 warmup steps carry only dense frames, later steps carry three sparse frames each
    assert sum(r["frame"] == "sparse" for r in rows) == 3 * (150 - 15)


def test_seeded_rerun_is_bit_identical(tmp_path, workdir):
    m1, t1 = tmp_path / "a.model", tmp_path / "a.tsv"
    m2, t2 = tmp_path / "b.model", tmp_path / "b.tsv"
    for m, t in ((m1, t1), (m2, t2)):
        assert cli.main(["train", str(workdir / "run.cfg"), "--model", str(m), "--metrics", str(t)]) == 0
    assert sha(t1) == sha(t2) == sha(workdir / "run.metrics.tsv")
    assert sha(m1) == sha(m2) == sha(workdir / "run.model")


def test_manifest(workdir):
    man = json.load(open(str(workdir / "run.model") + ".manifest.json"))
    assert man["model_sha256"] == sha(workdir / "run.model")
    assert man["seed"] == 0 and man["config"]["steps"] == 150
    macs = [r["macs"] for r in man["levels"]]
    assert macs == sorted(macs, reverse=True) and len(set(macs)) == 3


def test_encode_table_matches_footprint(workdir):
    res = cli.cmd_encode(str(workdir / "run.model"), str(workdir / "again.enc"))
    enc = C.load(workdir / "run.enc")
    total = 0
    for row in res["rows"]:
        total += footprint(C.decode_record(enc.record(f"{row.layer}.weight"))).total
    assert res["total"] == total
    q = cli.cmd_encode(str(workdir / "run.model"), str(workdir / "run.qenc"), quantize=True)
    for a, b in zip(res["rows"], q["rows"]):
        assert a.values == 4 * b.values
        assert (a.iidx, a.jidx) == (b.iidx, b.jidx)


def test_pipeline_closure(workdir):
    rows = cli.read_metrics(workdir / "run.metrics.tsv")
    final = {r["level"]: float(r["accuracy"]) for r in rows if r["frame"] == "eval" and r["step"] == "150"}
    net, masks = load_model(C.load(workdir / "run.model"))
    ds = datasets.load(workdir / "data.nsds")
    _, test = ds.split(0.25)
    macs = []
    for k, level in enumerate(("0.700", "0.800", "0.900"), start=1):
        res = cli.cmd_infer(str(workdir / "run.enc"), str(workdir / "data.nsds"), k)
        assert round(res["accuracy"], 6) == final[level]
        assert res["accuracy"] == evaluate(net, masks, k - 1, test.X, test.y)
        macs.append(res["total_macs"])
    assert macs[0] > macs[1] > macs[2]


def test_quantized_inference_runs(workdir):
    res = cli.cmd_infer(str(workdir / "run.qenc"), str(workdir / "data.nsds"), 1)
    f32 = cli.cmd_infer(str(workdir / "run.enc"), str(workdir / "data.nsds"), 1)
    assert abs(res["accuracy"] - f32["accuracy"]) <= 0.1


def test_infer_errors(workdir):
    assert cli.main(["infer", str(workdir / "nope.enc"), str(workdir / "data.nsds")]) == 2
    assert cli.main(["infer", str(workdir / "run.enc"), str(workdir / "data.nsds"),
                     "--sparsity-level", "4"]) == 1
    other = workdir / "blobs.nsds"
    datasets.save(datasets.make_dataset("blobs", 50), other)
    assert cli.main(["infer", str(workdir / "run.enc"), str(other)]) == 2


def test_bench(workdir, capsys):
    res = cli.cmd_bench(str(workdir / "run.enc"), repeats=3)
    for rows in res.values():
        assert rows[0]["normalized"] == 1.0
        assert [r["level"] for r in rows] == [1, 2, 3]
    assert cli.main(["bench", str(workdir / "run.enc"), "--repeats", "0"]) == 1


def test_inspect_valid_and_dense(workdir, capsys):
    before = sha(workdir / "run.enc")
    assert cli.main(["inspect", str(workdir / "run.enc")]) == 0
    out = capsys.readouterr().out
    assert "conv1.weight: dense" in out and "dense, not encoded" in out
    assert "PASS all invariants" in out
    assert sha(workdir / "run.enc") == before
    assert cli.main(["inspect", str(workdir / "run.model")]) == 0
    assert cli.main(["inspect", str(workdir / "data.nsds")]) == 0


def test_inspect_names_corrupted_iidx(tmp_path, capsys):
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 8)).astype(np.float32)
    blob = bytearray(serialize(encode(w, get_nested_masks(w, SparsityLevelSet((0.25, 0.5))))))
    iidx_at = 17 + 2 * 2 + 1
    counts = np.frombuffer(bytes(blob[iidx_at:iidx_at + 16]), "<u4").copy()
    counts[0], counts[1] = counts[0] + counts[1] + counts[2], 0  # same total, row 0 over capacity
    counts[2] = 0
    blob[iidx_at:iidx_at + 16] = counts.astype("<u4").tobytes()
    path = tmp_path / "bad.ncsr"
    path.write_bytes(bytes(blob))
    assert cli.main(["inspect", str(path)]) == 2
    assert "FAIL iidx-capacity" in capsys.readouterr().out
    assert path.read_bytes() == bytes(blob)


def test_divergence_exit_code(tmp_path, workdir):
    cfg = write_config(tmp_path / "boom.cfg", data=workdir / "data.nsds", steps=40, lr=1e9, mode="dense")
    assert cli.main(["train", str(cfg)]) == 3


def test_config_error_exit_code(tmp_path):
    cfg = write_config(tmp_path / "bad.cfg", data="x.nsds", colour="red")
    assert cli.main(["train", str(cfg)]) == 2


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_inspect_accepts_every_encoded_model(tmp_path, seed, quantize):
    rng = np.random.default_rng(seed)
    hidden = ",".join(str(2 * int(rng.integers(1, 5))) for _ in range(int(rng.integers(1, 3))))
    net = build(f"mlp:{hidden}", (2 * int(rng.integers(1, 4)),), int(rng.integers(2, 4)), seed=seed)
    for w in net.weights:
        w[:] = rng.normal(size=w.shape)
    levels = SparsityLevelSet(tuple(sorted(rng.choice([0.2, 0.4, 0.5, 0.6, 0.8], int(rng.integers(1, 4)),
                                                      replace=False))))
    masks = [get_nested_masks(w, levels) if p else None for w, p in zip(net.weights, net.prunable)]
    C.save(model_container(net, masks, {"levels": list(levels.levels)}), tmp_path / "m.model")
    cli.cmd_encode(str(tmp_path / "m.model"), str(tmp_path / "m.enc"), quantize=quantize)
    assert cli.cmd_inspect(str(tmp_path / "m.enc"))
    enc = C.load(tmp_path / "m.enc")
    for k, ms in enumerate(masks):
        if ms is None or quantize:
            continue
        mat = C.decode_record(enc.record(f"{net.layer_name(k)}.weight"))
        assert np.array_equal(decode(mat, 0), net.weights[k] * ms[0].bits)
