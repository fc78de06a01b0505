import json
import threading

import numpy as np
import pytest

from multipath.data import SyntheticFamily, TaskSpec
from multipath.hparams import Hyperparams
from multipath.multipath import new_model, publish, published_model
from multipath.nn import init_dense
from multipath.store import (CheckpointError, DanglingReferenceError, DuplicateIdError, HashMismatchError,
                             ModuleDef, PathSpec, RepresentationCache, ShapeIncompatibleError, StoreError,
                             SystemStore, TruncatedBlobError, VersionError, decode_tensors, encode_tensors,
                             export_graph, load_checkpoint, path_forward, save_checkpoint)
from multipath.trainer import evaluate


def small_store():
    s = SystemStore()
    s.add_task(TaskSpec("a", 2, 4, seed=0, family=SyntheticFamily(("disc", "square"), ("solid",)),
                        split_sizes={"train": 8, "validation": 4, "test": 4}))
    return s


def mods(rng, prefix="m", dims=(48, 5, 2)):
    out = [ModuleDef(f"{prefix}/d{i}", "dense", init_dense(rng, a, b), "relu")
           for i, (a, b) in enumerate(zip(dims[:-2], dims[1:-1]))]
    out.append(ModuleDef(f"{prefix}/head", "head", init_dense(rng, dims[-2], dims[-1])))
    return out


def test_publish_freezes_and_validates():
    s, rng = small_store(), np.random.default_rng(0)
    ms = mods(rng)
    s.publish_path(PathSpec("p", "a", [m.module_id for m in ms], 4, 3), ms)
    stored = s.modules["m/head"]
    assert stored.frozen
    with pytest.raises(ValueError):
        stored.params["w"][0, 0] = 1.0
    # the caller's arrays are not aliased
    ms[-1].params["w"][0, 0] += 1.0
    assert stored.params["w"][0, 0] != ms[-1].params["w"][0, 0]
    with pytest.raises(DuplicateIdError):
        s.publish_path(PathSpec("p", "a", ["m/d0", "m/head"], 4, 3))
    with pytest.raises(DanglingReferenceError):
        s.publish_path(PathSpec("q", "a", ["m/d0", "nope"], 4, 3))
    with pytest.raises(DanglingReferenceError):
        s.publish_path(PathSpec("q", "zz", ["m/d0", "m/head"], 4, 3))
    with pytest.raises(ShapeIncompatibleError):
        s.publish_path(PathSpec("q", "a", ["m/d0", "m/head"], 8, 3))
    with pytest.raises(ShapeIncompatibleError):
        s.publish_path(PathSpec("q", "a", ["m/d0"], 4, 3))
    with pytest.raises(DuplicateIdError):
        s.publish_path(PathSpec("q", "a", ["m/d0", "m/head"], 4, 3), [mods(rng)[0]])
    # reusing published modules is allowed and shares them
    s.publish_path(PathSpec("q", "a", ["m/d0", "m/head"], 4, 3))
    assert s.path_modules("q")[0] is s.path_modules("p")[0]


def test_head_width_must_match_classes():
    s = small_store()
    ms = mods(np.random.default_rng(0), dims=(48, 5, 3))
    with pytest.raises(ShapeIncompatibleError, match="num_classes"):
        s.publish_path(PathSpec("p", "a", [m.module_id for m in ms], 4, 3), ms)


def test_duplicate_task_and_unknown_kind():
    s = small_store()
    with pytest.raises(DuplicateIdError):
        s.add_task(s.tasks["a"])
    with pytest.raises(ValueError):
        ModuleDef("x", "bogus", {})
    with pytest.raises(StoreError):
        s.task_data("zz")


def test_conv_modules_cannot_join_a_path():
    s = small_store()
    conv = ModuleDef("c", "conv", init_dense(np.random.default_rng(0), 48, 2))
    with pytest.raises(StoreError, match="conv"):
        s.publish_path(PathSpec("p", "a", ["c"], 4, 3), [conv])


def test_cache_hits_and_values(tiny_store):
    cache = RepresentationCache(tiny_store)
    direct = path_forward(tiny_store, "aux.path", tiny_store.task_data("tgt").images["validation"][:5])
    got = cache.get_batch("aux.path", "validation", [0, 1, 2, 3, 4], "tgt")
    assert np.array_equal(got, direct)
    assert cache.misses == 5 and cache.hits == 0
    cache.get_batch("aux.path", "validation", [4, 3], "tgt")
    assert cache.hits == 2 and cache.hit_rate == pytest.approx(2 / 7)
    np.testing.assert_array_equal(cache.get_or_compute("aux.path", "validation", 3, "tgt"), direct[3])
    with pytest.raises(StoreError):
        cache.get_batch("nope", "validation", [0])


def test_cache_is_safe_under_threads(tiny_store):
    cache = RepresentationCache(tiny_store)
    want = path_forward(tiny_store, "base.path", tiny_store.task_data("tgt").images["train"])
    rng = np.random.default_rng(0)
    batches = [rng.choice(256, 40, replace=False) for _ in range(16)]
    errors = []

    def work(idx):
        try:
            assert np.array_equal(cache.get_batch("base.path", "train", idx, "tgt"), want[idx])
        except AssertionError as exc:
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(b,)) for b in batches]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


def test_blob_round_trip_and_corruption():
    t = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([1.5, -2.0]), "s": np.array(3.0)}
    buf = encode_tensors(t)
    back = decode_tensors(buf)
    for k in t:
        assert back[k].dtype == np.float64 and np.array_equal(back[k], t[k])
    with pytest.raises(TruncatedBlobError):
        decode_tensors(buf[:-5])
    with pytest.raises(CheckpointError):
        decode_tensors(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_tensors(buf + b"\0")
    with pytest.raises(VersionError):
        decode_tensors(buf[:4] + (99).to_bytes(4, "little") + buf[8:])


def test_checkpoint_round_trip(tiny_store, tmp_path):
    m = new_model(tiny_store, "mp1", "tgt", "tgt.path", ["aux.path"], Hyperparams())
    m.connectors[0]["w"] += 0.25
    m.score = 0.5
    publish(tiny_store, m)
    save_checkpoint(tiny_store, tmp_path / "ck", extra={"note": 1})
    back = load_checkpoint(tmp_path / "ck")
    assert back.tasks == tiny_store.tasks and back.paths == tiny_store.paths
    assert back.path_scores == tiny_store.path_scores
    for mid, mod in tiny_store.modules.items():
        for k, v in mod.params.items():
            assert np.array_equal(back.modules[mid].params[k], v)
        assert back.modules[mid].frozen
    again = published_model(back, "mp1")
    assert np.array_equal(again.connectors[0]["w"], m.connectors[0]["w"])
    assert evaluate(again, RepresentationCache(back), "test") == evaluate(m, RepresentationCache(tiny_store), "test")


def test_checkpoint_detects_tampering(tiny_store, tmp_path):
    d = save_checkpoint(tiny_store, tmp_path / "ck")
    manifest = json.loads((d / "manifest.json").read_text())
    blob = d / manifest["modules"][0]["blob"]["file"]
    data = bytearray(blob.read_bytes())
    data[-1] ^= 1
    blob.write_bytes(bytes(data))
    with pytest.raises(HashMismatchError):
        load_checkpoint(d)
    manifest["format_version"] = 99
    (d / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(VersionError):
        load_checkpoint(d)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


def test_store_copy_is_independent(tiny_store):
    c = tiny_store.copy()
    m = new_model(c, "mp1", "tgt", "tgt.path", ["aux.path"])
    publish(c, m)
    assert "mp1" in c.models and "mp1" not in tiny_store.models
    assert "mp1/router" not in tiny_store.modules


def test_dot_export(tiny_store):
    m = new_model(tiny_store, "mp1", "tgt", "tgt.path", ["aux.path", "base.path"])
    publish(tiny_store, m)
    dot = export_graph(tiny_store)
    assert dot.startswith("digraph system {") and dot.rstrip().endswith("}")
    assert '"mp1/connector0"' in dot and '"mp1/router"' in dot and "penwidth=2.5" in dot
    pydot = pytest.importorskip("pydot")
    (graph,) = pydot.graph_from_dot_data(dot)
    names = {n.get_name().strip('"') for n in graph.get_nodes()}
    assert {"mp1/connector0", "mp1/connector1", "mp1/router", "trunk/dense0"} <= names
    edges = {(e.get_source().strip('"'), e.get_destination().strip('"')) for e in graph.get_edges()}
    assert ("tgt/head", "multipath:mp1") in edges
