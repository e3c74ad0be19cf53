import os
import threading

import numpy as np
import pytest

from claas import nn
from claas.errors import InvalidKey, NotFound, StorageError
from claas.registry import FsBlobStore, Registry, fs_store, validate_key
from claas.strategies import StrategyConfig, make_strategy, train_experience

REPLAY = StrategyConfig("replay", memory_size=50, epochs=1, batch_size=8)
CUMULATIVE = StrategyConfig("cumulative", epochs=1, batch_size=8)


@pytest.fixture
def registry(tmp_path):
    reg = Registry(fs_store(tmp_path / "store"))
    reg.create_experiment("exp", {"experiment_id": "exp"})
    return reg


def _state(cfg=REPLAY, seed=0):
    return make_strategy(cfg, nn.ModelSpec(6, (8,), 8, seed=seed))


def test_versions_are_sequential(registry):
    got = [registry.commit_version("exp", _state(), REPLAY, {"i": i}).version for i in range(3)]
    assert got == [1, 2, 3]


def test_weights_roundtrip(registry, small_scenario):
    state = make_strategy(REPLAY, small_scenario_spec(small_scenario))
    state, _ = train_experience(state, REPLAY, small_scenario.experiences[0])
    registry.commit_version("exp", state, REPLAY, {"acc": 1})
    record, blob = registry.get_version("exp", 1)
    assert blob == nn.serialize_params(state.params)
    assert nn.deserialize_params(blob).bitwise_equal(state.params)
    assert registry.load_metrics(record) == {"acc": 1}
    assert registry.load_state(record).params.bitwise_equal(state.params)


def small_scenario_spec(sc):
    f = sc.experiences[0].train.features.shape[1]
    classes = 1 + max(c for e in sc.experiences for c in e.class_set)
    return nn.ModelSpec(f, (8,), classes, seed=0)


def test_lookup_errors_and_latest(registry):
    assert registry.latest("exp") is None
    registry.commit_version("exp", _state(), REPLAY)
    record, _ = registry.get_version("exp", 1)
    assert record.version == 1
    with pytest.raises(NotFound):
        registry.get_version("exp", 99)
    with pytest.raises(NotFound):
        registry.commit_version("nope", _state(), REPLAY)
    registry.commit_version("exp", _state(), REPLAY)
    assert registry.latest("exp") == registry.get_version("exp", 2)[0]


def test_concurrent_commits_stay_gapless(registry):
    errors = []

    def worker():
        try:
            for _ in range(5):
                registry.commit_version("exp", _state(), REPLAY)
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert sorted(v.version for v in registry.list_versions("exp")) == list(range(1, 41))
    fresh = Registry(registry.store)
    assert [v.version for v in fresh.list_versions("exp")] == list(range(1, 41))


def test_lineage_follows_statefulness(tmp_path):
    reg = Registry(fs_store(tmp_path))
    reg.create_experiment("a", {})
    for _ in range(3):
        reg.commit_version("a", _state(), REPLAY)
        reg.commit_version("a", _state(CUMULATIVE), CUMULATIVE, run=1)
    assert [v.parent_version for v in reg.list_versions("a", run=0)] == [None, 1, 2]
    assert [v.parent_version for v in reg.list_versions("a", run=1)] == [None, None, None]


def test_durable_across_restart(tmp_path):
    reg = Registry(fs_store(tmp_path))
    reg.create_experiment("exp", {"k": 1})
    state = _state()
    reg.commit_version("exp", state, REPLAY, {"m": 2})
    reopened = Registry(FsBlobStore(tmp_path))
    record, blob = reopened.get_version("exp", 1)
    assert blob == nn.serialize_params(state.params)
    assert reopened.experiment_config("exp") == {"k": 1}
    assert reopened.list_experiments() == ["exp"]


def test_failed_commit_leaves_no_record(registry, monkeypatch):
    registry.commit_version("exp", _state(), REPLAY, {"ok": True})
    before = set(registry.store.list())
    real_put = registry.store.put

    def failing_put(key, data):
        if key.endswith("versions.jsonl"):
            raise StorageError("disk full")
        real_put(key, data)

    monkeypatch.setattr(registry.store, "put", failing_put)
    with pytest.raises(StorageError):
        registry.commit_version("exp", _state(), REPLAY, {"ok": False})
    monkeypatch.undo()
    assert set(registry.store.list()) == before
    assert [v.version for v in Registry(registry.store).list_versions("exp")] == [1]
    assert registry.commit_version("exp", _state(), REPLAY).version == 2


def test_duplicate_experiment(registry):
    from claas.errors import Conflict

    with pytest.raises(Conflict):
        registry.create_experiment("exp", {})


def test_blob_put_get_one_mib(tmp_path):
    store = fs_store(tmp_path)
    data = np.random.default_rng(0).bytes(1 << 20)
    store.put("blobs/big.bin", data)
    assert store.get("blobs/big.bin") == data
    assert store.exists("blobs/big.bin")
    store.delete("blobs/big.bin")
    assert not store.exists("blobs/big.bin")
    with pytest.raises(NotFound):
        store.get("blobs/big.bin")


@pytest.mark.parametrize("key", ["a/../b", "../x", "/abs", "a//b", "a\\b", "", "a/./b", "x/.tmp-1"])
def test_invalid_keys(tmp_path, key):
    with pytest.raises(KeyError):
        validate_key(key)
    with pytest.raises(InvalidKey):
        fs_store(tmp_path).put(key, b"x")


def test_crash_between_write_and_rename(tmp_path, monkeypatch):
    store = fs_store(tmp_path)
    store.put("k/old", b"previous contents")

    def crash(src, dst):
        raise OSError("simulated crash before rename")

    monkeypatch.setattr(os, "replace", crash)
    with pytest.raises(StorageError):
        store.put("k/new", b"abc")
    with pytest.raises(StorageError):
        store.put("k/old", b"x" * 10)
    monkeypatch.undo()
    assert not store.exists("k/new")
    assert store.get("k/old") == b"previous contents"
    leftovers = [p for p in tmp_path.rglob("*") if p.name.startswith(".tmp-")]
    assert leftovers == []


def test_unwritable_root(tmp_path):
    target = tmp_path / "file"
    target.write_text("not a directory")
    with pytest.raises(StorageError):
        fs_store(target / "sub")


def test_list_skips_temp_files(tmp_path):
    store = fs_store(tmp_path)
    store.put("a/b", b"1")
    (tmp_path / "a" / ".tmp-zzz").write_bytes(b"partial")
    assert store.list() == ["a/b"]
    assert store.list("a/") == ["a/b"]
