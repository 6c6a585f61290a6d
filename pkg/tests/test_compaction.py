import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmlsm.cluster import Cluster, ClusterConfig
from dmlsm.compaction import (
    CompactionConfig, build_outputs, merge_for_compaction, pick_compactions, shard_aligned,
)
from dmlsm.ds_storage import FileMeta, SstReader
from dmlsm.encoding import KvTuple
from dmlsm.engine import EngineConfig
from dmlsm.manifest import Version
from dmlsm.memtable import shard_of
from dmlsm.workload import WorkloadSpec, operations


def _meta(num, level, lo, hi, shard=None, size=100):
    return FileMeta(num, level, lo, hi, 1, num, size, 1, shard)


def _version(*files):
    return Version({f.name: f for f in files})


def test_shard_aligned_l0_splits_into_parallel_tasks():
    l0 = [_meta(i + 1, 0, bytes([s << 6, 0]), bytes([s << 6 | 0x3F, 0xFF]), s) for i, s in enumerate(range(4))]
    tasks = pick_compactions(_version(*l0), CompactionConfig(l0_trigger=4, shard_bits=2))
    assert len(tasks) == 4
    assert sorted(t.shard_id for t in tasks) == [0, 1, 2, 3]
    names = [f.name for t in tasks for f in t.all_inputs]
    assert len(names) == len(set(names))


def test_unsharded_l0_is_one_serial_task():
    l0 = [_meta(i + 1, 0, b"\x00", b"\xff") for i in range(4)]
    l1 = [_meta(10, 1, b"\x10", b"\x20"), _meta(11, 1, b"\x30", b"\x40")]
    tasks = pick_compactions(_version(*l0, *l1), CompactionConfig(l0_trigger=4, shard_bits=0))
    assert len(tasks) == 1
    assert len(tasks[0].inputs) == 4 and len(tasks[0].overlaps) == 2 and tasks[0].shard_id is None


def test_below_trigger_and_busy_inputs():
    l0 = [_meta(i + 1, 0, b"a", b"b") for i in range(3)]
    assert pick_compactions(_version(*l0), CompactionConfig(l0_trigger=4)) == []
    l0.append(_meta(4, 0, b"a", b"b"))
    assert pick_compactions(_version(*l0), CompactionConfig(l0_trigger=4), busy={l0[0].name}) == []


def test_deeper_level_over_target():
    l1 = [_meta(1, 1, b"a", b"c", size=600), _meta(2, 1, b"d", b"f", size=600)]
    l2 = [_meta(3, 2, b"b", b"e")]
    tasks = pick_compactions(_version(*l1, *l2), CompactionConfig(l0_trigger=4, l1_target_bytes=1000))
    assert len(tasks) == 1 and tasks[0].level == 1 and tasks[0].overlaps == (l2[0],)


def test_shard_aligned_detection():
    assert not shard_aligned([_meta(1, 0, b"\x00", b"\x3f", 0)], 0)
    assert shard_aligned([_meta(1, 0, b"\x00", b"\x3f", 0)], 2)
    assert not shard_aligned([_meta(1, 0, b"\x00", b"\x40", 0)], 2)
    assert not shard_aligned([_meta(1, 0, b"\x00", b"\x10", None)], 2)


def test_merge_drops_tombstones_only_at_bottom():
    a = [KvTuple(b"a", b"1", 1), KvTuple(b"b", b"2", 2)]
    b = [KvTuple(b"a", b"", 5, True), KvTuple(b"c", b"3", 3)]
    assert [t.key for t in merge_for_compaction([a, b], True)] == [b"b", b"c"]
    kept = merge_for_compaction([a, b], False)
    assert kept[0] == KvTuple(b"a", b"", 5, True)


def test_outputs_cut_at_size_and_shard():
    tuples = [KvTuple(bytes([i]), bytes(200), i) for i in range(256)]
    cfg = CompactionConfig(target_file_bytes=4096, shard_bits=2)
    counter = iter(range(100, 1000))
    outs = build_outputs(tuples, 1, cfg, lambda: next(counter))
    assert sum(len(ts) for _, _, ts in outs) == 256
    for num, data, ts in outs:
        r = SstReader(data)
        assert list(r) == ts and r.level == 1
        assert shard_of(ts[0].key, 2) == shard_of(ts[-1].key, 2) == r.shard_id
        assert len(data) < 4096 + 1024
    assert len(outs) > 4


def _sharded_cluster(k):
    ecfg = EngineConfig(memtable_limit_bytes=64 << 10, shard_bits=k, auto_compaction=False)
    return Cluster(ClusterConfig(engine=ecfg))


@pytest.mark.parametrize("k", [1, 2, 3])
def test_l0_files_disjoint_across_shards(k):
    c = _sharded_cluster(k)
    e = c.engine()
    for _, key, value in operations(WorkloadSpec(ops=6000, value_size=100, seed=k)):
        e.put(key, value)
    e.flush()
    l0 = e.manifest.version.level(0)
    assert len({f.shard_id for f in l0}) == 1 << k
    for a in l0:
        for b in l0:
            if a.shard_id != b.shard_id:
                assert a.largest < b.smallest or b.largest < a.smallest
    before = e.scan(b"", None)
    e.config.l0_compaction_trigger = 1
    tasks = pick_compactions(e.manifest.version, e.config.compaction())
    assert len(tasks) == 1 << k
    e.compact()
    assert e.stats.compaction_tasks_parallel_max == min(1 << k, e.config.max_compactions)
    assert e.scan(b"", None) == before
    assert not e.manifest.version.level(0)


def test_compaction_preserves_live_keys_under_overwrites():
    c = Cluster(ClusterConfig(engine=EngineConfig(memtable_limit_bytes=16 << 10, auto_compaction=True,
                                                  l0_compaction_trigger=2, l1_target_bytes=8 << 10,
                                                  target_file_bytes=4 << 10)))
    e = c.engine()
    rng = random.Random(3)
    shadow = {}
    for _ in range(5000):
        k = rng.randrange(600).to_bytes(4, "big")
        if rng.random() < 0.15:
            e.delete(k)
            shadow.pop(k, None)
        else:
            shadow[k] = rng.randbytes(50)
            e.put(k, shadow[k])
    e.wait_idle()
    assert e.stats.compactions > 0 and e.manifest.version.max_level() >= 2
    assert e.scan(b"", None) == sorted(shadow.items())
    for lvl in range(1, e.manifest.version.max_level() + 1):
        files = e.manifest.version.level(lvl)
        assert all(a.largest < b.smallest for a, b in zip(files, files[1:]))


@given(st.lists(st.tuples(st.integers(0, 255), st.integers(0, 255)), min_size=1, max_size=12),
       st.integers(0, 3))
@settings(max_examples=100)
def test_tasks_never_share_inputs(ranges, k):
    files = []
    for i, (a, b) in enumerate(ranges):
        lo, hi = sorted((a, b))
        sid = shard_of(bytes([lo]), k) if k and shard_of(bytes([lo]), k) == shard_of(bytes([hi]), k) else None
        files.append(_meta(i + 1, i % 3, bytes([lo]), bytes([hi]), sid, size=10_000))
    tasks = pick_compactions(_version(*files), CompactionConfig(l0_trigger=1, l1_target_bytes=1, shard_bits=k))
    seen = set()
    for t in tasks:
        for f in t.all_inputs:
            assert f.name not in seen
            seen.add(f.name)
        for f in t.overlaps:
            assert f.level == t.output_level
