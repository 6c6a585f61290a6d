import json

import pytest

from dmlsm.bench import Bench, memtable_stalls, run
from dmlsm.cluster import ClusterConfig
from dmlsm.engine import EngineConfig
from dmlsm.faults import FaultSchedule
from dmlsm.workload import WorkloadKind, WorkloadSpec

SMALL = EngineConfig(memtable_limit_bytes=32 << 10)


def _cfg(**kw):
    return ClusterConfig(engine=EngineConfig(memtable_limit_bytes=32 << 10, **kw))


def test_fillrandom_deterministic():
    spec = WorkloadSpec(ops=3000, seed=4)
    a = run(spec, _cfg())
    b = run(spec, _cfg())
    assert a.to_dict() == b.to_dict()


def test_report_conservation_and_counts():
    bench = Bench(WorkloadSpec(WorkloadKind.YCSB_MIX, ops=4000, seed=2), _cfg(shard_bits=1))
    r = bench.run()
    assert r.total_fabric_bytes == sum(r.traffic.values())
    assert sum(v["count"] for v in r.latency_by_op.values()) == r.ops == 4000
    assert r.p50_us <= r.p99_us
    assert r.flush_jobs > 0 and r.write_amplification > 0
    assert set(r.flush_breakdown_us) == {"mp", "fm", "flush", "if"}
    assert {"cn->dm", "cn->ds"} <= set(r.traffic)


def test_report_sums_match_fabric():
    bench = Bench(WorkloadSpec(ops=2000, seed=1), _cfg())
    fab = bench.cluster.fabric
    before = fab.traffic_by_class()
    r = bench.run()
    after = fab.traffic_by_class()
    assert r.total_fabric_bytes == fab.total_bytes() - sum(before.values())
    assert r.traffic == {k: v - before.get(k, 0) for k, v in after.items() if v - before.get(k, 0)}


def test_readrandom_has_no_write_traffic():
    spec = WorkloadSpec(WorkloadKind.READRANDOM, ops=2000, key_space=2000, seed=3)
    r = run(spec, _cfg())
    assert r.traffic.get("cn->ds", 0) == 0
    assert r.user_bytes == 0 and sum(r.bytes_written_per_level.values()) == 0
    write_side = r.traffic.get("cn->dm", 0)
    read_side = r.traffic.get("ds->cn", 0)
    assert write_side <= 0.01 * max(read_side, 1)


def test_records_are_line_delimited_json(tmp_path):
    r = run(WorkloadSpec(ops=500), _cfg())
    path = tmp_path / "out.jsonl"
    with path.open("w") as fh:
        r.write_jsonl(fh)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    kinds = {rec["record"] for rec in recs}
    assert {"summary", "latency", "traffic", "flush_breakdown"} <= kinds
    assert recs[0]["ops"] == 500
    assert "throughput" in r.summary_table()


def test_fault_schedule_run_loses_nothing():
    sched = FaultSchedule.parse("at=20000 crash=dm0\nat=400000 restart=dm0\n")
    bench = Bench(WorkloadSpec(ops=3000, seed=8), _cfg(), sched)
    r = bench.run()
    e = bench.cluster.engine()
    assert e.stats.dm_failures >= 1
    from dmlsm.workload import operations

    shadow = {k: v for _, k, v in operations(bench.spec)}
    assert all(e.get(k) == v for k, v in shadow.items())
    assert r.ops == 3000


def test_memtable_stalls_reads_cause():
    r = run(WorkloadSpec(ops=200), _cfg())
    assert memtable_stalls(r) == r.stall_events.get("memtable_backpressure", 0)
