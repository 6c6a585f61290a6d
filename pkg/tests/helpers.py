"""Shared builders for tests: hand-driven offload and small clusters."""

import hashlib
import random

from dmlsm.cluster import Cluster, ClusterConfig
from dmlsm.dm_node import DmNode
from dmlsm.engine import EngineConfig
from dmlsm.errors import NodeDown
from dmlsm.fabric import SCHEDULER_ID, Fabric, cn, dm
from dmlsm.flush_protocol import ExecutionMode
from dmlsm.memtable import Memtable, MemtableState, ShardConfig, TransferPart, TransferRecord
from dmlsm.scheduler import SchedulerConfig, recover


def transfer(fabric: Fabric, node: DmNode, m: Memtable, owner=None) -> TransferRecord:
    """Copy ``m`` verbatim to ``node`` with one-sided writes; no commit."""
    owner = owner or cn(0)
    if m.state == MemtableState.ACTIVE:
        m.seal()
    index = m.serialize_index()
    idx_region = node.allocate(owner, len(index))
    parts = [TransferPart(0, idx_region.base, len(index))]
    last = 0.0
    for b in m.blocks:
        region = node.allocate(owner, len(b.buf))
        if b.buf:
            last = max(last, fabric.one_sided_write(owner, region, 0, bytes(b.buf)).done_at)
        parts.append(TransferPart(b.base, region.base, len(b.buf)))
    last = max(last, fabric.one_sided_write(owner, idx_region, 0, index).done_at)
    fabric.run_until(last)
    return TransferRecord(m.id, owner, node.node_id, m.shards.k, tuple(parts))


def offload(fabric: Fabric, node: DmNode, m: Memtable, owner=None):
    """Transfer ``m`` and host it directly."""
    record = transfer(fabric, node, m, owner)
    return record, node.accept_offload(record)


def dm_fabric(workers: int = 4, budget=None):
    f = Fabric()
    f.register_node(cn(0))
    node = DmNode(dm(0), f, workers)
    f.register_node(dm(0), node, memory_budget=budget)
    return f, node


def filled(mem_id, items, k=0, seed=0, start_seq=1):
    m = Memtable(mem_id, ShardConfig(k), seed=seed)
    seq = start_seq
    for key, value in items:
        if value is None:
            m.delete(key, seq)
        else:
            m.put(key, value, seq)
        seq += 1
    return m


# ------------------------------------------------------------ clusters


def mode_cluster(mode: ExecutionMode, memtable_limit: int = 32 << 10, **engine) -> Cluster:
    """Two CNs with every flush pinned to the executor that realizes ``mode`` for cn0."""
    pinned = {ExecutionMode.LOCAL: cn(0), ExecutionMode.IN_DM: dm(0), ExecutionMode.REMOTE_CN: cn(1)}[mode]
    ecfg = EngineConfig(memtable_limit_bytes=memtable_limit, auto_compaction=False, **engine)
    return Cluster(ClusterConfig(compute_nodes=2, engine=ecfg, scheduler=SchedulerConfig(pinned_executor=pinned)))


def canonical_files(c: Cluster) -> list[tuple]:
    """Live SSTs of cn0 with the file number replaced by a content hash."""
    out = []
    for f in c.engine().live_files():
        data = c.ds_for(None).read(f.name)
        out.append((f.level, f.shard_id, f.smallest, f.largest, f.min_seq, f.max_seq, f.entries,
                    hashlib.sha256(data).hexdigest()))
    return sorted(out)


def _retry(c: Cluster, fn):
    while True:
        try:
            return fn()
        except NodeDown:
            c.run(300_000)
            c.restart_all()


def flush_rounds(c: Cluster, rounds: int = 3, puts: int = 300, seed: int = 7) -> dict[bytes, bytes]:
    """Write-then-flush rounds that ride out injected crashes; returns the shadow map."""
    rng = random.Random(seed)
    shadow = {}
    for _ in range(rounds):
        for _ in range(puts):
            k = rng.randrange(2000).to_bytes(8, "big") + bytes(8)
            v = rng.randbytes(40)
            _retry(c, lambda: c.engine().put(k, v))
            shadow[k] = v
        _retry(c, lambda: c.engine().flush())
    c.run(2_000_000)
    c.restart_all()
    c.run(2_000_000)
    return shadow


def orphan_free(c: Cluster) -> bool:
    live = {f.name for f in c.engine().live_files()}
    return live == {n for n in c.ds_for(None).list_files() if n.startswith("cn0-")}


def lost_keys(c: Cluster, shadow: dict[bytes, bytes]) -> list[bytes]:
    e = c.engine()
    return [k for k, v in shadow.items() if e.get(k) != v]


def scheduler_crash_run(hooks=(), skip: int = 0, puts: int = 900, seed: int = 11):
    """Single-CN workload with scheduler crash rules; returns (cluster, recovered snapshots, shadow)."""
    c = Cluster(ClusterConfig(engine=EngineConfig(memtable_limit_bytes=32 << 10, auto_compaction=False)))
    snaps = []
    sched = c.scheduler
    inner = sched.on_crash

    def on_crash():
        inner()
        snaps.append(recover(sched.log))

    sched.on_crash = on_crash
    for h in hooks:
        c.faults.add(h, node=SCHEDULER_ID, skip=skip, restart_after_us=300_000)
    rng = random.Random(seed)
    shadow = {}
    for _ in range(puts):
        k = rng.randrange(3000).to_bytes(8, "big") + bytes(8)
        v = rng.randbytes(40)
        c.engine().put(k, v)
        shadow[k] = v
    c.engine().flush()
    c.run(2_000_000)
    return c, snaps, shadow
