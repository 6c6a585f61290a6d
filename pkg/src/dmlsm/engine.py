"""Compute-node LSM engine.

Foreground calls (put/get/scan/flush) advance the shared simulated clock by
pumping the fabric event loop, so background offloads, flush jobs and
compactions make progress while a caller waits.  Background callbacks never
pump.
"""

from __future__ import annotations

import itertools
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

from .bloom import BloomFilter
from .compaction import CompactionConfig, CompactionTask, build_outputs, merge_for_compaction, pick_compactions
from .dm_node import (
    DelegationReply, DelegationRequest, OffloadAck, OffloadCommit, Outcome, Purge, Reclaim,
)
from .ds_storage import FileMeta, SstReader, sst_name
from .encoding import DurableLog, KvTuple, decode_tuple, iter_tuples
from .errors import (
    CapacityExceeded, ConfigError, CorruptBlock, FileNotFound, NodeDown, OutOfBounds, StaleCommit, Stalled,
)
from .fabric import Fabric, NodeId, NodeKind, RemoteRegion, SCHEDULER_ID
from .flush_protocol import (
    FILE_NUMBERS_PER_JOB, AbortReason, ControlKind, ControlMessage, EngineSnapshot, MemtableView,
    build_package, finalize,
)
from .manifest import Manifest, ManifestEdit
from .memtable import (
    NOT_FOUND, LocalAllocator, Memtable, MemtableState, ShardConfig, TransferPart, TransferRecord,
    shard_of, shards_for_range,
)
from .wal import Wal, WalOp

MiB = 1 << 20
KEY_OFFSET_ENTRY_OVERHEAD = 26


@dataclass
class EngineConfig:
    memtable_limit_bytes: int = 64 * MiB
    local_memtable_max: int = 2
    remote_memtable_max: int = 6
    shard_bits: int = 0
    l0_slowdown_trigger: int = 32
    l0_stop_trigger: int = 48
    max_background_jobs: int = 4
    key_offset_cache_bytes: int = 64 * MiB
    freq_threshold: int = 4
    # fraction of the memtable limit a shard must reach before it is flushed
    flush_trigger_fraction: float = 0.9
    # bytes of a KV-shard block streamed to DM per one-sided write; None picks
    # limit >> (k + 4), 0 disables streaming
    stream_segment_bytes: int | None = None
    l0_compaction_trigger: int = 4
    level_multiplier: int = 10
    l1_target_bytes: int | None = None
    target_file_bytes: int | None = None
    block_size: int = 4096
    bits_per_key: int = 10
    compression: bool = False
    delayed_write_rate: float = 16 * MiB  # bytes per simulated second during slowdown
    block_cache_blocks: int = 4096
    delegation_timeout_us: float = 20_000.0
    auto_compaction: bool = True
    max_compactions: int = 4
    wal_trim_memtables: int = 4
    # blocking waits (stalls, flush) give up after this much simulated time
    wait_timeout_us: float = 600e6
    seed: int = 0

    def __post_init__(self):
        if self.local_memtable_max < 1:
            raise ConfigError("local_memtable_max must be >= 1")
        if self.remote_memtable_max < 0:
            raise ConfigError("remote_memtable_max must be >= 0")
        if self.l0_stop_trigger < self.l0_slowdown_trigger:
            raise ConfigError("l0_stop_trigger must be >= l0_slowdown_trigger")
        if not 0 <= self.freq_threshold <= 7:
            raise ConfigError("freq_threshold must be in [0, 7]")
        if not 0 <= self.shard_bits <= 8:
            raise ConfigError("shard_bits must be in [0, 8]")
        if self.memtable_limit_bytes <= 0:
            raise ConfigError("memtable_limit_bytes must be > 0")
        if not 0 < self.flush_trigger_fraction <= 1:
            raise ConfigError("flush_trigger_fraction must be in (0, 1]")

    @property
    def segment_bytes(self) -> int:
        if self.shard_bits == 0:
            return 0
        if self.stream_segment_bytes is None:
            return max(4096, self.memtable_limit_bytes >> (self.shard_bits + 4))
        return self.stream_segment_bytes

    def compaction(self) -> CompactionConfig:
        lim = self.memtable_limit_bytes
        return CompactionConfig(self.l0_compaction_trigger, self.l1_target_bytes or 4 * lim,
                                self.level_multiplier, self.target_file_bytes or lim, self.shard_bits,
                                self.block_size, self.bits_per_key, self.compression)


# ----------------------------------------------------------- key-offset cache
@dataclass(frozen=True)
class KeyOffsetEntry:
    key: bytes
    dm: NodeId
    address: int
    length: int
    mem_id: int

    @property
    def charge(self) -> int:
        return len(self.key) + KEY_OFFSET_ENTRY_OVERHEAD


class KeyOffsetCache:
    """LRU map from key to remote tuple coordinates, bounded in bytes."""

    def __init__(self, budget_bytes: int):
        self.budget = budget_bytes
        self.used = 0
        self._lru: OrderedDict[bytes, KeyOffsetEntry] = OrderedDict()
        self._by_mem: dict[int, set[bytes]] = {}
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def __len__(self):
        return len(self._lru)

    def get(self, key: bytes) -> KeyOffsetEntry | None:
        e = self._lru.get(key)
        if e is None:
            self.misses += 1
            return None
        self._lru.move_to_end(key)
        self.hits += 1
        return e

    def peek(self, key: bytes) -> KeyOffsetEntry | None:
        return self._lru.get(key)

    def put(self, e: KeyOffsetEntry) -> None:
        if e.charge > self.budget:
            return
        self.evict(e.key)
        self._lru[e.key] = e
        self._by_mem.setdefault(e.mem_id, set()).add(e.key)
        self.used += e.charge
        while self.used > self.budget:
            _, old = self._lru.popitem(last=False)
            self._drop(old)
            self.evictions += 1

    def _drop(self, e: KeyOffsetEntry):
        self.used -= e.charge
        keys = self._by_mem.get(e.mem_id)
        if keys is not None:
            keys.discard(e.key)
            if not keys:
                del self._by_mem[e.mem_id]

    def evict(self, key: bytes) -> None:
        e = self._lru.pop(key, None)
        if e is not None:
            self._drop(e)

    def invalidate_memtable(self, mem_id: int) -> int:
        keys = self._by_mem.pop(mem_id, set())
        for k in keys:
            e = self._lru.pop(k)
            self.used -= e.charge
        return len(keys)

    def invalidate_dm(self, dm: NodeId) -> None:
        for k in [k for k, e in self._lru.items() if e.dm == dm]:
            self.evict(k)


# ---------------------------------------------------------------- stalls
class StallMode(str, Enum):
    OPEN = "open"
    SLOWDOWN = "slowdown"
    STOPPED = "stopped"


class StallCause(str, Enum):
    L0_FILES = "l0_files"
    MEMTABLE = "memtable_backpressure"


@dataclass
class StallState:
    mode: StallMode = StallMode.OPEN
    cause: StallCause | None = None
    events: dict[str, int] = field(default_factory=lambda: {c.value: 0 for c in StallCause})
    stop_events: int = 0
    time_us: dict[str, float] = field(default_factory=lambda: {c.value: 0.0 for c in StallCause})
    transitions: list[tuple[float, str, str | None]] = field(default_factory=list)

    def enter(self, now: float, mode: StallMode, cause: StallCause | None) -> None:
        if (mode, cause) != (self.mode, self.cause):
            self.transitions.append((now, mode.value, cause.value if cause else None))
            if mode != StallMode.OPEN and cause is not None:
                self.events[cause.value] += 1
                if mode == StallMode.STOPPED:
                    self.stop_events += 1
        self.mode, self.cause = mode, cause


# -------------------------------------------------------------- memtables
@dataclass
class MemEntry:
    mem_id: int
    shard_count: int
    memtable: Memtable | None
    state: MemtableState = MemtableState.IMMUTABLE
    local_only: bool = False
    dm: NodeId | None = None
    regions: list[RemoteRegion] = field(default_factory=list)  # index region first
    record: TransferRecord | None = None
    blooms: list[BloomFilter] | None = None
    flushed: set[int] = field(default_factory=set)
    inflight: set[int] = field(default_factory=set)
    shard_bytes: list[int] = field(default_factory=list)
    min_seq: int = 0
    max_seq: int = 0
    offloading: bool = False
    token: int = 0  # bumped whenever an offload attempt is abandoned
    pending_writes: int = 0
    dm_incarnation: int = 0

    @property
    def resident(self) -> bool:
        return self.memtable is not None

    @property
    def hosted(self) -> bool:
        return self.dm is not None and (self.offloading or self.state == MemtableState.OFFLOADED)

    def fully_flushed(self) -> bool:
        return len(self.flushed) == self.shard_count


@dataclass
class OwnerJob:
    job_id: int
    shard: int
    mem_ids: tuple[int, ...]
    seed: int
    package: bytes = b""
    status: str = "pending"  # pending | finalizing | finalized | abandoned
    started_at: float = 0.0
    prepared_at: float = 0.0
    committed_at: float = 0.0
    exec_us: float = 0.0
    committed_file: str | None = None
    prepares: int = 0


@dataclass
class FlushBreakdown:
    job_id: int
    shard: int
    bytes: int
    mp_us: float
    fm_us: float
    flush_us: float
    if_us: float

    @property
    def total_us(self) -> float:
        return self.mp_us + self.fm_us + self.flush_us + self.if_us


@dataclass
class ReadTrace:
    path: str = "local"
    bloom_us: float = 0.0
    send_us: float = 0.0
    remote_get_us: float = 0.0
    recv_us: float = 0.0
    read_us: float = 0.0
    remote_us: float = 0.0
    delegations: int = 0
    shard_blocks_checked: int = 0


@dataclass
class EngineStats:
    puts: int = 0
    deletes: int = 0
    gets: int = 0
    scans: int = 0
    offloads: int = 0
    offload_failures: int = 0
    flush_jobs: int = 0
    finalized: int = 0
    stale_commits: int = 0
    compactions: int = 0
    compaction_tasks_parallel_max: int = 0
    delegations: int = 0
    delegation_failures: int = 0
    bloom_checks: int = 0
    bloom_negative_lookups: int = 0
    cache_hits: int = 0
    ds_block_reads: int = 0
    dm_failures: int = 0
    recoveries: int = 0
    bytes_flushed: int = 0
    breakdowns: list[FlushBreakdown] = field(default_factory=list)
    read_paths: dict[str, int] = field(default_factory=dict)


class Engine:
    def __init__(self, node_id: NodeId, fabric: Fabric, config: EngineConfig | None = None,
                 dm_nodes: list[NodeId] | None = None, ds=None, wal_log: DurableLog | None = None,
                 manifest_log: DurableLog | None = None, scheduler: NodeId = SCHEDULER_ID,
                 dm_handlers: dict | None = None, faults=None, observer=None):
        self.node_id = node_id
        self.fabric = fabric
        self.config = config or EngineConfig()
        self.dm_nodes = list(dm_nodes or [])
        self.dm_handlers = dm_handlers or {}
        self.ds = ds
        self.scheduler = scheduler
        self.faults = faults
        self.observer = observer
        self.wal = Wal(wal_log)
        self.manifest = Manifest(manifest_log)
        self.stats = EngineStats()
        self.stall = StallState()
        self.last_read = ReadTrace()
        self.shards = ShardConfig(self.config.shard_bits)
        self._open()

    # ================================================================ open
    def _open(self) -> None:
        cfg = self.config
        fab = self.fabric
        self.crashed = False
        self.cache = KeyOffsetCache(cfg.key_offset_cache_bytes)
        self.allocator = LocalAllocator()
        self.mems: OrderedDict[int, MemEntry] = OrderedDict()
        self.jobs: dict[int, OwnerJob] = {}
        self.shard_job: dict[int, int] = {}
        self.abandoned_seeds: dict[int, list[int]] = {}
        self._job_counter = itertools.count(1)
        self._file_counter = itertools.count(FILE_NUMBERS_PER_JOB)
        self._force_upto = -1
        self._replies: dict[int, object] = {}
        self._request_ids = itertools.count(1)
        self._ack_epoch = 0
        self._dm_failed: dict[NodeId, int] = {}
        self._dm_rr = 0
        self._compacting: set[str] = set()
        self._running_compactions = 0
        self._readers: dict[str, SstReader] = {}
        self._block_cache: OrderedDict[tuple[str, int], list[KvTuple]] = OrderedDict()
        self._stream: dict | None = None
        self._last_trim_mark = 0

        v = self.manifest.replay()
        self.epoch = v.epoch + 1
        recovering = bool(self.wal.log.synced_size or v.files or v.epoch)
        groups = list(self.wal.by_memtable())
        last_seq = 0
        max_mem = v.next_mem_id - 1
        rebuilt: list[Memtable] = []
        for mid, recs in groups:
            max_mem = max(max_mem, mid)
            for r in recs:
                last_seq = max(last_seq, r.seq)
            if mid < v.wal_watermark:
                continue
            m = Memtable(mid, self.shards, cfg.memtable_limit_bytes, cfg.seed, self.allocator)
            for r in recs:
                if v.is_flushed(mid, shard_of(r.key, self.shards)):
                    continue
                m.put(r.key, r.value, r.seq, r.op == WalOp.DELETE, force=True)
            if m.count:
                rebuilt.append(m)
        self.last_seq = last_seq
        self.wal.last_seq = self.wal.persisted_seq = last_seq
        self.next_mem_id = max_mem + 1
        self.manifest.log_and_apply(ManifestEdit(epoch=self.epoch, next_mem_id=self.next_mem_id))
        if recovering:
            self.stats.recoveries += 1
            self._collect_garbage()
            for dm in self.dm_nodes:
                if fab.is_alive(dm) and fab.is_alive(self.node_id):
                    fab.send_message(self.node_id, dm, Purge(self.node_id))
        for m in rebuilt:
            m.seal()
            e = self._entry_for(m)
            e.flushed = {s for s in range(self.shards.shard_count) if v.is_flushed(m.id, s)}
            self.mems[m.id] = e
        self._new_active()
        self.wal.sync()
        self._kick()

    def _collect_garbage(self) -> None:
        """Delete this node's SSTs that no Manifest edit references."""
        if self.ds is None:
            return
        live = set(self.manifest.version.files)
        prefix = f"{self.node_id}-"
        for name in self.ds.list_files():
            if name.startswith(prefix) and name not in live:
                self.ds.delete(name)

    def _entry_for(self, m: Memtable) -> MemEntry:
        return MemEntry(m.id, self.shards.shard_count, m, m.state, shard_bytes=[m.shard_bytes(s) for s in range(self.shards.shard_count)],
                        min_seq=m.min_seq or 0, max_seq=m.max_seq)

    def _new_active(self) -> None:
        mid = self.next_mem_id
        self.next_mem_id += 1
        self.active = Memtable(mid, self.shards, self.config.memtable_limit_bytes, self.config.seed, self.allocator)
        self.wal.begin_memtable(mid)
        self._stream = None

    # ============================================================ plumbing
    def _check_alive(self):
        if self.crashed or not self.fabric.is_alive(self.node_id):
            raise NodeDown(self.node_id)

    def _sleep(self, us: float) -> None:
        self.fabric.sleep(us)
        self._check_alive()

    def _deadline(self) -> float:
        return self.fabric.now + self.config.wait_timeout_us

    def _wait_until(self, t: float) -> None:
        if t > self.fabric.now:
            self.fabric.run_until(t)
        self._check_alive()

    def _hit(self, name: str) -> bool:
        return bool(self.faults and self.faults.hit(name, self.node_id))

    def _send(self, dst: NodeId, msg, leg: str = "send") -> bool:
        if self.crashed or not self.fabric.is_alive(self.node_id):
            return False
        self.fabric.send_message(self.node_id, dst, msg, leg=leg)
        return True

    def on_crash(self) -> None:
        self.crashed = True
        self.wal.crash()
        self.manifest.crash()

    def on_restart(self) -> None:
        self.wal = Wal(self.wal.log)
        self._open()

    def _dm_usable(self, dm: NodeId) -> bool:
        if not self.fabric.is_alive(dm):
            return False
        failed_inc = self._dm_failed.get(dm)
        return failed_inc is None or self.fabric.incarnation(dm) > failed_inc

    def _pick_dm(self) -> NodeId | None:
        live = [d for d in self.dm_nodes if self._dm_usable(d)]
        if not live:
            return None
        self._dm_rr += 1
        return live[self._dm_rr % len(live)]

    # ======================================================== slot counts
    def local_count(self) -> int:
        """Memtables resident in local DRAM, including the active one."""
        return 1 + sum(1 for e in self.mems.values() if e.resident)

    def remote_count(self) -> int:
        return sum(1 for e in self.mems.values() if e.hosted)

    def l0_count(self) -> int:
        return sum(1 for f in self.manifest.version.files.values() if f.level == 0)

    # =============================================================== write
    def put(self, key: bytes, value: bytes) -> int:
        return self._write(key, value, False)

    def delete(self, key: bytes) -> int:
        return self._write(key, b"", True)

    def write_batch(self, ops: list[tuple[bytes, bytes | None]]) -> list[int]:
        """Apply (key, value) pairs, None meaning delete, with one WAL sync."""
        seqs = [self._write(k, v or b"", v is None, sync=False) for k, v in ops]
        self.wal.sync()
        return seqs

    def _write(self, key: bytes, value: bytes, tombstone: bool, sync: bool = True) -> int:
        self._check_alive()
        if not key:
            raise ValueError("empty key")
        self._throttle(len(key) + len(value))
        if not self.active.would_fit(key, value):
            self._rotate()
        lat = self.fabric.latency
        seq = self.last_seq + 1
        self.wal.append(seq, key, value, tombstone)
        if sync:
            self.wal.sync()
        self.last_seq = seq
        self.active.put(key, value, seq, tombstone)
        if tombstone:
            self.stats.deletes += 1
        else:
            self.stats.puts += 1
        self._stream_active(shard_of(key, self.shards))
        self._sleep(lat.wal_append_us + lat.memtable_put_us)
        return seq

    def _throttle(self, nbytes: int) -> None:
        cfg = self.config
        now = self.fabric.now
        n = self.l0_count()
        if n >= cfg.l0_stop_trigger:
            self.stall.enter(now, StallMode.STOPPED, StallCause.L0_FILES)
            self._kick()
            ok = self.fabric.run_while(lambda: self.l0_count() >= cfg.l0_stop_trigger and not self.crashed,
                                       self._deadline())
            self._check_alive()
            self.stall.time_us[StallCause.L0_FILES.value] += self.fabric.now - now
            if not ok:
                raise Stalled(StallCause.L0_FILES.value)
            n = self.l0_count()
        if n >= cfg.l0_slowdown_trigger:
            self.stall.enter(self.fabric.now, StallMode.SLOWDOWN, StallCause.L0_FILES)
            delay = nbytes / cfg.delayed_write_rate * 1e6
            self._sleep(delay)
            self.stall.time_us[StallCause.L0_FILES.value] += delay
        elif self.stall.cause == StallCause.L0_FILES:
            self.stall.enter(self.fabric.now, StallMode.OPEN, None)

    def _can_rotate(self) -> bool:
        return self.local_count() + 1 <= self.config.local_memtable_max or not any(
            e.resident for e in self.mems.values())

    def _rotate(self) -> None:
        if not self._can_rotate():
            start = self.fabric.now
            self.stall.enter(start, StallMode.STOPPED, StallCause.MEMTABLE)
            self._kick()
            ok = self.fabric.run_while(lambda: not self._can_rotate() and not self.crashed, self._deadline())
            self._check_alive()
            self.stall.time_us[StallCause.MEMTABLE.value] += self.fabric.now - start
            self.stall.enter(self.fabric.now, StallMode.OPEN, None)
            if not ok:
                raise Stalled(StallCause.MEMTABLE.value)
        m = self.active
        m.seal()
        e = self._entry_for(m)
        if self._stream is not None:
            e.dm, e.regions, e.dm_incarnation = self._stream["dm"], self._stream["regions"], self._stream["inc"]
        self.mems[m.id] = e
        self._new_active()
        self._kick()

    # ----------------------------------------------------------- streaming
    def _stream_active(self, shard: int) -> None:
        """Ship sealed segments of the active memtable's shard blocks early."""
        seg = self.config.segment_bytes
        if seg <= 0:
            return
        block = self.active.blocks[shard]
        if len(block.buf) - block.sent < seg:
            return
        st = self._stream
        if st is None:
            dm = self._pick_dm()
            if dm is None or self.config.remote_memtable_max == 0:
                return
            try:
                regions = [None] + [self._allocate(dm, self.config.memtable_limit_bytes)
                                    for _ in range(self.shards.shard_count)]
            except (CapacityExceeded, NodeDown):
                return
            st = self._stream = {"dm": dm, "regions": regions, "inc": self.fabric.incarnation(dm),
                                 "mem": self.active.id, "pending": 0, "failed": False}
        if st["failed"]:
            return
        region = st["regions"][1 + shard]
        data = bytes(block.buf[block.sent :])
        try:
            self._one_sided_write(st, region, block.sent, data)
        except (NodeDown, OutOfBounds):
            st["failed"] = True
            return
        block.sent = len(block.buf)

    def _one_sided_write(self, st: dict, region: RemoteRegion, offset: int, data: bytes) -> None:
        st["pending"] += 1

        def done(_):
            st["pending"] -= 1
            cb = st.get("on_drain")
            if st["pending"] == 0 and cb is not None:
                st["on_drain"] = None
                cb()

        self.fabric.one_sided_write(self.node_id, region, offset, data, done)

    def _allocate(self, dm: NodeId, length: int) -> RemoteRegion:
        h = self.dm_handlers.get(dm)
        if h is not None:
            return h.allocate(self.node_id, length)
        return self.fabric.register_region(dm, max(1, length))

    def _release(self, regions: list[RemoteRegion | None]) -> None:
        for r in regions:
            if r is None:
                continue
            h = self.dm_handlers.get(r.owner)
            try:
                if h is not None:
                    h.release(r)
                else:
                    self.fabric.free_region(r)
            except NodeDown:
                pass

    # ============================================================= offload
    def _kick(self) -> None:
        """Advance background work: offloads, flush triggers, compactions."""
        if self.crashed:
            return
        self._try_offload()
        self._maybe_flush()
        self._maybe_compact()

    def _try_offload(self) -> None:
        cfg = self.config
        for e in list(self.mems.values()):
            if not e.resident or e.offloading or e.local_only or e.state != MemtableState.IMMUTABLE:
                continue
            if self.remote_count() >= cfg.remote_memtable_max:
                if cfg.remote_memtable_max == 0 or not self._dm_usable_any():
                    self._make_local_only(e)
                    continue
                # no remote slot: flush the oldest hosted memtable to free one
                hosted = [x for x in self.mems.values() if x.hosted and x.state == MemtableState.OFFLOADED]
                if hosted:
                    self._force_upto = max(self._force_upto, hosted[0].mem_id)
                break
            self._offload(e)

    def _dm_usable_any(self) -> bool:
        return any(self._dm_usable(d) for d in self.dm_nodes)

    def _make_local_only(self, e: MemEntry) -> None:
        e.local_only = True
        e.dm = None
        e.offloading = False
        self._force_upto = max(self._force_upto, e.mem_id)

    def _offload(self, e: MemEntry) -> None:
        m = e.memtable
        streamed = e.dm is not None and e.regions
        dm = e.dm if streamed and self._dm_usable(e.dm) and self.fabric.incarnation(e.dm) == e.dm_incarnation else None
        if dm is None:
            if streamed:
                self._release(e.regions)
            e.regions = []
            dm = self._pick_dm()
        if dm is None:
            self._make_local_only(e)
            return
        e.offloading = True
        e.dm = dm
        e.token += 1
        token = e.token
        index = m.serialize_index()
        st = {"pending": 0, "on_drain": None}
        try:
            if not e.regions:
                e.regions = [None] + [self._allocate(dm, len(b.buf)) for b in m.blocks]
                for b in m.blocks:
                    b.sent = 0
            e.regions[0] = self._allocate(dm, len(index))
            e.dm_incarnation = self.fabric.incarnation(dm)
            parts = [TransferPart(0, e.regions[0].base, len(index))]
            for s, b in enumerate(m.blocks):
                region = e.regions[1 + s]
                parts.append(TransferPart(b.base, region.base, len(b.buf)))
                if len(b.buf) > b.sent:
                    self._one_sided_write(st, region, b.sent, bytes(b.buf[b.sent :]))
                    b.sent = len(b.buf)
            self._one_sided_write(st, e.regions[0], 0, index)
        except (CapacityExceeded, NodeDown, OutOfBounds):
            self._offload_failed(e)
            return
        record = TransferRecord(m.id, self.node_id, dm, self.shards.k, tuple(parts))
        e.record = record

        def drained():
            if e.token != token or self.crashed:
                return
            if self._hit("offload.before_commit"):
                self._offload_failed(e)
                return
            if not self.fabric.is_alive(dm):
                self._on_dm_failure(dm)
                return
            self._send(dm, OffloadCommit(record))

        st["on_drain"] = drained
        self.stats.offloads += 1

    def _offload_failed(self, e: MemEntry) -> None:
        """Release DM space and keep the memtable local; it is flushed from here."""
        self.stats.offload_failures += 1
        e.token += 1
        self._release(e.regions)
        e.regions = []
        e.record = None
        self._make_local_only(e)
        self._kick()

    def _on_offload_ack(self, ack: OffloadAck) -> None:
        e = self.mems.get(ack.mem_id)
        if e is None or not e.offloading or e.memtable is None:
            return
        if not ack.ok:
            self._offload_failed(e)
            return
        m = e.memtable
        e.blooms = [BloomFilter.decode(b) for b in ack.blooms]
        e.offloading = False
        e.state = MemtableState.OFFLOADED
        m.transition(MemtableState.OFFLOADED)
        self._ack_epoch += 1
        self._promote_hot_keys(e, m)
        e.memtable = None  # local DRAM released
        self._kick()

    def _promote_hot_keys(self, e: MemEntry, m: Memtable) -> None:
        """Point the cache at the newest DM copy of every key in ``m``."""
        thr = self.config.freq_threshold
        prev = None
        for node in m.nodes():
            if node.key == prev:
                continue
            prev = node.key
            if node.freq >= thr and not node.tombstone:
                addr = e.record.remote_address(node.shard_id, node.kv_ref)
                self.cache.put(KeyOffsetEntry(node.key, e.dm, addr, node.tuple_len, e.mem_id))
            else:
                self.cache.evict(node.key)

    # ========================================================= DM failure
    def on_peer_failure(self, node: NodeId) -> None:
        if node.kind == NodeKind.DM and not self.crashed:
            self._on_dm_failure(node)

    def _on_dm_failure(self, dm: NodeId) -> None:
        """Rebuild everything the DM hosted from the WAL and flush it locally."""
        if self.crashed:
            return
        inc = self.fabric.incarnation(dm)
        if self._dm_failed.get(dm, -1) >= inc and not self.fabric.is_alive(dm):
            pass
        self._dm_failed[dm] = inc
        self.stats.dm_failures += 1
        self.cache.invalidate_dm(dm)
        affected = [e for e in self.mems.values() if e.dm == dm and not e.local_only]
        if self._stream is not None and self._stream["dm"] == dm:
            self._stream = None
            for b in self.active.blocks:
                b.sent = 0
        if not affected:
            return
        wal_groups = None
        for e in affected:
            for s in list(e.inflight):
                self._abandon_job(self.shard_job.get(s))
            e.token += 1
            e.offloading = False
            e.regions = []
            e.record = None
            e.blooms = None
            e.state = MemtableState.IMMUTABLE
            if e.memtable is None:
                if wal_groups is None:
                    wal_groups = dict(self.wal.by_memtable())
                m = Memtable(e.mem_id, self.shards, self.config.memtable_limit_bytes, self.config.seed, self.allocator)
                for r in wal_groups.get(e.mem_id, []):
                    if shard_of(r.key, self.shards) in e.flushed:
                        continue
                    m.put(r.key, r.value, r.seq, r.op == WalOp.DELETE, force=True)
                m.seal()
                e.memtable = m
            self._make_local_only(e)
        self._kick()

    def _abandon_job(self, job_id: int | None) -> None:
        if job_id is None:
            return
        job = self.jobs.get(job_id)
        if job is None or job.status != "pending":
            return
        job.status = "abandoned"
        self.abandoned_seeds.setdefault(job.shard, []).append(job.seed)
        self.shard_job.pop(job.shard, None)
        for mid in job.mem_ids:
            e = self.mems.get(mid)
            if e is not None:
                e.inflight.discard(job.shard)
        self._send(self.scheduler, ControlMessage.abort(job_id, AbortReason.CANCELLED))

    # ========================================================= flush jobs
    def _maybe_flush(self) -> None:
        cfg = self.config
        threshold = cfg.flush_trigger_fraction * cfg.memtable_limit_bytes
        for s in range(self.shards.shard_count):
            if s in self.shard_job:
                continue
            if sum(1 for j in self.jobs.values() if j.status in ("pending", "finalizing")) >= cfg.max_background_jobs:
                return
            group: list[MemEntry] = []
            for e in self.mems.values():
                if s in e.flushed:
                    continue
                ready = e.state == MemtableState.OFFLOADED or (e.local_only and e.resident)
                if not ready:
                    break
                group.append(e)
            if not group:
                continue
            total = sum(e.shard_bytes[s] for e in group)
            forced = any(e.mem_id <= self._force_upto or e.local_only for e in group)
            if total == 0 and forced:
                for e in group:
                    e.flushed.add(s)
                self._after_shard_flushed(group)
                continue
            if total >= threshold or forced:
                self._start_job(s, group)

    def _start_job(self, shard: int, group: list[MemEntry]) -> None:
        job_id = (self.epoch << 32) | next(self._job_counter)
        seed = (self.epoch << 32) | next(self._file_counter)
        for _ in range(FILE_NUMBERS_PER_JOB - 1):
            next(self._file_counter)
        views = []
        for e in group:
            if e.local_only:
                b = e.memtable.blocks
                views.append(MemtableView(e.mem_id, False, True, self.node_id, e.min_seq, e.max_seq, 0, 0,
                                          tuple(x.base for x in b), tuple(len(x.buf) for x in b)))
            else:
                r = e.record
                views.append(MemtableView(e.mem_id, True, False, e.dm, e.min_seq, e.max_seq, r.index.remote_base,
                                          r.index.length, tuple(p.remote_base for p in r.parts[1:]),
                                          tuple(p.length for p in r.parts[1:])))
        snap = EngineSnapshot(self.node_id, self.shards.k, self.wal.persisted_seq, self.last_seq, self.epoch,
                              self.wal.persisted_offset, self.config.compression, self.config.block_size,
                              self.config.bits_per_key)
        pkg = build_package(snap, shard, views, job_id, seed)
        job = OwnerJob(job_id, shard, tuple(e.mem_id for e in group), seed, pkg.encode(), started_at=self.fabric.now)
        self.jobs[job_id] = job
        self.shard_job[shard] = job_id
        for e in group:
            e.inflight.add(shard)
        self.stats.flush_jobs += 1
        self.fabric.schedule(self.fabric.latency.package_build_us, lambda: self._prepare(job_id), owner=self.node_id)

    def _prepare(self, job_id: int) -> None:
        job = self.jobs.get(job_id)
        if job is None or job.status != "pending" or self.crashed:
            return
        if self._hit("owner.before_prepare"):
            return
        job.prepares += 1
        if not job.prepared_at:
            job.prepared_at = self.fabric.now
        self._send(self.scheduler, ControlMessage(ControlKind.PREPARE, job_id, job.package))

    def _reprepare(self, job_id: int) -> None:
        """Re-issue a discarded job under a fresh id (the old id stays dead)."""
        job = self.jobs.get(job_id)
        if job is None or job.status != "pending":
            return
        job.status = "abandoned"
        self.abandoned_seeds.setdefault(job.shard, []).append(job.seed)
        self.shard_job.pop(job.shard, None)
        group = [self.mems[m] for m in job.mem_ids if m in self.mems]
        for e in group:
            e.inflight.discard(job.shard)
        if group:
            self._start_job(job.shard, group)

    # -------------------------------------------------- control messages
    def _on_control(self, src: NodeId, msg: ControlMessage) -> None:
        if msg.kind == ControlKind.COMMIT:
            self._on_commit(msg)
        elif msg.kind == ControlKind.ABORT:
            reason, _ = msg.abort_fields()
            if reason == AbortReason.SCHEDULER_RESTART:
                for jid, j in list(self.jobs.items()):
                    if j.status == "pending":
                        self._reprepare(jid)
            elif reason == AbortReason.DISCARDED:
                self._reprepare(msg.job_id)

    def _on_commit(self, msg: ControlMessage) -> None:
        attempt, meta, exec_us = msg.commit_fields()
        job = self.jobs.get(msg.job_id)
        if job is not None and job.status == "finalizing":
            return  # duplicate while the first one is being installed
        if job is None or job.status != "pending":
            try:
                finalize(self, msg.job_id, meta)
            except StaleCommit:
                self.stats.stale_commits += 1
            self._send(self.scheduler, ControlMessage(ControlKind.ACK, msg.job_id))
            return
        job.status = "finalizing"
        job.committed_at = self.fabric.now
        job.exec_us = exec_us

        def install():
            if self.crashed or job.status != "finalizing":
                return
            job.status = "pending"
            try:
                ok = finalize(self, msg.job_id, meta, self._hit)
            except StaleCommit:
                ok = True
            if not ok:
                return
            self._send(self.scheduler, ControlMessage(ControlKind.ACK, msg.job_id))
            done = self.fabric.now
            mp = job.prepared_at - job.started_at if job.prepared_at else 0.0
            if_us = done - job.committed_at
            flush_us = min(exec_us, max(0.0, job.committed_at - job.prepared_at))
            fm = max(0.0, done - job.started_at - mp - flush_us - if_us)
            self.stats.breakdowns.append(FlushBreakdown(job.job_id, job.shard, meta.size, mp, fm, flush_us, if_us))
            self._kick()

        self.fabric.schedule(self.fabric.latency.finalize_us, install, owner=self.node_id)

    # FinalizeTarget -----------------------------------------------------
    def job_status(self, job_id: int) -> str:
        job = self.jobs.get(job_id)
        return "unknown" if job is None else job.status

    def committed_file(self, job_id: int) -> str | None:
        job = self.jobs.get(job_id)
        return job.committed_file if job else None

    def install_flush(self, job_id: int, meta: FileMeta) -> None:
        job = self.jobs[job_id]
        edit = ManifestEdit(added=(meta,), flushed=tuple((m, job.shard) for m in job.mem_ids),
                            next_mem_id=self.next_mem_id, job_id=job_id)
        self.manifest.log_and_apply(edit)
        job.committed_file = meta.name
        if self.observer is not None:
            self.observer.on_finalize(self.node_id, job_id, meta)
        self.stats.finalized += 1
        self.stats.bytes_flushed += meta.size
        # drop outputs of other attempts and of abandoned jobs for this shard
        seeds = [job.seed] + self.abandoned_seeds.pop(job.shard, [])
        for seed in seeds:
            for a in range(FILE_NUMBERS_PER_JOB):
                name = sst_name(self.node_id, seed + a)
                if name != meta.name:
                    self._delete_name(name)

    def mark_flushed(self, job_id: int) -> list[int]:
        job = self.jobs[job_id]
        job.status = "finalized"
        self.shard_job.pop(job.shard, None)
        group = [self.mems[m] for m in job.mem_ids if m in self.mems]
        for e in group:
            e.flushed.add(job.shard)
            e.inflight.discard(job.shard)
        return [e.mem_id for e in group if e.fully_flushed()]

    def reclaim(self, mem_ids: list[int]) -> None:
        for mid in mem_ids:
            e = self.mems.pop(mid, None)
            if e is None:
                continue
            self.cache.invalidate_memtable(mid)
            if e.dm is not None and not e.local_only and self._dm_usable(e.dm):
                self._send(e.dm, Reclaim(self.node_id, mid))
            e.memtable = None
        self._trim_wal()

    def delete_file(self, meta: FileMeta) -> None:
        self._delete_name(meta.name)

    def _delete_name(self, name: str) -> None:
        if self.ds is not None and name not in self.manifest.version.files:
            self.ds.delete(name)

    def _after_shard_flushed(self, group: list[MemEntry]) -> None:
        done = [e.mem_id for e in group if e.fully_flushed()]
        if done:
            self.reclaim(done)

    def _trim_wal(self) -> None:
        oldest = min(self.mems, default=self.active.id)
        oldest = min(oldest, self.active.id)
        if oldest - self._last_trim_mark < self.config.wal_trim_memtables:
            return
        self.wal.sync()
        self.manifest.log_and_apply(ManifestEdit(wal_watermark=oldest, next_mem_id=self.next_mem_id))
        self.wal.trim_below(oldest)
        self._last_trim_mark = oldest

    # ========================================================== compaction
    def _maybe_compact(self) -> None:
        if not self.config.auto_compaction or self.ds is None or self.crashed:
            return
        self._schedule_compactions()

    def _schedule_compactions(self) -> list[CompactionTask]:
        cfg = self.config
        room = cfg.max_compactions - self._running_compactions
        if room <= 0:
            return []
        tasks = pick_compactions(self.manifest.version, cfg.compaction(), self._compacting)[:room]
        for t in tasks:
            self._run_compaction(t)
        if tasks:
            self.stats.compaction_tasks_parallel_max = max(self.stats.compaction_tasks_parallel_max,
                                                           self._running_compactions)
        return tasks

    def _run_compaction(self, task: CompactionTask) -> None:
        fab = self.fabric
        ccfg = self.config.compaction()
        names = [f.name for f in task.all_inputs]
        self._compacting.update(names)
        self._running_compactions += 1
        epoch = self.epoch
        try:
            sources = [list(self._reader(f.name)) for f in task.all_inputs]
        except (FileNotFound, CorruptBlock):
            self._compacting.difference_update(names)
            self._running_compactions -= 1
            return
        lo, hi = task.key_range()
        deeper = any(f.level > task.output_level and f.overlaps(lo, hi) for f in self.manifest.version.files.values())
        merged = merge_for_compaction(sources, drop_tombstones=not deeper)
        outputs = build_outputs(merged, task.output_level, ccfg,
                                lambda: (self.epoch << 32) | next(self._file_counter))
        read = fab.transfer(self.ds.node_id, self.node_id, task.input_bytes, fixed_us=fab.latency.ds_read_us)
        cpu = task.input_bytes * fab.latency.merge_per_byte_us
        state = {"left": len(outputs), "failed": False}
        metas = []
        for num, data, tuples in outputs:
            metas.append(FileMeta(num, task.output_level, tuples[0].key, tuples[-1].key, min(t.seq for t in tuples),
                                  max(t.seq for t in tuples), len(data), len(tuples),
                                  task.shard_id if self.shards.k and task.shard_id is not None else
                                  (shard_of(tuples[0].key, self.shards) if self.shards.k else None),
                                  self.ds.node_id, self.node_id))

        def install():
            self._compacting.difference_update(names)
            self._running_compactions -= 1
            if self.crashed or self.epoch != epoch or state["failed"]:
                return
            self.manifest.log_and_apply(ManifestEdit(added=tuple(metas), removed=tuple(names)))
            self.stats.compactions += 1
            for n in names:
                self._readers.pop(n, None)
                self.ds.delete(n)
            self._kick()

        def write_outputs():
            if self.crashed or self.epoch != epoch:
                return
            if not outputs:
                install()
                return

            def landed(err):
                if err is not None:
                    state["failed"] = True
                state["left"] -= 1
                if state["left"] == 0:
                    install()

            for (num, data, _), meta in zip(outputs, metas):
                self.ds.write_sst(self.node_id, meta.name, data, meta.level, landed)

        fab.schedule(read.done_at - fab.now + cpu, write_outputs, owner=self.node_id)

    def compact(self, wait: bool = True) -> None:
        """Run compactions until no level is over its threshold."""
        self._check_alive()
        deadline = self._deadline()
        while self._schedule_compactions() or self._running_compactions:
            if not wait:
                return
            self.fabric.run_while(lambda: self._running_compactions > 0 and not self.crashed, deadline)
            self._check_alive()
            if self.fabric.now >= deadline:
                raise Stalled("compaction")

    # ============================================================= flushing
    def flush(self, wait: bool = True) -> None:
        """Seal the active memtable and flush everything to DS."""
        self._check_alive()
        if self.active.count:
            self._rotate()
        self._force_upto = max(self._force_upto, max(self.mems, default=-1))
        self._kick()
        if wait:
            ok = self.fabric.run_while(lambda: bool(self.mems) and not self.crashed, self._deadline())
            self._check_alive()
            if not ok and self.mems:
                raise Stalled("flush")

    def wait_idle(self, compactions: bool = True) -> None:
        self.flush()
        if compactions:
            self.compact()

    # ================================================================ reads
    def get(self, key: bytes, snapshot_seq: int | None = None):
        self._check_alive()
        self.stats.gets += 1
        trace = self.last_read = ReadTrace()
        snap = self.last_seq if snapshot_seq is None else snapshot_seq
        lat = self.fabric.latency
        self._sleep(lat.local_get_us)
        t = self.active.lookup(key, snap)
        if t is None:
            for e in reversed(self.mems.values()):
                if e.resident and shard_of(key, self.shards) not in e.flushed:
                    t = e.memtable.lookup(key, snap)
                    if t is not None:
                        break
        if t is not None:
            return self._count_path(trace, "local", t)
        t, done = self._get_remote(key, snap, snapshot_seq is None, trace)
        if done:
            return self._count_path(trace, trace.path, t)
        return self._count_path(trace, "ds", self._get_ds(key, snap))

    def _count_path(self, trace: ReadTrace, path: str, t: KvTuple | None):
        trace.path = path
        self.stats.read_paths[path] = self.stats.read_paths.get(path, 0) + 1
        if t is None or t.tombstone:
            return NOT_FOUND
        return t.value

    def _remote_candidates(self, shard: int) -> list[MemEntry]:
        return [e for e in reversed(self.mems.values())
                if e.state == MemtableState.OFFLOADED and not e.resident and not e.local_only
                and shard not in e.flushed and e.dm is not None]

    def _get_remote(self, key: bytes, snap: int, use_cache: bool, trace: ReadTrace) -> tuple[KvTuple | None, bool]:
        """DM tier lookup.  Returns (tuple, decided)."""
        lat = self.fabric.latency
        shard = shard_of(key, self.shards)
        cands = self._remote_candidates(shard)
        if not cands:
            return None, False
        t0 = self.fabric.now
        if use_cache:
            ce = self.cache.get(key)
            if ce is not None and any(e.mem_id == ce.mem_id for e in cands):
                try:
                    region, off = self.fabric.resolve(ce.dm, ce.address)
                    comp = self.fabric.one_sided_read(self.node_id, region, off, ce.length)
                    self._wait_until(comp.done_at)
                    t, _ = decode_tuple(comp.data)
                    if t.key == key:
                        self.stats.cache_hits += 1
                        trace.path = "cache"
                        trace.read_us = trace.remote_us = self.fabric.now - t0
                        return t, True
                except (NodeDown, OutOfBounds, ValueError):
                    pass
                self.cache.evict(key)
        self._sleep(lat.bloom_check_us)
        trace.bloom_us = lat.bloom_check_us
        trace.shard_blocks_checked = len(cands)
        self.stats.bloom_checks += len(cands)
        positives = [e for e in cands if e.blooms is not None and e.blooms[shard].may_contain(key)]
        if not positives:
            self.stats.bloom_negative_lookups += 1
            return None, False
        # one request per DM, newest memtables first
        groups: list[tuple[NodeId, list[MemEntry]]] = []
        for e in positives:
            if groups and groups[-1][0] == e.dm:
                groups[-1][1].append(e)
            else:
                groups.append((e.dm, [e]))
        for dm, es in groups:
            reply = self._delegate(dm, key, shard, es, snap, trace)
            if reply is None:
                # DM failed: content was rebuilt locally; restart the lookup there
                for e in reversed(self.mems.values()):
                    if e.resident and shard not in e.flushed:
                        t = e.memtable.lookup(key, snap)
                        if t is not None:
                            trace.path = "local"
                            return t, True
                return self._get_remote(key, snap, use_cache, trace)
            if reply.outcome == Outcome.UNKNOWN_MEMTABLE:
                if any(self.mems.get(e.mem_id) is not None and shard not in self.mems[e.mem_id].flushed
                       and self.mems[e.mem_id].dm == dm for e in es):
                    self._on_dm_failure(dm)
                    return self._get_remote(key, snap, use_cache, trace)
                return None, False
            if reply.outcome == Outcome.NOT_FOUND:
                if reply.served_by is not None:
                    trace.path = "delegation"
                    trace.remote_us = self.fabric.now - t0
                    return KvTuple(key, b"", reply.seq, True), True
                continue
            ack_epoch = self._ack_epoch
            if reply.outcome == Outcome.FOUND_INLINE:
                t = KvTuple(key, reply.value, reply.seq)
            else:
                try:
                    region, off = self.fabric.resolve(dm, reply.address)
                    t1 = self.fabric.now
                    comp = self.fabric.one_sided_read(self.node_id, region, off, reply.length)
                    self._wait_until(comp.done_at)
                    trace.read_us = self.fabric.now - t1
                    t, _ = decode_tuple(comp.data)
                except (NodeDown, OutOfBounds):
                    # reclaimed after the reply: the data is in DS by now
                    return None, False
            if use_cache and ack_epoch == self._ack_epoch and reply.served_by in self.mems:
                self.cache.put(KeyOffsetEntry(key, dm, reply.address, reply.length, reply.served_by))
            trace.path = "delegation"
            trace.remote_us = self.fabric.now - t0
            return t, True
        return None, False

    def _delegate(self, dm: NodeId, key: bytes, shard: int, es: list[MemEntry], snap: int,
                  trace: ReadTrace) -> DelegationReply | None:
        rid = next(self._request_ids)
        req = DelegationRequest(key, shard, tuple(e.mem_id for e in es), snap, self.node_id, self.node_id, rid)
        if not self.fabric.is_alive(dm):
            self._on_dm_failure(dm)
            return None
        t_send = self.fabric.now
        self._send(dm, req)
        self.stats.delegations += 1
        trace.delegations += 1
        ok = self.fabric.run_while(lambda: rid not in self._replies and not self.crashed,
                                   deadline=t_send + self.config.delegation_timeout_us)
        self._check_alive()
        reply = self._replies.pop(rid, None)
        if not ok or reply is None or reply == "undeliverable":
            self.stats.delegation_failures += 1
            self._on_dm_failure(dm)
            return None
        reply, delivered_at, issued_at = reply
        trace.remote_get_us = reply.served_us
        trace.recv_us = delivered_at - issued_at
        trace.send_us = issued_at - reply.served_us - t_send
        return reply

    def _get_ds(self, key: bytes, snap: int) -> KvTuple | None:
        v = self.manifest.version
        for f in v.level(0):
            if not f.overlaps(key, key):
                continue
            t = self._sst_get(f, key, snap)
            if t is not None:
                return t
        for level in range(1, v.max_level() + 1):
            for f in v.level(level):
                if f.overlaps(key, key):
                    t = self._sst_get(f, key, snap)
                    if t is not None:
                        return t
                    break
        return None

    def _reader(self, name: str) -> SstReader:
        r = self._readers.get(name)
        if r is None:
            r = self._readers[name] = self.ds.reader(name)
        return r

    def _load_block(self, name: str, reader: SstReader, i: int) -> list[KvTuple]:
        key = (name, i)
        blk = self._block_cache.get(key)
        lat = self.fabric.latency
        if blk is not None:
            self._block_cache.move_to_end(key)
            self._sleep(lat.block_cache_hit_us)
            return blk
        comp = self.fabric.transfer(self.ds.node_id, self.node_id, reader.block_size(i), fixed_us=lat.ds_read_us)
        self._wait_until(comp.done_at)
        blk = reader.read_block(i)
        self.stats.ds_block_reads += 1
        self._block_cache[key] = blk
        if len(self._block_cache) > self.config.block_cache_blocks:
            self._block_cache.popitem(last=False)
        return blk

    def _sst_get(self, f: FileMeta, key: bytes, snap: int) -> KvTuple | None:
        try:
            r = self._reader(f.name)
        except FileNotFound:
            return None
        return r.get(key, snap, lambda i: self._load_block(f.name, r, i))

    # ================================================================= scan
    def scan(self, start: bytes, end: bytes | None, snapshot_seq: int | None = None) -> list[tuple[bytes, bytes]]:
        self._check_alive()
        if end is not None and start > end:
            raise ValueError("start must be <= end")
        self.stats.scans += 1
        snap = self.last_seq if snapshot_seq is None else snapshot_seq
        shards = shards_for_range(start, end, self.shards.k)
        sources: list[Iterator[KvTuple]] = [self.active.range(start, end, snap)]
        remote_reads = []
        for e in self.mems.values():
            if e.resident:
                sources.append(e.memtable.range(start, end, snap))
            elif e.state == MemtableState.OFFLOADED and e.record is not None:
                for s in shards:
                    if s in e.flushed or e.record.shard(s).length == 0:
                        continue
                    p = e.record.shard(s)
                    try:
                        region, off = self.fabric.resolve(e.dm, p.remote_base)
                    except (OutOfBounds, KeyError):
                        continue
                    remote_reads.append((region, off, p.length))
        if remote_reads:
            try:
                comps = self.fabric.read_batch(self.node_id, remote_reads)
                self._wait_until(max(c.done_at for c in comps))
                for c in comps:
                    sources.append(t for _, t in iter_tuples(c.data)
                                   if t.key >= start and (end is None or t.key < end) and t.seq <= snap)
            except NodeDown as exc:
                self._on_dm_failure(exc.node)
                return self.scan(start, end, snapshot_seq)
        v = self.manifest.version
        for f in v.files.values():
            if end is not None and f.smallest >= end or f.largest < start:
                continue
            r = self._reader(f.name)
            sources.append(t for t in r.range(start, end) if t.seq <= snap)
        newest: dict[bytes, KvTuple] = {}
        for src in sources:
            for t in src:
                if end is not None and t.key >= end:
                    continue
                cur = newest.get(t.key)
                if cur is None or t.seq > cur.seq:
                    newest[t.key] = t
        return [(k, newest[k].value) for k in sorted(newest) if not newest[k].tombstone]

    # ============================================================ mailbox
    def on_message(self, ev) -> None:
        if self.crashed:
            return
        msg = ev.payload
        if isinstance(msg, DelegationReply):
            self._replies[msg.request_id] = (msg, ev.deliver_at, ev.issued_at)
        elif isinstance(msg, OffloadAck):
            self._on_offload_ack(msg)
        elif isinstance(msg, ControlMessage):
            self._on_control(ev.src, msg)

    def on_undeliverable(self, ev) -> None:
        if self.crashed:
            return
        msg = ev.payload
        if isinstance(msg, DelegationRequest):
            self._replies[msg.request_id] = "undeliverable"
        elif isinstance(msg, OffloadCommit):
            self._on_dm_failure(ev.dst)
        elif isinstance(msg, ControlMessage) and msg.kind == ControlKind.PREPARE:
            jid = msg.job_id
            self.fabric.schedule(100_000.0, lambda: self._prepare(jid), owner=self.node_id)

    # ============================================================= views
    def snapshot(self) -> int:
        return self.last_seq

    def live_files(self) -> list[FileMeta]:
        return sorted(self.manifest.version.files.values(), key=lambda f: (f.level, f.smallest, f.file_number))

    def pending_memtables(self) -> int:
        return len(self.mems)


__all__ = [
    "Engine", "EngineConfig", "EngineStats", "FlushBreakdown", "KEY_OFFSET_ENTRY_OVERHEAD", "KeyOffsetCache",
    "KeyOffsetEntry", "MemEntry", "ReadTrace", "StallCause", "StallMode", "StallState",
]
