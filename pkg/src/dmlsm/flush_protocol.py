"""Collaborative flush offloading: package, control messages, executor, finalize.

Per job the owner packages a shard group (PREPARE), the scheduler picks an
executor (ASSIGN), the executor confirms (ACCEPT), receives the package in a
follow-up ASSIGN, builds one L0 SST and reports it (COMMIT).  The owner
installs the file in its Manifest and answers ACK; ABORT carries a reason.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable, Iterable, Protocol

from .ds_storage import FileMeta, SstBuilder, sst_name
from .encoding import KvTuple, iter_tuples
from .errors import CorruptMessage, MemtableNotOffloaded, NodeDown, OutOfBounds, StaleCommit, WalNotPersisted
from .fabric import Fabric, NodeId, NodeKind, SCHEDULER_ID

PACKAGE_VERSION = 1
PACKAGE_LIMIT = 1024
FILE_NUMBERS_PER_JOB = 8


class ControlKind(IntEnum):
    PREPARE = 1
    ASSIGN = 2
    ACCEPT = 3
    COMMIT = 4
    ABORT = 5
    ACK = 6


class ExecutionMode(IntEnum):
    LOCAL = 0
    IN_DM = 1
    REMOTE_CN = 2


class AbortReason(IntEnum):
    DM_UNREACHABLE = 1
    DS_WRITE_FAILED = 2
    DISCARDED = 3
    CANCELLED = 4
    SCHEDULER_RESTART = 5
    INJECTED = 6


_CM_HDR = struct.Struct("<BQI")


@dataclass(frozen=True)
class ControlMessage:
    kind: ControlKind
    job_id: int
    payload: bytes = b""

    def encode(self) -> bytes:
        return _CM_HDR.pack(self.kind, self.job_id, len(self.payload)) + self.payload

    @classmethod
    def decode(cls, buf) -> "ControlMessage":
        if len(buf) < _CM_HDR.size:
            raise CorruptMessage("control message shorter than header")
        kind, job, n = _CM_HDR.unpack_from(buf, 0)
        if len(buf) != _CM_HDR.size + n:
            raise CorruptMessage(f"payload length {n} does not match buffer")
        try:
            kind = ControlKind(kind)
        except ValueError:
            raise CorruptMessage(f"unknown control kind {kind}") from None
        return cls(kind, job, bytes(buf[_CM_HDR.size :]))

    def wire_size(self) -> int:
        return _CM_HDR.size + len(self.payload)

    # typed payload helpers
    @classmethod
    def assign(cls, job_id: int, attempt: int, mode: ExecutionMode, package: bytes = b"") -> "ControlMessage":
        return cls(ControlKind.ASSIGN, job_id, struct.pack("<BB", attempt, mode) + package)

    def assign_fields(self) -> tuple[int, ExecutionMode, bytes]:
        attempt, mode = struct.unpack_from("<BB", self.payload, 0)
        return attempt, ExecutionMode(mode), self.payload[2:]

    @classmethod
    def accept(cls, job_id: int, attempt: int) -> "ControlMessage":
        return cls(ControlKind.ACCEPT, job_id, bytes([attempt]))

    @classmethod
    def commit(cls, job_id: int, attempt: int, meta: FileMeta, exec_us: float = 0.0) -> "ControlMessage":
        return cls(ControlKind.COMMIT, job_id, struct.pack("<Bd", attempt, exec_us) + meta.encode())

    def commit_fields(self) -> tuple[int, FileMeta, float]:
        attempt, exec_us = struct.unpack_from("<Bd", self.payload, 0)
        meta, _ = FileMeta.decode(self.payload, 9)
        return attempt, meta, exec_us

    @classmethod
    def abort(cls, job_id: int, reason: AbortReason, attempt: int = 0) -> "ControlMessage":
        return cls(ControlKind.ABORT, job_id, bytes([reason, attempt]))

    def abort_fields(self) -> tuple[AbortReason, int]:
        return AbortReason(self.payload[0]), self.payload[1]

    @property
    def attempt(self) -> int:
        return self.payload[0] if self.payload else 0


# ------------------------------------------------------------------ package
@dataclass(frozen=True)
class PackageMem:
    """One memtable's contribution to a shard group."""

    mem_id: int
    location: int  # index into the package node table
    min_seq: int
    max_seq: int
    index_base: int
    index_len: int
    shard_base: int
    shard_len: int

    _S = struct.Struct("<QBQQQIQI")

    def encode(self) -> bytes:
        return self._S.pack(self.mem_id, self.location, self.min_seq, self.max_seq,
                            self.index_base, self.index_len, self.shard_base, self.shard_len)


_PKG_HEAD = struct.Struct("<HQ")
_PKG_OPTS = struct.Struct("<BIB")
_PKG_FILE = struct.Struct("<BQ")
_PKG_KVS = struct.Struct("<IQ")
_PKG_WAL = struct.Struct("<QQ")
_PKG_GROUP = struct.Struct("<BBB")


@dataclass(frozen=True)
class FlushMetadataPackage:
    job_id: int
    owner: NodeId
    shard_id: int
    shard_bits: int
    nodes: tuple[NodeId, ...]
    mems: tuple[PackageMem, ...]  # oldest first
    compression: bool = False
    block_size: int = 4096
    bits_per_key: int = 10
    target_level: int = 0
    file_number_seed: int = 0
    cf_id: int = 0
    seq_watermark: int = 0
    wal_file_id: int = 0
    wal_persisted_offset: int = 0

    def location(self, m: PackageMem) -> NodeId:
        return self.nodes[m.location]

    @property
    def total_bytes(self) -> int:
        return sum(m.shard_len for m in self.mems)

    @property
    def local_only(self) -> bool:
        """True when some shard block still lives in the owner's own memory."""
        return any(self.nodes[m.location] == self.owner for m in self.mems)

    def dependency_objects(self) -> list[tuple[str, bytes]]:
        """Sub-structures in fixed dependency order; each shared object appears once."""
        objs = [
            ("head", _PKG_HEAD.pack(PACKAGE_VERSION, self.job_id)),
            ("options", _PKG_OPTS.pack(int(self.compression), self.block_size, self.bits_per_key)),
            ("file", _PKG_FILE.pack(self.target_level, self.file_number_seed)),
            ("kvs", _PKG_KVS.pack(self.cf_id, self.seq_watermark)),
            ("wal", _PKG_WAL.pack(self.wal_file_id, self.wal_persisted_offset)),
            ("group", _PKG_GROUP.pack(self.shard_id, self.shard_bits, len(self.nodes))),
        ]
        objs.append(("owner", self.owner.encode()))
        objs.extend((f"node{i}", n.encode()) for i, n in enumerate(self.nodes))
        objs.append(("mem_count", struct.pack("<H", len(self.mems))))
        objs.extend((f"mem{m.mem_id}", m.encode()) for m in self.mems)
        return objs

    def encode(self) -> bytes:
        return b"".join(b for _, b in self.dependency_objects())

    def wire_size(self) -> int:
        return len(self.encode())

    def digest(self) -> bytes:
        return hashlib.sha256(self.encode()).digest()[:8]

    @classmethod
    def decode(cls, buf) -> "FlushMetadataPackage":
        try:
            pos = 0
            version, job = _PKG_HEAD.unpack_from(buf, pos)
            if version != PACKAGE_VERSION:
                raise CorruptMessage(f"package version {version}")
            pos += _PKG_HEAD.size
            comp, bsize, bpk = _PKG_OPTS.unpack_from(buf, pos)
            pos += _PKG_OPTS.size
            level, seed = _PKG_FILE.unpack_from(buf, pos)
            pos += _PKG_FILE.size
            cf, wm = _PKG_KVS.unpack_from(buf, pos)
            pos += _PKG_KVS.size
            walf, walo = _PKG_WAL.unpack_from(buf, pos)
            pos += _PKG_WAL.size
            shard, bits, nnodes = _PKG_GROUP.unpack_from(buf, pos)
            pos += _PKG_GROUP.size
            owner = NodeId.decode(buf[pos : pos + 2])
            pos += 2
            nodes = []
            for _ in range(nnodes):
                nodes.append(NodeId.decode(buf[pos : pos + 2]))
                pos += 2
            (nm,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            mems = []
            for _ in range(nm):
                mems.append(PackageMem(*PackageMem._S.unpack_from(buf, pos)))
                pos += PackageMem._S.size
        except (struct.error, IndexError, ValueError) as e:
            raise CorruptMessage(f"bad package: {e}") from e
        if pos != len(buf):
            raise CorruptMessage("trailing bytes after package")
        return cls(job, owner, shard, bits, tuple(nodes), tuple(mems), bool(comp), bsize, bpk,
                   level, seed, cf, wm, walf, walo)


@dataclass(frozen=True)
class MemtableView:
    """What an owner exposes about one memtable when packaging."""

    mem_id: int
    offloaded: bool
    local_only: bool
    node: NodeId  # DM host, or the owner for local-only memtables
    min_seq: int
    max_seq: int
    index_base: int
    index_len: int
    shard_bases: tuple[int, ...]
    shard_lens: tuple[int, ...]


@dataclass(frozen=True)
class EngineSnapshot:
    owner: NodeId
    shard_bits: int
    persisted_seq: int
    last_seq: int
    wal_file_id: int
    wal_persisted_offset: int
    compression: bool = False
    block_size: int = 4096
    bits_per_key: int = 10
    cf_id: int = 0


def build_package(snap: EngineSnapshot, shard_id: int, mems: Iterable[MemtableView],
                  job_id: int, file_seed: int) -> FlushMetadataPackage:
    mems = sorted(mems, key=lambda m: m.mem_id)
    nodes: list[NodeId] = []
    out = []
    for m in mems:
        if not (m.offloaded or m.local_only):
            raise MemtableNotOffloaded(f"memtable {m.mem_id} is not offloaded")
        if m.max_seq > snap.persisted_seq:
            raise WalNotPersisted(f"memtable {m.mem_id} max_seq {m.max_seq} > persisted {snap.persisted_seq}")
        if m.node not in nodes:
            nodes.append(m.node)
        out.append(PackageMem(m.mem_id, nodes.index(m.node), m.min_seq, m.max_seq, m.index_base,
                              m.index_len, m.shard_bases[shard_id], m.shard_lens[shard_id]))
    return FlushMetadataPackage(job_id, snap.owner, shard_id, snap.shard_bits, tuple(nodes), tuple(out),
                                snap.compression, snap.block_size, snap.bits_per_key, 0, file_seed,
                                snap.cf_id, snap.last_seq, snap.wal_file_id, snap.wal_persisted_offset)


def merge_tuples(blocks: Iterable[bytes]) -> list[KvTuple]:
    """Newest version per key (tombstones kept), sorted by key."""
    newest: dict[bytes, KvTuple] = {}
    for buf in blocks:
        for _, t in iter_tuples(buf):
            cur = newest.get(t.key)
            if cur is None or t.seq > cur.seq:
                newest[t.key] = t
    return [newest[k] for k in sorted(newest)]


def build_sst(pkg: FlushMetadataPackage, blocks: Iterable[bytes]) -> tuple[bytes, list[KvTuple]]:
    tuples = merge_tuples(blocks)
    b = SstBuilder(pkg.target_level, pkg.shard_id if pkg.shard_bits else None, pkg.block_size,
                   pkg.bits_per_key, pkg.compression)
    return b.extend(tuples).finish(), tuples


def file_meta_for(pkg: FlushMetadataPackage, attempt: int, data: bytes, tuples: list[KvTuple],
                  ds: NodeId) -> FileMeta:
    return FileMeta(pkg.file_number_seed + attempt, pkg.target_level, tuples[0].key if tuples else b"",
                    tuples[-1].key if tuples else b"", min((t.seq for t in tuples), default=0),
                    max((t.seq for t in tuples), default=0), len(data), len(tuples),
                    pkg.shard_id if pkg.shard_bits else None, ds, pkg.owner)


# ------------------------------------------------------------- job state
class JobPhase(str, Enum):
    PREPARING = "preparing"
    QUEUED = "queued"
    ASSIGNED = "assigned"
    EXECUTING = "executing"
    COMMITTED = "committed"
    FINALIZED = "finalized"
    ABORTED = "aborted"


_PHASE_ORDER = [JobPhase.PREPARING, JobPhase.QUEUED, JobPhase.ASSIGNED, JobPhase.EXECUTING,
                JobPhase.COMMITTED, JobPhase.FINALIZED]


@dataclass
class FlushJobState:
    job_id: int
    phase: JobPhase = JobPhase.PREPARING
    executor: NodeId | None = None
    deadline: float | None = None
    attempt: int = 0

    def advance(self, to: JobPhase) -> None:
        if to == JobPhase.ABORTED:
            self.phase = to
            self.attempt += 1
            return
        if self.phase == JobPhase.ABORTED and to == JobPhase.QUEUED:
            self.phase = to
            return
        if self.phase not in _PHASE_ORDER or _PHASE_ORDER.index(to) <= _PHASE_ORDER.index(self.phase):
            raise ValueError(f"job {self.job_id}: {self.phase.value} -> {to.value}")
        self.phase = to


# Per-job trace alphabet: P prepare, S assign, A accept, C commit, K ack,
# X abort, T timeout, Z cancelled by owner.
_TRACE_RE = re.compile(r"P(?:S(?:A(?:X|T)|X|T))*(?:SACK(?:CK)*|S?A?Z)")


def trace_is_legal(tokens: str) -> bool:
    return _TRACE_RE.fullmatch(tokens) is not None


# ---------------------------------------------------------------- finalize
class FinalizeTarget(Protocol):
    node_id: NodeId

    def job_status(self, job_id: int) -> str: ...
    def committed_file(self, job_id: int) -> str | None: ...
    def install_flush(self, job_id: int, meta: FileMeta) -> None: ...
    def mark_flushed(self, job_id: int) -> list[int]: ...
    def reclaim(self, mem_ids: list[int]) -> None: ...
    def delete_file(self, meta: FileMeta) -> None: ...


def finalize(target: FinalizeTarget, job_id: int, meta: FileMeta, hook: Callable[[str], bool] | None = None) -> bool:
    """Install a committed flush; returns False when the node crashed part way.

    Raises StaleCommit for a job that is already finalized or unknown; the
    caller answers with an idempotent ACK.
    """
    status = target.job_status(job_id)
    if status != "pending":
        if target.committed_file(job_id) != meta.name:
            target.delete_file(meta)
        raise StaleCommit(f"job {job_id:#x} is {status}")
    if hook and hook("finalize.before_manifest"):
        return False
    target.install_flush(job_id, meta)
    if hook and hook("finalize.after_manifest"):
        return False
    fully = target.mark_flushed(job_id)
    if fully:
        target.reclaim(fully)
    return True


# ----------------------------------------------------------------- executor
@dataclass
class _ExecJob:
    job_id: int
    attempt: int
    mode: ExecutionMode
    scheduler: NodeId
    package: FlushMetadataPackage | None = None
    accepted_at: float = 0.0
    output: FileMeta | None = None


@dataclass
class ExecutorConfig:
    threads: int = 2
    max_queue: int = 8
    heartbeat_us: float = 100_000.0


@dataclass
class ExecutorStats:
    jobs_done: int = 0
    aborts: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    exec_time_us: float = 0.0


class Executor:
    """Flush executor hosted by a compute node or a DM node."""

    def __init__(self, node_id: NodeId, fabric: Fabric, ds_for: Callable[[NodeId], object],
                 local_block: Callable[[NodeId, int, int], bytes] | None = None,
                 config: ExecutorConfig | None = None, faults=None):
        self.node_id = node_id
        self.fabric = fabric
        self.ds_for = ds_for
        self.local_block = local_block
        self.config = config or ExecutorConfig()
        self.faults = faults
        self.stats = ExecutorStats()
        self._jobs: dict[tuple[int, int], _ExecJob] = {}
        self._waiting: list[_ExecJob] = []
        self._running = 0
        self._io_bytes = 0
        self._hb_started = False
        self.scheduler = SCHEDULER_ID

    # telemetry ------------------------------------------------------
    def telemetry(self):
        from .scheduler import LoadTelemetry

        cfg = self.config
        peak = cfg.heartbeat_us / self.fabric.latency.ds_per_byte_us
        return LoadTelemetry(self.node_id, self._running / cfg.threads, self._io_bytes / peak,
                             len(self._waiting) / cfg.max_queue, self.fabric.now,
                             self.fabric.incarnation(self.node_id))

    def start_heartbeats(self) -> None:
        if self._hb_started:
            return
        self._hb_started = True
        self._heartbeat()

    def _heartbeat(self):
        from .scheduler import Heartbeat

        if not self.fabric.is_alive(self.node_id):
            return
        self.fabric.send_message(self.node_id, self.scheduler, Heartbeat(self.telemetry()))
        self._io_bytes = 0
        self.fabric.schedule(self.config.heartbeat_us, self._heartbeat, owner=self.node_id)

    def on_crash(self):
        self._jobs.clear()
        self._waiting.clear()
        self._running = 0
        self._hb_started = False

    def on_restart(self):
        self.start_heartbeats()

    def _hit(self, name: str) -> bool:
        return bool(self.faults and self.faults.hit(name, self.node_id))

    # mailbox --------------------------------------------------------
    def on_message(self, ev) -> bool:
        msg = ev.payload
        if not isinstance(msg, ControlMessage) or msg.kind != ControlKind.ASSIGN:
            return False
        attempt, mode, body = msg.assign_fields()
        key = (msg.job_id, attempt)
        if not body:
            if self._hit("exec.before_accept"):
                return True
            self._jobs[key] = _ExecJob(msg.job_id, attempt, mode, ev.src)
            self._send(ev.src, ControlMessage.accept(msg.job_id, attempt))
            return True
        job = self._jobs.get(key)
        if job is None or job.package is not None:
            return True
        job.package = FlushMetadataPackage.decode(body)
        job.accepted_at = self.fabric.now
        if self._running < self.config.threads:
            self._start(job)
        else:
            self._waiting.append(job)
        return True

    def on_undeliverable(self, ev) -> None:
        msg = ev.payload
        if isinstance(msg, ControlMessage) and msg.kind == ControlKind.COMMIT:
            # nobody will install this output: remove it
            _, meta, _ = msg.commit_fields()
            ds = self.ds_for(meta.ds)
            if ds is not None:
                ds.delete(meta.name)

    def _send(self, dst: NodeId, msg: ControlMessage):
        if self.fabric.is_alive(self.node_id):
            self.fabric.send_message(self.node_id, dst, msg)

    # execution ------------------------------------------------------
    def _start(self, job: _ExecJob):
        self._running += 1
        if self._hit("exec.before_fetch"):
            return
        pkg = job.package
        blocks: list[bytes | None] = [None] * len(pkg.mems)
        remote: list[tuple[int, object, int, int]] = []
        local_bytes = 0
        try:
            for i, m in enumerate(pkg.mems):
                where = pkg.location(m)
                if m.shard_len == 0:
                    blocks[i] = b""
                elif where == self.node_id and where.kind == NodeKind.COMPUTE:
                    blocks[i] = self.local_block(pkg.owner, m.mem_id, pkg.shard_id)
                    local_bytes += m.shard_len
                else:
                    region, off = self.fabric.resolve(where, m.shard_base)
                    if where == self.node_id:
                        blocks[i] = self.fabric.local_read(region, off, m.shard_len)
                        local_bytes += m.shard_len
                    else:
                        remote.append((i, region, off, m.shard_len))
            comps = self.fabric.read_batch(self.node_id, [(r, o, n) for _, r, o, n in remote])
        except (NodeDown, OutOfBounds, KeyError):
            self._abort(job, AbortReason.DM_UNREACHABLE)
            return
        done = max([c.done_at for c in comps], default=self.fabric.now)
        for (i, *_), c in zip(remote, comps):
            blocks[i] = c.data
        hosts = {pkg.location(m) for m in pkg.mems} - {self.node_id}
        incarnations = {h: self.fabric.incarnation(h) for h in hosts}
        lat = self.fabric.latency
        nbytes = sum(len(b) for b in blocks)
        self.stats.bytes_read += nbytes
        cpu = local_bytes * lat.local_copy_per_byte_us + nbytes * lat.merge_per_byte_us

        def fetched():
            for h, inc in incarnations.items():
                if not self.fabric.is_alive(h) or self.fabric.incarnation(h) != inc:
                    self._abort(job, AbortReason.DM_UNREACHABLE)
                    return
            if self._hit("exec.after_fetch"):
                return
            self.fabric.schedule(cpu, lambda: self._write(job, blocks), owner=self.node_id)

        self.fabric.schedule(done - self.fabric.now, fetched, owner=self.node_id)

    def _write(self, job: _ExecJob, blocks):
        pkg = job.package
        data, tuples = build_sst(pkg, blocks)
        ds = self.ds_for(None)
        meta = file_meta_for(pkg, job.attempt, data, tuples, ds.node_id)
        job.output = meta

        def landed(err):
            if err is not None:
                self._abort(job, AbortReason.DS_WRITE_FAILED)
                return
            self._io_bytes += len(data)
            self.stats.bytes_written += len(data)
            if self._hit("exec.after_write"):
                return
            self._finish(job)
            self._send(job.scheduler, ControlMessage.commit(job.job_id, job.attempt, meta,
                                                            self.fabric.now - job.accepted_at))

        try:
            ds.write_sst(self.node_id, meta.name, data, pkg.target_level, landed)
        except NodeDown:
            self._abort(job, AbortReason.DS_WRITE_FAILED)
            return
        self._hit("exec.mid_write")

    def _finish(self, job: _ExecJob):
        self._jobs.pop((job.job_id, job.attempt), None)
        self._running -= 1
        self.stats.jobs_done += 1
        self.stats.exec_time_us += self.fabric.now - job.accepted_at
        if self._waiting and self._running < self.config.threads:
            self._start(self._waiting.pop(0))

    def _abort(self, job: _ExecJob, reason: AbortReason):
        self.stats.aborts += 1
        self._finish(job)
        self.stats.jobs_done -= 1
        self._send(job.scheduler, ControlMessage.abort(job.job_id, reason, job.attempt))


__all__ = [
    "AbortReason", "ControlKind", "ControlMessage", "EngineSnapshot", "ExecutionMode", "Executor",
    "ExecutorConfig", "FILE_NUMBERS_PER_JOB", "FlushJobState", "FlushMetadataPackage", "JobPhase",
    "MemtableView", "PACKAGE_LIMIT", "PackageMem", "build_package", "build_sst", "file_meta_for",
    "finalize", "merge_tuples", "sst_name", "trace_is_legal",
]
