"""Flush scheduler: executor pool, FIFO dispatch, cost-based placement, recovery."""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterable

from .encoding import DurableLog
from .errors import CorruptLog, NoEligibleExecutor, StaleTelemetry
from .fabric import Fabric, NodeId, NodeKind
from .flush_protocol import (
    AbortReason, ControlKind, ControlMessage, ExecutionMode, FlushJobState, FlushMetadataPackage,
    JobPhase,
)

HEARTBEAT_US = 100_000.0
FRESHNESS_US = 2 * HEARTBEAT_US
ASSIGN_TIMEOUT_US = 500_000.0
MAX_ATTEMPTS = 5
MB = 1 << 20


def _clamp(x: float) -> float:
    return min(1.0, max(0.0, x))


@dataclass(frozen=True)
class LoadTelemetry:
    node: NodeId
    u_cpu: float
    u_io: float
    u_queue: float
    reported_at: float = 0.0
    boot: int = 0  # bumps each time the executor restarts

    def __post_init__(self):
        for name in ("u_cpu", "u_io", "u_queue"):
            object.__setattr__(self, name, _clamp(getattr(self, name)))

    def with_queue(self, extra: float) -> "LoadTelemetry":
        return LoadTelemetry(self.node, self.u_cpu, self.u_io, self.u_queue + extra, self.reported_at, self.boot)


@dataclass(frozen=True)
class SchedulerWeights:
    w_cpu: float = 1.0
    w_io: float = 1.0
    w_queue: float = 1.0

    def __post_init__(self):
        if min(self.w_cpu, self.w_io, self.w_queue) < 0:
            raise ValueError("scheduler weights must be nonnegative")


@dataclass(frozen=True)
class Heartbeat:
    telemetry: LoadTelemetry

    def wire_size(self) -> int:
        return 32


def load_factor(t: LoadTelemetry, w: SchedulerWeights | None = None, now: float | None = None,
                freshness_us: float = FRESHNESS_US) -> float:
    w = w or SchedulerWeights()
    if now is not None and now - t.reported_at > freshness_us:
        raise StaleTelemetry(f"{t.node}: telemetry from {t.reported_at} is stale at {now}")
    return w.w_cpu * t.u_cpu + w.w_io * t.u_io + w.w_queue * t.u_queue


def assignment_cost(job_bytes: float, load: float) -> float:
    if job_bytes <= 0:
        raise ValueError("job_bytes must be > 0")
    return job_bytes * (1 + load)


def mode_for(node: NodeId, owner: NodeId) -> ExecutionMode:
    if node == owner:
        return ExecutionMode.LOCAL
    if node.kind == NodeKind.DM:
        return ExecutionMode.IN_DM
    return ExecutionMode.REMOTE_CN


def select_executor(job_bytes: float, owner: NodeId, pool: Iterable[LoadTelemetry],
                    weights: SchedulerWeights | None = None, now: float | None = None,
                    freshness_us: float = FRESHNESS_US,
                    allowed: Callable[[NodeId, ExecutionMode], bool] | None = None) -> tuple[NodeId, ExecutionMode]:
    """Greedy argmin of cost; ties prefer the owner, then the lower node id."""
    best = None
    for t in pool:
        mode = mode_for(t.node, owner)
        if t.node.kind not in (NodeKind.COMPUTE, NodeKind.DM):
            continue
        if allowed is not None and not allowed(t.node, mode):
            continue
        try:
            load = load_factor(t, weights, now, freshness_us)
        except StaleTelemetry:
            continue
        key = (assignment_cost(job_bytes, load), t.node != owner, t.node)
        if best is None or key < best[0]:
            best = (key, t.node, mode)
    if best is None:
        raise NoEligibleExecutor(f"no eligible executor for job from {owner}")
    return best[1], best[2]


# ----------------------------------------------------------------- log
class LogKind(IntEnum):
    JOB_ENQUEUED = 1
    JOB_ASSIGNED = 2
    COMMIT_RECEIVED = 3
    JOB_FINALIZED = 4
    JOB_PARKED = 5


_REC = struct.Struct("<BQ2sB8s2sI")
_NONE = b"\xff\xff"


@dataclass(frozen=True)
class SchedulerLogRecord:
    kind: LogKind
    job_id: int
    executor: NodeId | None = None
    digest: bytes = bytes(8)
    attempt: int = 0
    owner: NodeId | None = None
    payload: bytes = b""  # the package on enqueue, the COMMIT payload on commit

    def encode(self) -> bytes:
        return _REC.pack(self.kind, self.job_id, self.executor.encode() if self.executor else _NONE,
                         self.attempt, self.digest, self.owner.encode() if self.owner else _NONE,
                         len(self.payload)) + self.payload

    @classmethod
    def decode(cls, buf) -> "SchedulerLogRecord":
        try:
            kind, job, ex, attempt, digest, owner, n = _REC.unpack_from(buf, 0)
            payload = bytes(buf[_REC.size : _REC.size + n])
            if len(payload) != n or len(buf) != _REC.size + n:
                raise CorruptLog("record length mismatch")
            return cls(LogKind(kind), job, None if ex == _NONE else NodeId.decode(ex), digest, attempt,
                       None if owner == _NONE else NodeId.decode(owner), payload)
        except (struct.error, ValueError) as e:
            raise CorruptLog(str(e)) from e


@dataclass
class RecoveredJob:
    job_id: int
    owner: NodeId | None
    package: bytes = b""
    state: LogKind = LogKind.JOB_ENQUEUED
    executor: NodeId | None = None
    attempt: int = 0
    commit: bytes = b""


def recover(log: DurableLog) -> dict[int, RecoveredJob]:
    """Replay the persistent log; a torn tail is dropped by the log itself."""
    jobs: dict[int, RecoveredJob] = {}
    for raw in log.records():
        r = SchedulerLogRecord.decode(raw)
        j = jobs.get(r.job_id)
        if r.kind == LogKind.JOB_ENQUEUED:
            jobs[r.job_id] = RecoveredJob(r.job_id, r.owner, r.payload)
            continue
        if j is None:
            raise CorruptLog(f"{r.kind.name} for unknown job {r.job_id:#x}")
        j.state = r.kind
        if r.kind == LogKind.JOB_ASSIGNED:
            j.executor, j.attempt = r.executor, r.attempt
        elif r.kind == LogKind.COMMIT_RECEIVED:
            j.commit = r.payload
    return jobs


# ------------------------------------------------------------ scheduler
@dataclass
class SchedulerConfig:
    heartbeat_us: float = HEARTBEAT_US
    assign_timeout_us: float = ASSIGN_TIMEOUT_US
    max_attempts: int = MAX_ATTEMPTS
    max_queue_depth: int = 8
    weights: SchedulerWeights = field(default_factory=SchedulerWeights)
    # restrict placement, e.g. to force one execution mode in tests
    allowed_modes: frozenset[ExecutionMode] | None = None
    pinned_executor: NodeId | None = None


@dataclass
class _Job:
    state: FlushJobState
    owner: NodeId
    package: FlushMetadataPackage
    raw: bytes
    commit: ControlMessage | None = None
    enqueued_at: float = 0.0


LOG_HOOKS = tuple(f"sched.{w}_{k.name.lower()}" for k in LogKind for w in ("before", "after"))


class Scheduler:
    def __init__(self, node_id: NodeId, fabric: Fabric, config: SchedulerConfig | None = None,
                 log: DurableLog | None = None, faults=None,
                 delete_file: Callable[[object], None] | None = None):
        self.node_id = node_id
        self.fabric = fabric
        self.config = config or SchedulerConfig()
        self.log = log or DurableLog()
        self.faults = faults
        self.delete_file = delete_file
        self.telemetry: dict[NodeId, LoadTelemetry] = {}
        self.outstanding: dict[NodeId, int] = {}
        self.queue: deque[int] = deque()
        self.jobs: dict[int, _Job] = {}
        self.finished: set[int] = set()
        self.traces: dict[int, list[str]] = {}
        self.assign_order: list[int] = []
        self.assignments: dict[NodeId, int] = {}
        self.parked: list[int] = []
        self.commit_forwards: dict[int, int] = {}
        self._retry_pending = False

    # --------------------------------------------------------- plumbing
    def _hit(self, name: str) -> bool:
        return bool(self.faults and self.faults.hit(name, self.node_id))

    def _append(self, rec: SchedulerLogRecord) -> bool:
        """Durably log ``rec``; False if an injected crash intervened."""
        name = rec.kind.name.lower()
        if self._hit(f"sched.before_{name}"):
            return False
        self.log.append(rec.encode())
        self.log.sync()
        return not self._hit(f"sched.after_{name}")

    def _send(self, dst: NodeId, msg) -> None:
        if self.fabric.is_alive(self.node_id):
            self.fabric.send_message(self.node_id, dst, msg)

    def _trace(self, job_id: int, token: str) -> None:
        self.traces.setdefault(job_id, []).append(token)

    def trace_of(self, job_id: int) -> str:
        return "".join(self.traces.get(job_id, []))

    def on_crash(self) -> None:
        self.log.crash()
        self.telemetry.clear()
        self.outstanding.clear()
        self.queue.clear()
        self.jobs.clear()
        self.finished.clear()
        self._retry_pending = False

    def on_restart(self) -> None:
        self.recover()

    # ---------------------------------------------------------- mailbox
    def on_message(self, ev) -> None:
        msg = ev.payload
        if isinstance(msg, Heartbeat):
            t = msg.telemetry
            prev = self.telemetry.get(t.node)
            self.telemetry[t.node] = LoadTelemetry(t.node, t.u_cpu, t.u_io, t.u_queue, self.fabric.now, t.boot)
            if prev is not None and prev.boot != t.boot:
                self._executor_restarted(t.node)
            if self.queue:
                self.dispatch()
            return
        if not isinstance(msg, ControlMessage):
            return
        handler = {
            ControlKind.PREPARE: self._on_prepare,
            ControlKind.ACCEPT: self._on_accept,
            ControlKind.COMMIT: self._on_commit,
            ControlKind.ABORT: self._on_abort,
            ControlKind.ACK: self._on_ack,
        }.get(msg.kind)
        if handler is not None:
            handler(ev.src, msg)

    def on_undeliverable(self, ev) -> None:
        msg = ev.payload
        if not isinstance(msg, ControlMessage):
            return
        job = self.jobs.get(msg.job_id)
        if job is None:
            return
        if msg.kind == ControlKind.COMMIT and job.state.phase == JobPhase.COMMITTED:
            # owner is down: keep offering the commit until it is back
            self.fabric.schedule(self.config.heartbeat_us, lambda: self._forward_commit(msg.job_id),
                                 owner=self.node_id)
        elif msg.kind == ControlKind.ASSIGN and job.state.executor == ev.dst:
            self._requeue(msg.job_id, job.state.attempt, "T")

    # -------------------------------------------------------- protocol
    def _on_prepare(self, src: NodeId, msg: ControlMessage) -> None:
        if msg.job_id in self.jobs or msg.job_id in self.finished:
            return  # duplicate PREPARE
        pkg = FlushMetadataPackage.decode(msg.payload)
        rec = SchedulerLogRecord(LogKind.JOB_ENQUEUED, msg.job_id, digest=pkg.digest(), owner=src,
                                 payload=msg.payload)
        self.jobs[msg.job_id] = _Job(FlushJobState(msg.job_id), src, pkg, msg.payload,
                                     enqueued_at=self.fabric.now)
        self._trace(msg.job_id, "P")
        if not self._append(rec):
            return
        self.jobs[msg.job_id].state.advance(JobPhase.QUEUED)
        self.queue.append(msg.job_id)
        self.dispatch()

    def _eligible(self, now: float) -> list[LoadTelemetry]:
        out = []
        for node, t in self.telemetry.items():
            extra = self.outstanding.get(node, 0) / self.config.max_queue_depth
            out.append(t.with_queue(extra))
        return out

    def _allowed(self, pkg: FlushMetadataPackage):
        cfg = self.config

        def ok(node: NodeId, mode: ExecutionMode) -> bool:
            if pkg.local_only and mode != ExecutionMode.LOCAL:
                return False
            if cfg.pinned_executor is not None and not pkg.local_only:
                return node == cfg.pinned_executor
            if cfg.allowed_modes is not None and not pkg.local_only and mode not in cfg.allowed_modes:
                return False
            return True

        return ok

    def dispatch(self) -> None:
        now = self.fabric.now
        while self.queue:
            jid = self.queue[0]
            job = self.jobs[jid]
            pkg = job.package
            try:
                node, mode = select_executor(max(pkg.total_bytes, 1) / MB, pkg.owner, self._eligible(now),
                                             self.config.weights, now, 2 * self.config.heartbeat_us,
                                             self._allowed(pkg))
            except NoEligibleExecutor:
                self._retry_later()
                return
            self.queue.popleft()
            st = job.state
            rec = SchedulerLogRecord(LogKind.JOB_ASSIGNED, jid, node, pkg.digest(), st.attempt, job.owner)
            if not self._append(rec):
                return
            st.advance(JobPhase.ASSIGNED)
            st.executor = node
            st.deadline = now + self.config.assign_timeout_us
            self.outstanding[node] = self.outstanding.get(node, 0) + 1
            self.assignments[node] = self.assignments.get(node, 0) + 1
            self.assign_order.append(jid)
            self._trace(jid, "S")
            self._send(node, ControlMessage.assign(jid, st.attempt, mode))
            attempt = st.attempt
            self.fabric.schedule(self.config.assign_timeout_us, lambda j=jid, a=attempt: self._check(j, a),
                                 owner=self.node_id)

    def _executor_restarted(self, node: NodeId) -> None:
        """A restarted node has forgotten its jobs. Work it owned is gone with its
        memtables unless already committed; work it was running goes out again."""
        for jid, job in list(self.jobs.items()):
            st = job.state
            if job.owner == node and st.phase not in (JobPhase.COMMITTED, JobPhase.FINALIZED):
                self._cancel(jid)
                continue
            if st.executor == node and st.phase in (JobPhase.ASSIGNED, JobPhase.EXECUTING):
                self._requeue(jid, st.attempt, "T")

    def _retry_later(self):
        if self._retry_pending:
            return
        self._retry_pending = True

        def again():
            self._retry_pending = False
            self.dispatch()

        self.fabric.schedule(self.config.heartbeat_us, again, owner=self.node_id)

    def _check(self, jid: int, attempt: int) -> None:
        """Assignment watchdog: no ACCEPT in time, or the executor went silent."""
        job = self.jobs.get(jid)
        if job is None or job.state.attempt != attempt:
            return
        st = job.state
        if st.phase == JobPhase.ASSIGNED:
            self._requeue(jid, attempt, "T")
        elif st.phase == JobPhase.EXECUTING:
            t = self.telemetry.get(st.executor)
            fresh = t is not None and self.fabric.now - t.reported_at <= 2 * self.config.heartbeat_us
            if fresh and self.fabric.is_alive(st.executor):
                self.fabric.schedule(self.config.heartbeat_us, lambda: self._check(jid, attempt),
                                     owner=self.node_id)
            else:
                self._requeue(jid, attempt, "T")

    def _requeue(self, jid: int, attempt: int, token: str) -> None:
        job = self.jobs.get(jid)
        if job is None or job.state.attempt != attempt or job.state.phase not in (JobPhase.ASSIGNED, JobPhase.EXECUTING):
            return
        st = job.state
        if st.executor is not None:
            self.outstanding[st.executor] = max(0, self.outstanding.get(st.executor, 0) - 1)
            if token == "T":
                # a silent executor gets no new work until it heartbeats again
                t = self.telemetry.get(st.executor)
                if t is not None and not self.fabric.is_alive(st.executor):
                    del self.telemetry[st.executor]
        self._trace(jid, token)
        st.advance(JobPhase.ABORTED)
        if st.attempt >= self.config.max_attempts:
            self._append(SchedulerLogRecord(LogKind.JOB_PARKED, jid, owner=job.owner))
            self.parked.append(jid)
            del self.jobs[jid]
            return
        st.advance(JobPhase.QUEUED)
        st.executor = None
        self.queue.appendleft(jid)
        self.dispatch()

    def _on_accept(self, src: NodeId, msg: ControlMessage) -> None:
        job = self.jobs.get(msg.job_id)
        if job is None or job.state.phase != JobPhase.ASSIGNED or job.state.executor != src \
                or msg.attempt != job.state.attempt:
            return
        st = job.state
        st.advance(JobPhase.EXECUTING)
        self._trace(msg.job_id, "A")
        self._send(src, ControlMessage.assign(msg.job_id, st.attempt, mode_for(src, job.owner), job.raw))

    def _on_commit(self, src: NodeId, msg: ControlMessage) -> None:
        job = self.jobs.get(msg.job_id)
        attempt, meta, _ = msg.commit_fields()
        if job is None or job.state.phase not in (JobPhase.ASSIGNED, JobPhase.EXECUTING) \
                or job.state.executor != src or attempt != job.state.attempt:
            committed = job.commit.commit_fields()[1].name if job and job.commit else None
            if meta.name != committed and self.delete_file is not None:
                self.delete_file(meta)
            return
        rec = SchedulerLogRecord(LogKind.COMMIT_RECEIVED, msg.job_id, src, job.package.digest(),
                                 attempt, job.owner, msg.payload)
        if not self._append(rec):
            return
        st = job.state
        st.advance(JobPhase.COMMITTED)
        self.outstanding[src] = max(0, self.outstanding.get(src, 0) - 1)
        job.commit = msg
        self._trace(msg.job_id, "C")
        self._forward_commit(msg.job_id)

    def _forward_commit(self, jid: int) -> None:
        job = self.jobs.get(jid)
        if job is None or job.state.phase != JobPhase.COMMITTED:
            return
        self.commit_forwards[jid] = self.commit_forwards.get(jid, 0) + 1
        self._send(job.owner, job.commit)

    def _on_ack(self, src: NodeId, msg: ControlMessage) -> None:
        job = self.jobs.get(msg.job_id)
        if job is None or job.state.phase != JobPhase.COMMITTED:
            return
        if not self._append(SchedulerLogRecord(LogKind.JOB_FINALIZED, msg.job_id, owner=job.owner)):
            return
        job.state.advance(JobPhase.FINALIZED)
        self._trace(msg.job_id, "K")
        del self.jobs[msg.job_id]
        self.finished.add(msg.job_id)

    def _on_abort(self, src: NodeId, msg: ControlMessage) -> None:
        job = self.jobs.get(msg.job_id)
        if job is None:
            return
        reason, attempt = msg.abort_fields()
        if src == job.owner and reason == AbortReason.CANCELLED:
            self._cancel(msg.job_id)
        elif src == job.state.executor and attempt == job.state.attempt:
            self._requeue(msg.job_id, attempt, "X")

    def _cancel(self, jid: int) -> None:
        job = self.jobs.pop(jid)
        if job.state.phase == JobPhase.COMMITTED:
            self.jobs[jid] = job  # too late: the commit stands
            return
        if jid in self.queue:
            self.queue.remove(jid)
        if job.state.executor is not None:
            self.outstanding[job.state.executor] = max(0, self.outstanding.get(job.state.executor, 0) - 1)
        self._trace(jid, "Z")
        self._append(SchedulerLogRecord(LogKind.JOB_PARKED, jid, owner=job.owner))
        self.finished.add(jid)

    # ---------------------------------------------------------- recovery
    def recover(self) -> None:
        """Resume recorded COMMITs; discard incomplete jobs so owners re-PREPARE."""
        jobs = recover(self.log)
        owners = set(self.fabric.nodes(NodeKind.COMPUTE))
        for j in jobs.values():
            if j.state in (LogKind.JOB_FINALIZED, LogKind.JOB_PARKED):
                self.finished.add(j.job_id)
                continue
            if j.state == LogKind.COMMIT_RECEIVED:
                pkg = FlushMetadataPackage.decode(j.package)
                st = FlushJobState(j.job_id, JobPhase.COMMITTED, j.executor, None, j.attempt)
                job = _Job(st, j.owner, pkg, j.package, ControlMessage(ControlKind.COMMIT, j.job_id, j.commit))
                self.jobs[j.job_id] = job
                self._forward_commit(j.job_id)
            else:
                self._append(SchedulerLogRecord(LogKind.JOB_PARKED, j.job_id, owner=j.owner))
                self.finished.add(j.job_id)
                if j.owner is not None:
                    self._send(j.owner, ControlMessage.abort(j.job_id, AbortReason.DISCARDED))
        # owners may have PREPAREs that never reached the log
        for o in sorted(owners):
            self._send(o, ControlMessage.abort(0, AbortReason.SCHEDULER_RESTART))


__all__ = [
    "ASSIGN_TIMEOUT_US", "FRESHNESS_US", "HEARTBEAT_US", "Heartbeat", "LOG_HOOKS", "LoadTelemetry",
    "LogKind", "MAX_ATTEMPTS", "RecoveredJob", "Scheduler", "SchedulerConfig", "SchedulerLogRecord",
    "SchedulerWeights", "assignment_cost", "load_factor", "mode_for", "recover", "select_executor",
]
