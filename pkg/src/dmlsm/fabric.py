"""Simulated disaggregated fabric.

A single-threaded discrete-event core.  Nodes register a handler object; the
fabric delivers two-sided messages to ``handler.on_message(event)`` and
undeliverable notices to ``handler.on_undeliverable(event)``.  One-sided
reads and writes touch registered remote regions directly and never run code
on the region owner.

Every transfer occupies its directed link for ``bytes * per_byte`` before the
fixed latency is added, so large writes delay later traffic on the same link.
Time is simulated microseconds; wall-clock time never influences behaviour.
"""

from __future__ import annotations

import bisect
import hashlib
import heapq
from collections import defaultdict
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, Callable

from .errors import CapacityExceeded, ConfigError, InvalidLength, NodeDown, OutOfBounds

DOORBELL_BATCH_MAX = 16
REGION_ALIGN = 64


class NodeKind(str, Enum):
    COMPUTE = "cn"
    DM = "dm"
    DS = "ds"
    SCHEDULER = "sched"


@dataclass(frozen=True, order=True)
class NodeId:
    kind: NodeKind
    index: int = 0

    def __str__(self):
        return f"{self.kind.value}{self.index}"

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        for kind in sorted(NodeKind, key=lambda k: -len(k.value)):
            if text.startswith(kind.value) and text[len(kind.value) :].isdigit():
                return cls(kind, int(text[len(kind.value) :]))
        raise ValueError(f"bad node id {text!r}")

    def encode(self) -> bytes:
        return bytes((list(NodeKind).index(self.kind), self.index))

    @classmethod
    def decode(cls, b) -> "NodeId":
        return cls(list(NodeKind)[b[0]], b[1])


SCHEDULER_ID = NodeId(NodeKind.SCHEDULER, 0)
# never registered, so its timers survive any node crash
HARNESS = NodeId(NodeKind.SCHEDULER, 255)


def cn(i: int) -> NodeId:
    return NodeId(NodeKind.COMPUTE, i)


def dm(i: int) -> NodeId:
    return NodeId(NodeKind.DM, i)


def ds(i: int) -> NodeId:
    return NodeId(NodeKind.DS, i)


@dataclass(frozen=True)
class RemoteRegion:
    owner: NodeId
    region_id: int
    base: int
    length: int

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.base + self.length


@dataclass
class LatencyModel:
    """Latency and cost constants, in microseconds unless noted.

    Network defaults follow the measured read-path breakdown (one-sided read
    6.8, send 7.8, receive 8.6, remote lookup 5.6, bloom check 1.89, local
    lookup 4.7).  ``per_byte_us`` models a 40 Gbps RDMA link.
    """

    one_sided_read_us: float = 6.8
    one_sided_write_us: float = 6.8
    send_us: float = 7.8
    recv_us: float = 8.6
    per_byte_us: float = 0.0002
    ds_bandwidth_mbps: float = 2500.0
    ds_read_us: float = 100.0
    local_get_us: float = 4.7
    remote_get_us: float = 5.6
    remote_get_extra_us: float = 0.5
    bloom_check_us: float = 1.89
    wal_append_us: float = 1.0
    memtable_put_us: float = 1.5
    local_copy_per_byte_us: float = 0.0001
    merge_per_byte_us: float = 0.002
    index_rebuild_per_node_us: float = 0.05
    package_build_us: float = 4700.0
    finalize_us: float = 3200.0
    block_cache_hit_us: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0:
                raise ConfigError(f"{f.name} must be >= 0 (got {v})")
        if self.ds_bandwidth_mbps <= 0:
            raise ConfigError("ds_bandwidth_mbps must be > 0")

    @property
    def ds_per_byte_us(self) -> float:
        # Mbit/s == bits per microsecond
        return 8.0 / self.ds_bandwidth_mbps

    def one_sided_latency(self, write: bool, nbytes: int) -> float:
        fixed = self.one_sided_write_us if write else self.one_sided_read_us
        return fixed + self.per_byte_us * nbytes

    @classmethod
    def from_mapping(cls, values: dict) -> "LatencyModel":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown latency keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in values.items()})


class EventKind(str, Enum):
    ONE_SIDED_READ = "read"
    ONE_SIDED_WRITE = "write"
    MESSAGE = "msg"
    UNDELIVERABLE = "undeliverable"
    TRANSFER = "transfer"
    TIMER = "timer"


@dataclass(frozen=True)
class FabricEvent:
    deliver_at: float
    seq: int
    src: NodeId
    dst: NodeId
    kind: EventKind
    payload_len: int
    issued_at: float
    payload: Any = field(default=None, compare=False, repr=False)

    def trace_line(self) -> str:
        return f"t={self.deliver_at:.3f} src={self.src} dst={self.dst} kind={self.kind.value} len={self.payload_len}"


class _Idle:
    def __repr__(self):
        return "IDLE"

    def __bool__(self):
        return False


IDLE = _Idle()


@dataclass
class Completion:
    done_at: float
    latency: float
    data: bytes | None = None


@dataclass
class _NodeState:
    handler: Any
    alive: bool = True
    memory_budget: int | None = None
    allocated: int = 0
    next_addr: int = 0x1000_0000
    incarnation: int = 0


class Fabric:
    def __init__(self, latency: LatencyModel | None = None, trace: bool = False,
                 window_us: float = 1000.0):
        self.latency = latency or LatencyModel()
        self.now = 0.0
        self._heap: list[tuple[float, int, FabricEvent, Callable | None]] = []
        self._seq = 0
        self._nodes: dict[NodeId, _NodeState] = {}
        self._regions: dict[NodeId, dict[int, tuple[RemoteRegion, bytearray]]] = defaultdict(dict)
        self._region_bases: dict[NodeId, list[tuple[int, int]]] = defaultdict(list)
        self._next_region_id = 1
        self._busy_until: dict[tuple, float] = defaultdict(float)
        self._last_delivery: dict[tuple[NodeId, NodeId], float] = defaultdict(float)
        self.trace_enabled = trace
        self.trace: list[str] = []
        self.window_us = window_us
        self.link_bytes: dict[tuple[NodeId, NodeId], int] = defaultdict(int)
        self.link_windows: dict[tuple[str, int], float] = defaultdict(float)
        self.charged_latency: dict[tuple[NodeId, NodeId], float] = defaultdict(float)
        self.op_counts: dict[str, int] = defaultdict(int)

    # ------------------------------------------------------------------ nodes
    def register_node(self, node: NodeId, handler: Any = None, memory_budget: int | None = None):
        if node in self._nodes:
            raise ValueError(f"node {node} already registered")
        self._nodes[node] = _NodeState(handler, memory_budget=memory_budget)

    def set_handler(self, node: NodeId, handler: Any):
        self._nodes[node].handler = handler

    def nodes(self, kind: NodeKind | None = None) -> list[NodeId]:
        return sorted(n for n in self._nodes if kind is None or n.kind == kind)

    def is_alive(self, node: NodeId) -> bool:
        st = self._nodes.get(node)
        return st is not None and st.alive

    def incarnation(self, node: NodeId) -> int:
        return self._nodes[node].incarnation

    def crash(self, node: NodeId) -> None:
        """Seal the node's mailbox; its regions stay allocated but unreachable."""
        st = self._nodes[node]
        st.alive = False
        h = st.handler
        if h is not None and hasattr(h, "on_crash"):
            h.on_crash()

    def restart(self, node: NodeId, wipe_memory: bool = True) -> None:
        st = self._nodes[node]
        if wipe_memory:
            for rid in list(self._regions[node]):
                self._drop_region(node, rid)
        st.alive = True
        st.incarnation += 1
        h = st.handler
        if h is not None and hasattr(h, "on_restart"):
            h.on_restart()

    def _require_alive(self, *nodes: NodeId):
        for n in nodes:
            if n not in self._nodes:
                raise KeyError(f"unknown node {n}")
            if not self._nodes[n].alive:
                raise NodeDown(n)

    # ---------------------------------------------------------------- regions
    def register_region(self, owner: NodeId, length: int) -> RemoteRegion:
        if length <= 0:
            raise InvalidLength(f"region length must be > 0 (got {length})")
        self._require_alive(owner)
        st = self._nodes[owner]
        if st.memory_budget is not None and st.allocated + length > st.memory_budget:
            raise CapacityExceeded(
                f"{owner}: {st.allocated} + {length} exceeds budget {st.memory_budget}"
            )
        base = st.next_addr
        st.next_addr += -(-length // REGION_ALIGN) * REGION_ALIGN
        region = RemoteRegion(owner, self._next_region_id, base, length)
        self._next_region_id += 1
        st.allocated += length
        # storage grows lazily; unwritten bytes read as zeros
        self._regions[owner][region.region_id] = (region, bytearray())
        bisect.insort(self._region_bases[owner], (base, region.region_id))
        return region

    def free_region(self, region: RemoteRegion) -> int:
        if region.region_id not in self._regions[region.owner]:
            return 0
        return self._drop_region(region.owner, region.region_id)

    def _drop_region(self, owner: NodeId, rid: int) -> int:
        region, _ = self._regions[owner].pop(rid)
        self._region_bases[owner].remove((region.base, rid))
        self._nodes[owner].allocated -= region.length
        return region.length

    def allocated_bytes(self, owner: NodeId) -> int:
        return self._nodes[owner].allocated

    def regions_of(self, owner: NodeId) -> list[RemoteRegion]:
        return [r for r, _ in self._regions[owner].values()]

    def resolve(self, owner: NodeId, addr: int) -> tuple[RemoteRegion, int]:
        """Map an absolute address in ``owner``'s space to (region, offset)."""
        bases = self._region_bases[owner]
        i = bisect.bisect_right(bases, (addr, float("inf"))) - 1
        if i >= 0:
            region = self._regions[owner][bases[i][1]][0]
            if region.contains(addr):
                return region, addr - region.base
        raise OutOfBounds(f"address {addr:#x} not inside any region of {owner}")

    def _storage(self, region: RemoteRegion) -> bytearray:
        entry = self._regions[region.owner].get(region.region_id)
        if entry is None or entry[0] != region:
            raise OutOfBounds(f"region {region.region_id} on {region.owner} is not registered")
        return entry[1]

    def _check_bounds(self, region: RemoteRegion, offset: int, length: int):
        if offset < 0 or length < 0 or offset + length > region.length:
            raise OutOfBounds(
                f"[{offset}, {offset + length}) outside region of length {region.length}"
            )

    def _store(self, region: RemoteRegion, offset: int, data) -> None:
        buf = self._storage(region)
        end = offset + len(data)
        if end > len(buf):
            buf.extend(bytes(end - len(buf)))
        buf[offset:end] = data

    def _load(self, region: RemoteRegion, offset: int, length: int) -> bytes:
        buf = self._storage(region)
        chunk = bytes(buf[offset : offset + length])
        if len(chunk) < length:
            chunk += bytes(length - len(chunk))
        return chunk

    def local_read(self, region: RemoteRegion, offset: int, length: int) -> bytes:
        """Owner-side read of its own region (no fabric traffic)."""
        self._require_alive(region.owner)
        self._check_bounds(region, offset, length)
        return self._load(region, offset, length)

    def local_write(self, region: RemoteRegion, offset: int, data) -> None:
        self._require_alive(region.owner)
        self._check_bounds(region, offset, len(data))
        self._store(region, offset, data)

    # ---------------------------------------------------------- event core
    def _push(self, at: float, src: NodeId, dst: NodeId, kind: EventKind, nbytes: int,
              payload=None, callback: Callable | None = None) -> FabricEvent:
        self._seq += 1
        ev = FabricEvent(at, self._seq, src, dst, kind, nbytes, self.now, payload)
        heapq.heappush(self._heap, (at, self._seq, ev, callback))
        return ev

    def _occupy(self, link: tuple, nbytes: int, per_byte: float) -> tuple[float, float]:
        start = max(self.now, self._busy_until[link])
        end = start + nbytes * per_byte
        self._busy_until[link] = end
        return start, end

    def link_backlog(self, link: tuple) -> float:
        return max(0.0, self._busy_until[link] - self.now)

    def _account(self, src: NodeId, dst: NodeId, nbytes: int, start: float, end: float):
        if nbytes <= 0:
            return
        self.link_bytes[(src, dst)] += nbytes
        cls = link_class(src, dst)
        w = self.window_us
        first, last = int(start // w), int(end // w)
        if first == last or end <= start:
            self.link_windows[(cls, first)] += nbytes
            return
        span = end - start
        for idx in range(first, last + 1):
            lo, hi = max(start, idx * w), min(end, (idx + 1) * w)
            if hi > lo:
                self.link_windows[(cls, idx)] += nbytes * (hi - lo) / span

    def schedule(self, delay: float, callback: Callable[[], Any], owner: NodeId | None = None) -> FabricEvent:
        """Run ``callback`` after ``delay`` µs.  Timers of crashed owners are dropped."""
        owner = owner or HARNESS
        return self._push(self.now + max(0.0, delay), owner, owner, EventKind.TIMER, 0,
                          payload=self._incarnation_of(owner), callback=callback)

    def _incarnation_of(self, node: NodeId):
        st = self._nodes.get(node)
        return st.incarnation if st else 0

    # ------------------------------------------------------- one-sided ops
    def one_sided_write(self, src: NodeId, region: RemoteRegion, offset: int, data,
                        on_complete: Callable[[Completion], Any] | None = None) -> Completion:
        self._require_alive(src, region.owner)
        self._check_bounds(region, offset, len(data))
        self._store(region, offset, data)
        n = len(data)
        start, end = self._occupy((src, region.owner), n, self.latency.per_byte_us)
        done = end + self.latency.one_sided_write_us
        self._account(src, region.owner, n, start, end)
        comp = Completion(done, done - self.now)
        self.charged_latency[(src, region.owner)] += comp.latency
        self.op_counts["one_sided_write"] += 1
        cb = (lambda ev: on_complete(comp)) if on_complete else None
        self._push(done, src, region.owner, EventKind.ONE_SIDED_WRITE, n, callback=cb)
        return comp

    def one_sided_read(self, src: NodeId, region: RemoteRegion, offset: int, length: int) -> Completion:
        return self.read_batch(src, [(region, offset, length)])[0]

    def read_batch(self, src: NodeId, requests: list[tuple[RemoteRegion, int, int]]) -> list[Completion]:
        """Post reads with doorbell batching.

        Each batch of up to 16 reads pays the fixed read latency once; the
        payload of every read is still charged per byte.  Returns one
        completion per request; all reads in a batch complete together.
        """
        out: list[Completion] = []
        lat = self.latency
        batch_start = self.now
        for b in range(0, len(requests), DOORBELL_BATCH_MAX):
            batch = requests[b : b + DOORBELL_BATCH_MAX]
            datas = []
            end = batch_start
            for region, offset, length in batch:
                self._require_alive(src, region.owner)
                self._check_bounds(region, offset, length)
                datas.append(self._load(region, offset, length))
                s, e = self._occupy((region.owner, src), length, lat.per_byte_us)
                self._account(region.owner, src, length, s, e)
                end = max(end, e)
            done = end + lat.one_sided_read_us
            for (region, _, length), data in zip(batch, datas):
                comp = Completion(done, done - self.now, data)
                out.append(comp)
                self._push(done, src, region.owner, EventKind.ONE_SIDED_READ, length)
            self.charged_latency[(src, batch[0][0].owner)] += done - batch_start
            self.op_counts["one_sided_read"] += len(batch)
            self.op_counts["doorbell"] += 1
            batch_start = done
        return out

    # ------------------------------------------------------------ messages
    def send_message(self, src: NodeId, dst: NodeId, msg: Any, payload_len: int | None = None,
                     leg: str = "send") -> FabricEvent:
        """Two-sided send; FIFO per ordered (src, dst) pair.

        ``leg="recv"`` marks the return leg of an RPC, which is charged the
        receive latency (completion polling folded in) instead of send.
        """
        if src not in self._nodes or dst not in self._nodes:
            raise KeyError(f"unregistered endpoint {src} -> {dst}")
        self._require_alive(src)
        n = payload_len if payload_len is not None else _payload_len(msg)
        lat = self.latency
        fixed = lat.recv_us if leg == "recv" else lat.send_us
        start, end = self._occupy((src, dst), n, lat.per_byte_us)
        at = max(end + fixed, self._last_delivery[(src, dst)])
        self._last_delivery[(src, dst)] = at
        self._account(src, dst, n, start, end)
        self.charged_latency[(src, dst)] += at - self.now
        self.op_counts["message"] += 1
        return self._push(at, src, dst, EventKind.MESSAGE, n, payload=msg)

    # ------------------------------------------------------- bulk transfer
    def transfer(self, src: NodeId, dst: NodeId, nbytes: int,
                 on_complete: Callable[[Completion], Any] | None = None,
                 fixed_us: float = 0.0) -> Completion:
        """Bandwidth-capped bulk transfer to or from a storage node.

        The link is the non-storage endpoint's connection to the storage tier,
        so all of a node's DS traffic shares one ``ds_bandwidth_mbps`` pipe per
        direction.
        """
        self._require_alive(src, dst)
        if dst.kind == NodeKind.DS:
            link = (src, "ds-egress")
        elif src.kind == NodeKind.DS:
            link = (dst, "ds-ingress")
        else:
            link = (src, dst)
        start, end = self._occupy(link, nbytes, self.latency.ds_per_byte_us)
        done = end + fixed_us
        self._account(src, dst, nbytes, start, end)
        comp = Completion(done, done - self.now)
        self.charged_latency[(src, dst)] += comp.latency
        self.op_counts["transfer"] += 1
        cb = (lambda ev: on_complete(comp)) if on_complete else None
        self._push(done, src, dst, EventKind.TRANSFER, nbytes, callback=cb)
        return comp

    # -------------------------------------------------------------- clock
    def pending(self) -> int:
        return len(self._heap)

    def next_time(self) -> float | None:
        return self._heap[0][0] if self._heap else None

    def advance_clock(self):
        """Deliver every event at the minimum pending ``deliver_at``.

        Returns the delivered batch (in issue order) or ``IDLE``.
        """
        if not self._heap:
            return IDLE
        t = self._heap[0][0]
        batch = []
        while self._heap and self._heap[0][0] == t:
            batch.append(heapq.heappop(self._heap))
        self.now = max(self.now, t)
        delivered = []
        for _, _, ev, cb in batch:
            ev = self._dispatch(ev, cb)
            if ev is not None:
                delivered.append(ev)
        return delivered

    def _dispatch(self, ev: FabricEvent, cb):
        if ev.kind == EventKind.TIMER:
            st = self._nodes.get(ev.src)
            if st is not None and (not st.alive or st.incarnation != ev.payload):
                return None
            cb()
            return ev
        if self.trace_enabled:
            self.trace.append(ev.trace_line())
        if ev.kind == EventKind.MESSAGE:
            st = self._nodes[ev.dst]
            if not st.alive:
                src_st = self._nodes[ev.src]
                if src_st.alive:
                    self._push(self.now + self.latency.send_us, ev.dst, ev.src,
                               EventKind.UNDELIVERABLE, 0, payload=ev)
                return ev
            if st.handler is not None:
                st.handler.on_message(ev)
        elif ev.kind == EventKind.UNDELIVERABLE:
            st = self._nodes[ev.dst]
            if st.alive and st.handler is not None and hasattr(st.handler, "on_undeliverable"):
                st.handler.on_undeliverable(ev.payload)
        elif cb is not None:
            cb(ev)
        return ev

    def run_until(self, t: float) -> None:
        while self._heap and self._heap[0][0] <= t:
            self.advance_clock()
        self.now = max(self.now, t)

    def sleep(self, us: float) -> None:
        self.run_until(self.now + us)

    def run_while(self, cond: Callable[[], bool], deadline: float | None = None) -> bool:
        """Pump events while ``cond()`` holds.

        Returns True once the condition clears, False on idle or deadline.
        """
        while cond():
            if not self._heap:
                return False
            if deadline is not None and self._heap[0][0] > deadline:
                self.now = max(self.now, deadline)
                return False
            self.advance_clock()
        return True

    def run_until_idle(self, max_time: float | None = None, max_events: int | None = None) -> int:
        n = 0
        while self._heap:
            if max_time is not None and self._heap[0][0] > max_time:
                break
            if max_events is not None and n >= max_events:
                break
            self.advance_clock()
            n += 1
        return n

    # ------------------------------------------------------------- reports
    def trace_digest(self) -> str:
        return hashlib.sha256("\n".join(self.trace).encode()).hexdigest()

    def dump_trace(self, path) -> None:
        with open(path, "w") as f:
            for line in self.trace:
                f.write(line + "\n")

    def traffic_by_class(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for (s, d), n in self.link_bytes.items():
            out[link_class(s, d)] += n
        return dict(out)

    def total_bytes(self) -> int:
        return sum(self.link_bytes.values())

    def window_series(self, cls: str) -> dict[int, float]:
        return {idx: v for (c, idx), v in self.link_windows.items() if c == cls}

    def peak_window(self, cls: str) -> float:
        series = self.window_series(cls)
        return max(series.values()) if series else 0.0


def link_class(src: NodeId, dst: NodeId) -> str:
    return f"{src.kind.value}->{dst.kind.value}"


def _payload_len(msg) -> int:
    if isinstance(msg, (bytes, bytearray, memoryview)):
        return len(msg)
    n = getattr(msg, "wire_size", None)
    if callable(n):
        return n()
    if isinstance(n, int):
        return n
    return 64


__all__ = [
    "Completion", "DOORBELL_BATCH_MAX", "EventKind", "Fabric", "FabricEvent", "HARNESS", "IDLE",
    "LatencyModel", "NodeId", "NodeKind", "RemoteRegion", "SCHEDULER_ID", "cn", "dm", "ds",
    "link_class",
]
