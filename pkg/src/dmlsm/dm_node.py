"""Disaggregated-memory node: hosts offloaded memtables and serves delegated reads."""

from __future__ import annotations

import bisect
import struct
from dataclasses import dataclass, field
from enum import IntEnum

from .bloom import BloomFilter
from .encoding import KvTuple, decode_tuple, decode_varint, encode_varint, iter_tuples
from .errors import CorruptIndex, CorruptMessage, NodeDown, OutOfBounds, UnknownMemtable
from .fabric import Fabric, NodeId, RemoteRegion
from .memtable import (
    INDEX_HEADER_SIZE, MAX_HEIGHT, NULL_LINK, IndexImage, TransferRecord, deserialize_index, relocate,
)

INLINE_THRESHOLD = 256
DEFAULT_WORKERS = 4

_NODE_HDR = struct.Struct("<BBQ")
_REQ_HDR = struct.Struct("<BBHQI")
_REPLY_HDR = struct.Struct("<BBIQ")
_NO_MEM = (1 << 64) - 1


class MsgType(IntEnum):
    DELEGATION_REQUEST = 1
    DELEGATION_REPLY = 2


class Outcome(IntEnum):
    NOT_FOUND = 0
    FOUND_INLINE = 1
    FOUND_INDIRECT = 2
    UNKNOWN_MEMTABLE = 3


@dataclass(frozen=True)
class DelegationRequest:
    key: bytes
    shard_id: int
    mem_ids: tuple[int, ...]  # newest first
    snapshot_seq: int
    reply_to: NodeId
    owner: NodeId
    request_id: int = 0

    def encode(self) -> bytes:
        out = [_REQ_HDR.pack(MsgType.DELEGATION_REQUEST, self.shard_id, len(self.mem_ids),
                             self.snapshot_seq, self.request_id)]
        out.append(self.reply_to.encode() + self.owner.encode())
        out.append(encode_varint(len(self.key)) + self.key)
        out.append(struct.pack(f"<{len(self.mem_ids)}Q", *self.mem_ids))
        return b"".join(out)

    @classmethod
    def decode(cls, buf) -> "DelegationRequest":
        try:
            mtype, shard, n, snap, rid = _REQ_HDR.unpack_from(buf, 0)
            if mtype != MsgType.DELEGATION_REQUEST:
                raise CorruptMessage(f"not a delegation request: type {mtype}")
            pos = _REQ_HDR.size
            reply_to, owner = NodeId.decode(buf[pos : pos + 2]), NodeId.decode(buf[pos + 2 : pos + 4])
            pos += 4
            klen, pos = decode_varint(buf, pos)
            key = bytes(buf[pos : pos + klen])
            pos += klen
            ids = struct.unpack_from(f"<{n}Q", buf, pos)
            if pos + 8 * n != len(buf):
                raise CorruptMessage("trailing bytes in delegation request")
        except (struct.error, ValueError, IndexError) as e:
            raise CorruptMessage(str(e)) from e
        return cls(key, shard, tuple(ids), snap, reply_to, owner, rid)

    def wire_size(self) -> int:
        return _REQ_HDR.size + 4 + len(encode_varint(len(self.key))) + len(self.key) + 8 * len(self.mem_ids)


@dataclass(frozen=True)
class DelegationReply:
    request_id: int
    outcome: Outcome
    served_by: int | None = None
    value: bytes | None = None
    address: int = 0  # absolute DM address of the tuple
    length: int = 0  # tuple length
    seq: int = 0
    served_us: float = 0.0
    searched: int = 0

    def encode(self) -> bytes:
        out = [_REPLY_HDR.pack(MsgType.DELEGATION_REPLY, self.outcome, self.request_id,
                               _NO_MEM if self.served_by is None else self.served_by)]
        if self.outcome in (Outcome.FOUND_INLINE, Outcome.FOUND_INDIRECT):
            out.append(struct.pack("<QIQ", self.address, self.length, self.seq))
        if self.outcome == Outcome.FOUND_INLINE:
            out.append(encode_varint(len(self.value)) + self.value)
        return b"".join(out)

    @classmethod
    def decode(cls, buf) -> "DelegationReply":
        mtype, outcome, rid, served = _REPLY_HDR.unpack_from(buf, 0)
        if mtype != MsgType.DELEGATION_REPLY:
            raise CorruptMessage(f"not a delegation reply: type {mtype}")
        outcome = Outcome(outcome)
        pos = _REPLY_HDR.size
        addr = length = seq = 0
        value = None
        if outcome in (Outcome.FOUND_INLINE, Outcome.FOUND_INDIRECT):
            addr, length, seq = struct.unpack_from("<QIQ", buf, pos)
            pos += 20
        if outcome == Outcome.FOUND_INLINE:
            n, pos = decode_varint(buf, pos)
            value = bytes(buf[pos : pos + n])
        return cls(rid, outcome, None if served == _NO_MEM else served, value, addr, length, seq)

    def wire_size(self) -> int:
        return len(self.encode())


@dataclass(frozen=True)
class OffloadCommit:
    """Sent by the owner once every one-sided write of a memtable has completed."""

    record: TransferRecord

    def wire_size(self) -> int:
        return 1 + self.record.wire_size()


@dataclass(frozen=True)
class OffloadAck:
    owner: NodeId
    mem_id: int
    ok: bool
    blooms: tuple[bytes, ...] = ()
    error: str = ""

    def wire_size(self) -> int:
        return 12 + sum(len(b) for b in self.blooms)


@dataclass(frozen=True)
class Reclaim:
    owner: NodeId
    mem_id: int

    def wire_size(self) -> int:
        return 12


@dataclass(frozen=True)
class Purge:
    """Drop every memtable hosted for ``owner`` (sent by a restarted compute node)."""

    owner: NodeId

    def wire_size(self) -> int:
        return 4


@dataclass
class HostedMemtable:
    owner: NodeId
    mem_id: int
    record: TransferRecord
    index_region: RemoteRegion
    shard_regions: list[RemoteRegion]
    blooms: list[BloomFilter]
    keys: list[bytes]
    seqs: list[int]
    tombs: list[bool]
    shards: list[int]
    addrs: list[int]
    tlens: list[int]
    vlens: list[int]
    searchable: bool = False

    @property
    def regions(self) -> list[RemoteRegion]:
        return [self.index_region, *self.shard_regions]

    def lookup(self, key: bytes, snapshot_seq: int) -> int | None:
        """Position of the newest version of ``key`` with seq <= snapshot."""
        i = bisect.bisect_left(self.keys, key)
        while i < len(self.keys) and self.keys[i] == key:
            if self.seqs[i] <= snapshot_seq:
                return i
            i += 1
        return None


def _rewrite_links(buf: bytearray, image: IndexImage, record: TransferRecord) -> None:
    """Turn ordinal links into index-region byte offsets and in-shard offsets into DM addresses."""
    offs = image.node_offsets
    for i, pos in enumerate(offs):
        h, sid = image.heights[i], image.shards[i]
        addr = 0 if i == 0 else record.shard(sid).remote_base + image.offsets[i]
        struct.pack_into("<Q", buf, pos + 2, addr)
        links = [NULL_LINK if t == NULL_LINK else offs[t] for t in image.links[i]]
        struct.pack_into(f"<{h}I", buf, pos + _NODE_HDR.size, *links)


class DmNode:
    """Fabric handler for a disaggregated-memory node."""

    def __init__(self, node_id: NodeId, fabric: Fabric, workers: int = DEFAULT_WORKERS,
                 inline_threshold: int = INLINE_THRESHOLD, bits_per_key: int = 10):
        self.node_id = node_id
        self.fabric = fabric
        self.inline_threshold = inline_threshold
        self.bits_per_key = bits_per_key
        self.hosted: dict[tuple[NodeId, int], HostedMemtable] = {}
        self._workers = [0.0] * workers
        # regions are registered on behalf of a compute node; remembering who
        # asked lets a purge release offloads that never committed
        self._region_owner: dict[int, NodeId] = {}
        self.executor = None  # flush executor for in-DM mode, attached by the cluster
        self.faults = None
        self.stats = {"delegations": 0, "offloads": 0, "reclaims": 0, "purges": 0}

    # ------------------------------------------------------------ lifecycle
    def on_crash(self):
        self.hosted.clear()
        self._region_owner.clear()
        self._workers = [0.0] * len(self._workers)
        if self.executor is not None:
            self.executor.on_crash()

    def on_restart(self):
        self.hosted.clear()
        if self.executor is not None:
            self.executor.on_restart()

    # --------------------------------------------------------- operations
    def accept_offload(self, record: TransferRecord) -> HostedMemtable:
        """Rebuild a transferred memtable in place and make it searchable."""
        fab = self.fabric
        try:
            index_region, _ = fab.resolve(self.node_id, record.index.remote_base)
            shard_regions = [fab.resolve(self.node_id, record.shard(s).remote_base)[0]
                             for s in range(1 << record.shard_bits)]
        except OutOfBounds as e:
            raise CorruptIndex(f"transfer record points outside hosted regions: {e}") from e
        buf = bytearray(fab.local_read(index_region, 0, record.index.length))
        image = deserialize_index(buf, 1 << record.shard_bits)
        blocks = [fab.local_read(r, 0, record.shard(s).length) for s, r in enumerate(shard_regions)]
        keys, seqs, tombs, shards, addrs, tlens, vlens = [], [], [], [], [], [], []
        for i in image.walk():
            sid, off = image.shards[i], image.offsets[i]
            if off >= len(blocks[sid]):
                raise CorruptIndex(f"node {i} offset {off} beyond shard {sid} block")
            try:
                t, end = decode_tuple(blocks[sid], off)
            except ValueError as e:
                raise CorruptIndex(f"node {i}: {e}") from e
            keys.append(t.key)
            seqs.append(t.seq)
            tombs.append(t.tombstone)
            shards.append(sid)
            addrs.append(relocate(record.shard(sid).local_base + off, record.shard(sid).local_base,
                                  record.shard(sid).remote_base))
            tlens.append(end - off)
            vlens.append(len(t.value))
        blooms = [BloomFilter.for_keys((t.key for _, t in iter_tuples(b)), self.bits_per_key)
                  for b in blocks]
        _rewrite_links(buf, image, record)
        fab.local_write(index_region, 0, buf)
        hm = HostedMemtable(record.owner, record.memtable_id, record, index_region, shard_regions,
                            blooms, keys, seqs, tombs, shards, addrs, tlens, vlens)
        hm.searchable = True
        self.hosted[(record.owner, record.memtable_id)] = hm
        self.stats["offloads"] += 1
        return hm

    def delegated_get(self, req: DelegationRequest) -> DelegationReply:
        snap = req.snapshot_seq
        searched = 0
        for mid in req.mem_ids:
            hm = self.hosted.get((req.owner, mid))
            if hm is None or not hm.searchable:
                return DelegationReply(req.request_id, Outcome.UNKNOWN_MEMTABLE, mid, searched=searched)
            searched += 1
            i = hm.lookup(req.key, snap)
            if i is None:
                continue
            if hm.tombs[i]:
                return DelegationReply(req.request_id, Outcome.NOT_FOUND, mid, seq=hm.seqs[i],
                                       searched=searched)
            addr, tlen = hm.addrs[i], hm.tlens[i]
            if hm.vlens[i] <= self.inline_threshold:
                region, off = self.fabric.resolve(self.node_id, addr)
                t, _ = decode_tuple(self.fabric.local_read(region, off, tlen))
                return DelegationReply(req.request_id, Outcome.FOUND_INLINE, mid, t.value, addr, tlen,
                                       hm.seqs[i], searched=searched)
            return DelegationReply(req.request_id, Outcome.FOUND_INDIRECT, mid, None, addr, tlen,
                                   hm.seqs[i], searched=searched)
        return DelegationReply(req.request_id, Outcome.NOT_FOUND, None, searched=searched)

    def bloom_check(self, owner: NodeId, mem_id: int, shard_id: int, key: bytes) -> bool:
        hm = self.hosted.get((owner, mem_id))
        if hm is None:
            raise UnknownMemtable(f"{owner}/{mem_id}")
        return hm.blooms[shard_id].may_contain(key)

    def reclaim(self, owner: NodeId, mem_id: int) -> int:
        hm = self.hosted.pop((owner, mem_id), None)
        if hm is None:
            raise UnknownMemtable(f"{owner}/{mem_id} is not hosted")
        hm.searchable = False
        self.stats["reclaims"] += 1
        return sum(self.release(r) for r in hm.regions)

    def purge(self, owner: NodeId) -> int:
        freed = 0
        for key in [k for k in self.hosted if k[0] == owner]:
            freed += self.reclaim(*key)
        # regions written for offloads that never committed
        hosted = {r.region_id for hm in self.hosted.values() for r in hm.regions}
        for r in self.fabric.regions_of(self.node_id):
            if r.region_id not in hosted and self._region_owner.get(r.region_id) == owner:
                freed += self.release(r)
        self.stats["purges"] += 1
        return freed

    def allocate(self, owner: NodeId, length: int) -> RemoteRegion:
        region = self.fabric.register_region(self.node_id, max(1, length))
        self._region_owner[region.region_id] = owner
        return region

    def release(self, region: RemoteRegion) -> int:
        self._region_owner.pop(region.region_id, None)
        try:
            return self.fabric.free_region(region)
        except NodeDown:
            return 0

    # ------------------------------------------------------------ mailbox
    def on_message(self, ev):
        msg = ev.payload
        if isinstance(msg, DelegationRequest):
            self._serve(ev.src, msg)
        elif isinstance(msg, OffloadCommit):
            self._on_offload(ev.src, msg)
        elif isinstance(msg, Reclaim):
            try:
                self.reclaim(msg.owner, msg.mem_id)
            except UnknownMemtable:
                pass
        elif isinstance(msg, Purge):
            self.purge(msg.owner)
        elif self.executor is not None:
            self.executor.on_message(ev)

    def on_undeliverable(self, ev):
        if self.executor is not None:
            self.executor.on_undeliverable(ev)

    def _serve(self, src: NodeId, req: DelegationRequest):
        lat = self.fabric.latency
        now = self.fabric.now
        w = min(range(len(self._workers)), key=lambda i: self._workers[i])
        start = max(now, self._workers[w])
        reply = self.delegated_get(req)
        done = start + lat.remote_get_us + lat.remote_get_extra_us * max(0, reply.searched - 1)
        self._workers[w] = done
        self.stats["delegations"] += 1
        reply = DelegationReply(reply.request_id, reply.outcome, reply.served_by, reply.value,
                                reply.address, reply.length, reply.seq, done - now, reply.searched)
        self.fabric.schedule(done - now, lambda: self._reply(req.reply_to, reply), owner=self.node_id)

    def _reply(self, dst: NodeId, msg):
        if self.fabric.is_alive(self.node_id):
            self.fabric.send_message(self.node_id, dst, msg, leg="recv")

    def _on_offload(self, src: NodeId, msg: OffloadCommit):
        record = msg.record
        try:
            if self.faults is not None and self.faults.hit("dm.accept_offload", self.node_id):
                raise CorruptIndex("injected offload failure")
            hm = self.accept_offload(record)
        except (CorruptIndex, OutOfBounds) as e:
            ack = OffloadAck(record.owner, record.memtable_id, False, error=str(e))
            self.fabric.schedule(0.0, lambda: self._reply(src, ack), owner=self.node_id)
            return
        if not self.fabric.is_alive(self.node_id):
            return
        cost = self.fabric.latency.index_rebuild_per_node_us * len(hm.keys)
        hm.searchable = False
        ack = OffloadAck(record.owner, record.memtable_id, True, tuple(b.encode() for b in hm.blooms))

        def publish():
            if self.hosted.get((record.owner, record.memtable_id)) is hm:
                hm.searchable = True
                self._reply(src, ack)

        self.fabric.schedule(cost, publish, owner=self.node_id)


def naive_remote_get(fabric: Fabric, src: NodeId, record: TransferRecord, key: bytes,
                     snapshot_seq: int | None = None) -> tuple[KvTuple | None, int]:
    """Skiplist search over a hosted memtable using only one-sided reads.

    Baseline for the delegated read path: every hop costs a node read plus a
    tuple read.  Advances the simulated clock and returns (tuple, reads).
    """
    snap = (1 << 64) - 1 if snapshot_seq is None else snapshot_seq
    dm = record.dm
    index_region, _ = fabric.resolve(dm, record.index.remote_base)
    node_cap = _NODE_HDR.size + 4 * MAX_HEIGHT
    reads = 0

    def read(region, off, n):
        nonlocal reads
        n = min(n, region.length - off)
        comp = fabric.one_sided_read(src, region, off, n)
        fabric.run_until(comp.done_at)
        reads += 1
        return comp.data

    def read_node(off):
        raw = read(index_region, off, node_cap)
        h, sid, addr = _NODE_HDR.unpack_from(raw, 0)
        return struct.unpack_from(f"<{h}I", raw, _NODE_HDR.size), addr

    def read_tuple(addr):
        region, off = fabric.resolve(dm, addr)
        raw = read(region, off, 64)
        try:
            t, _ = decode_tuple(raw)
        except ValueError:
            klen, p = decode_varint(raw, 0)
            vf, p = decode_varint(raw, p)
            t, _ = decode_tuple(read(region, off, p + 8 + klen + (vf >> 1)))
        return t

    head_links, _ = read_node(INDEX_HEADER_SIZE)
    cur_links = head_links
    cache: dict[int, KvTuple] = {}
    for lvl in range(len(head_links) - 1, -1, -1):
        while True:
            nxt = cur_links[lvl] if lvl < len(cur_links) else NULL_LINK
            if nxt == NULL_LINK:
                break
            links, addr = read_node(nxt)
            t = cache.get(nxt) or read_tuple(addr)
            cache[nxt] = t
            if t.key < key or (t.key == key and t.seq > snap):
                cur_links = links
                continue
            break
    # candidate is the next node at level 0
    nxt = cur_links[0] if cur_links else NULL_LINK
    if nxt == NULL_LINK:
        return None, reads
    if nxt in cache:
        t = cache[nxt]
    else:
        _, addr = read_node(nxt)
        t = read_tuple(addr)
    return (t if t.key == key else None), reads


__all__ = [
    "DEFAULT_WORKERS", "DelegationReply", "DelegationRequest", "DmNode", "HostedMemtable",
    "INLINE_THRESHOLD", "MsgType", "OffloadAck", "OffloadCommit", "Outcome", "Purge", "Reclaim",
    "naive_remote_get",
]
