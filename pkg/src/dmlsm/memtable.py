"""Memtable split into a link-based index block and per-shard KV blocks.

KV tuples are appended to a contiguous block per shard and never rewritten, so
a block can be copied to remote memory verbatim.  Index nodes hold the
absolute local address of their tuple; after a transfer the remote address is
recovered in O(1) with ``relocate(C, A, B) = C + B - A``.

Serialized index layout (little-endian)::

    u32 magic | u16 version | u32 node_count
    node_count x ( u8 height | u8 shard_id | u64 in_shard_offset | height x u32 link )

Node 0 is the head sentinel (shard_id 0xFF).  Links are node ordinals in
level-0 order; 0xFFFFFFFF is a null link.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterator

from .encoding import KvTuple, decode_tuple, encode_tuple, iter_tuples
from .errors import CorruptIndex, InvalidState, MemtableFull, OutOfRange
from .fabric import NodeId

MAX_HEIGHT = 12
BRANCHING = 4
INDEX_MAGIC = 0x58444E49
INDEX_VERSION = 1
NULL_LINK = 0xFFFFFFFF
HEAD_SHARD = 0xFF
FREQ_MAX = 7
DEFAULT_LIMIT = 64 << 20

_IDX_HDR = struct.Struct("<IHI")
INDEX_HEADER_SIZE = _IDX_HDR.size  # the head node starts here
_IDX_NODE = struct.Struct("<BBQ")


class _NotFound:
    def __repr__(self):
        return "NotFound"

    def __bool__(self):
        return False


NOT_FOUND = _NotFound()


@dataclass(frozen=True)
class ShardConfig:
    k: int = 0

    def __post_init__(self):
        if not 0 <= self.k <= 8:
            raise ValueError(f"shard bits must be in [0, 8], got {self.k}")

    @property
    def shard_count(self) -> int:
        return 1 << self.k


def shard_of(key: bytes, config: ShardConfig | int = 0) -> int:
    """Shard id = integer value of the key's first ``k`` bits."""
    k = config.k if isinstance(config, ShardConfig) else config
    if not key:
        raise ValueError("key must be non-empty")
    if k == 0:
        return 0
    return key[0] >> (8 - k)


def shard_bounds(shard: int, k: int) -> tuple[bytes, bytes | None]:
    """Inclusive lower / exclusive upper key bound of a shard (None = unbounded)."""
    if k == 0:
        return b"", None
    width = 1 << (8 - k)
    lo = bytes([shard * width]) if shard else b""
    hi_byte = (shard + 1) * width
    return lo, (bytes([hi_byte]) if hi_byte < 256 else None)


def shards_for_range(start: bytes, end: bytes | None, k: int) -> range:
    """Shards that can hold keys in ``[start, end)``."""
    if k == 0:
        return range(1)
    lo = shard_of(start, k) if start else 0
    if not end:
        return range(lo, 1 << k)
    hi = shard_of(end, k)
    if hi > lo and end <= shard_bounds(hi, k)[0]:
        hi -= 1
    return range(lo, hi + 1)


def relocate(c: int, local_base: int, remote_base: int, length: int | None = None) -> int:
    """Translate a local tuple address into the transferred copy's address."""
    if c < local_base or (length is not None and c >= local_base + length):
        raise OutOfRange(f"address {c:#x} outside block at {local_base:#x}+{length}")
    return c + remote_base - local_base


class MemtableState(str, Enum):
    ACTIVE = "active"
    IMMUTABLE = "immutable"
    OFFLOADED = "offloaded"
    FLUSHED = "flushed"


_NEXT_STATE = {
    MemtableState.ACTIVE: MemtableState.IMMUTABLE,
    MemtableState.IMMUTABLE: MemtableState.OFFLOADED,
    MemtableState.OFFLOADED: MemtableState.FLUSHED,
}


class LocalAllocator:
    """Bump allocator for simulated compute-node addresses of KV-shard blocks."""

    def __init__(self, start: int = 0x7F00_0000_0000, align: int = 4096):
        self._next = start
        self._align = align

    def allocate(self, reserve: int) -> int:
        base = self._next
        self._next += -(-max(reserve, 1) // self._align) * self._align
        return base


class KvShardBlock:
    __slots__ = ("shard_id", "base", "buf", "sent", "index_bytes")

    def __init__(self, shard_id: int, base: int):
        self.shard_id = shard_id
        self.base = base
        self.buf = bytearray()
        self.sent = 0  # prefix already streamed to remote memory
        self.index_bytes = 0

    @property
    def write_cursor(self) -> int:
        return len(self.buf)

    def append(self, key: bytes, value: bytes, seq: int, tombstone: bool) -> int:
        off = len(self.buf)
        self.buf += encode_tuple(key, value, seq, tombstone)
        return off

    def tuples(self) -> Iterator[tuple[int, KvTuple]]:
        return iter_tuples(self.buf)


class IndexNode:
    __slots__ = ("key", "seq", "tombstone", "kv_ref", "shard_id", "freq", "next", "tuple_len")

    def __init__(self, key, seq, tombstone, kv_ref, shard_id, height, tuple_len):
        self.key = key
        self.seq = seq
        self.tombstone = tombstone
        self.kv_ref = kv_ref
        self.shard_id = shard_id
        self.freq = 0
        self.next: list[IndexNode | None] = [None] * height
        self.tuple_len = tuple_len

    @property
    def height(self) -> int:
        return len(self.next)

    def bump(self):
        if self.freq < FREQ_MAX:
            self.freq += 1


def node_bytes(height: int) -> int:
    # next links + kv pointer + shard/freq byte
    return 8 * height + 8 + 1


class Memtable:
    def __init__(self, mem_id: int, shards: ShardConfig | None = None,
                 limit_bytes: int = DEFAULT_LIMIT, seed: int = 0,
                 allocator: LocalAllocator | None = None):
        self.id = mem_id
        self.shards = shards or ShardConfig()
        self.limit_bytes = limit_bytes
        self.state = MemtableState.ACTIVE
        self._rng = random.Random(seed ^ (mem_id * 0x9E3779B1))
        alloc = allocator or LocalAllocator()
        self.blocks = [KvShardBlock(s, alloc.allocate(limit_bytes)) for s in range(self.shards.shard_count)]
        self._head = IndexNode(b"", 0, False, 0, HEAD_SHARD, MAX_HEIGHT, 0)
        self._level = 1
        self.count = 0
        self.min_seq: int | None = None
        self.max_seq = 0
        self.size_bytes = 0

    # ----------------------------------------------------------- lifecycle
    def transition(self, to: MemtableState) -> None:
        if _NEXT_STATE.get(self.state) != to:
            raise InvalidState(f"memtable {self.id}: {self.state.value} -> {to.value}")
        self.state = to

    def seal(self) -> None:
        if self.state != MemtableState.ACTIVE:
            raise InvalidState(f"memtable {self.id} is {self.state.value}, not active")
        self.state = MemtableState.IMMUTABLE

    # --------------------------------------------------------------- write
    def _random_height(self) -> int:
        h = 1
        while h < MAX_HEIGHT and self._rng.random() < 1.0 / BRANCHING:
            h += 1
        return h

    def would_fit(self, key: bytes, value: bytes) -> bool:
        need = len(key) + len(value) + 20 + node_bytes(MAX_HEIGHT)
        return self.size_bytes + need <= self.limit_bytes

    def put(self, key: bytes, value: bytes, seq: int, tombstone: bool = False, force: bool = False) -> IndexNode:
        if self.state != MemtableState.ACTIVE:
            raise InvalidState(f"put into {self.state.value} memtable {self.id}")
        if seq <= self.max_seq:
            raise ValueError(f"sequence {seq} not above {self.max_seq}")
        if tombstone:
            value = b""
        height = self._random_height()
        tlen = len(encode_tuple(key, value, seq, tombstone))
        cost = tlen + node_bytes(height)
        if not force and self.size_bytes + cost > self.limit_bytes:
            raise MemtableFull(f"memtable {self.id} at {self.size_bytes} of {self.limit_bytes}")
        sid = shard_of(key, self.shards)
        block = self.blocks[sid]
        off = block.append(key, value, seq, tombstone)
        block.index_bytes += node_bytes(height)
        node = IndexNode(key, seq, tombstone, block.base + off, sid, height, tlen)
        self._insert(node)
        self.count += 1
        self.size_bytes += cost
        self.max_seq = seq
        if self.min_seq is None:
            self.min_seq = seq
        return node

    def delete(self, key: bytes, seq: int) -> IndexNode:
        return self.put(key, b"", seq, tombstone=True)

    def _insert(self, node: IndexNode) -> None:
        update = [self._head] * MAX_HEIGHT
        x = self._head
        key, seq = node.key, node.seq
        for lvl in range(self._level - 1, -1, -1):
            nxt = x.next[lvl]
            while nxt is not None and (nxt.key < key or (nxt.key == key and nxt.seq > seq)):
                x = nxt
                nxt = x.next[lvl]
            update[lvl] = x
        h = node.height
        if h > self._level:
            self._level = h
        for lvl in range(h):
            node.next[lvl] = update[lvl].next[lvl]
            update[lvl].next[lvl] = node

    # ---------------------------------------------------------------- read
    def _seek(self, key: bytes, snapshot: int) -> IndexNode | None:
        """First node with node.key >= key and, for equal keys, seq <= snapshot."""
        x = self._head
        for lvl in range(self._level - 1, -1, -1):
            nxt = x.next[lvl]
            while nxt is not None and (nxt.key < key or (nxt.key == key and nxt.seq > snapshot)):
                x = nxt
                nxt = x.next[lvl]
        return x.next[0]

    def find(self, key: bytes, snapshot_seq: int | None = None) -> IndexNode | None:
        if self.state == MemtableState.FLUSHED:
            raise InvalidState(f"memtable {self.id} already flushed")
        snap = snapshot_seq if snapshot_seq is not None else (1 << 64) - 1
        node = self._seek(key, snap)
        if node is None or node.key != key:
            return None
        return node

    def lookup(self, key: bytes, snapshot_seq: int | None = None) -> KvTuple | None:
        """Newest visible version (tombstones included), or None."""
        node = self.find(key, snapshot_seq)
        if node is None:
            return None
        if self.state == MemtableState.ACTIVE:
            node.bump()
        return self.tuple_at(node)

    def get(self, key: bytes, snapshot_seq: int | None = None):
        t = self.lookup(key, snapshot_seq)
        if t is None or t.tombstone:
            return NOT_FOUND
        return t.value

    def tuple_at(self, node: IndexNode) -> KvTuple:
        block = self.blocks[node.shard_id]
        t, _ = decode_tuple(block.buf, node.kv_ref - block.base)
        return t

    def nodes(self) -> Iterator[IndexNode]:
        x = self._head.next[0]
        while x is not None:
            yield x
            x = x.next[0]

    def __iter__(self) -> Iterator[KvTuple]:
        for n in self.nodes():
            yield self.tuple_at(n)

    def __len__(self):
        return self.count

    def range(self, start: bytes, end: bytes | None, snapshot_seq: int | None = None) -> Iterator[KvTuple]:
        """All versions with start <= key < end and seq <= snapshot, sorted."""
        snap = snapshot_seq if snapshot_seq is not None else (1 << 64) - 1
        x = self._seek(start, (1 << 64) - 1)
        while x is not None and (end is None or x.key < end):
            if x.seq <= snap:
                yield self.tuple_at(x)
            x = x.next[0]

    def shard_bytes(self, shard: int) -> int:
        b = self.blocks[shard]
        return len(b.buf) + b.index_bytes

    # -------------------------------------------------------- serialization
    def serialize_index(self) -> bytes:
        if self.state != MemtableState.IMMUTABLE:
            raise InvalidState(f"serialize_index needs an immutable memtable, got {self.state.value}")
        ordinal = {}
        nodes = list(self.nodes())
        for i, n in enumerate(nodes, start=1):
            ordinal[id(n)] = i
        out = [_IDX_HDR.pack(INDEX_MAGIC, INDEX_VERSION, len(nodes) + 1)]

        def links(n: IndexNode, height: int):
            return struct.pack(f"<{height}I", *(ordinal[id(t)] if t is not None else NULL_LINK
                                                for t in n.next[:height]))

        head_h = max(1, self._level) if nodes else 1
        out.append(_IDX_NODE.pack(head_h, HEAD_SHARD, 0))
        out.append(links(self._head, head_h))
        for n in nodes:
            out.append(_IDX_NODE.pack(n.height, n.shard_id, n.kv_ref - self.blocks[n.shard_id].base))
            out.append(links(n, n.height))
        return b"".join(out)

    def rebuild_index(self) -> None:
        """Drop the index and rebuild it by scanning the KV-shard blocks."""
        self._head = IndexNode(b"", 0, False, 0, HEAD_SHARD, MAX_HEIGHT, 0)
        self._level = 1
        for block in self.blocks:
            for off, t in block.tuples():
                tlen = len(encode_tuple(t.key, t.value, t.seq, t.tombstone))
                self._insert(IndexNode(t.key, t.seq, t.tombstone, block.base + off,
                                       block.shard_id, self._random_height(), tlen))

    @classmethod
    def from_tuples(cls, mem_id: int, tuples, shards: ShardConfig | None = None,
                    limit_bytes: int = DEFAULT_LIMIT, seed: int = 0,
                    allocator: LocalAllocator | None = None) -> "Memtable":
        m = cls(mem_id, shards, limit_bytes, seed, allocator)
        for t in tuples:
            m.put(t.key, t.value, t.seq, t.tombstone, force=True)
        return m


@dataclass
class IndexImage:
    """Decoded index block: per-node height, shard, in-shard offset and links."""

    heights: list[int]
    shards: list[int]
    offsets: list[int]
    links: list[list[int]]
    node_offsets: list[int]

    @property
    def node_count(self) -> int:
        return len(self.heights) - 1

    def walk(self) -> Iterator[int]:
        """Node ordinals in level-0 order (excluding the head)."""
        i = self.links[0][0] if self.links[0] else NULL_LINK
        seen = 0
        while i != NULL_LINK:
            yield i
            seen += 1
            if seen > self.node_count:
                raise CorruptIndex("cycle in level-0 chain")
            i = self.links[i][0]


def deserialize_index(buf, shard_count: int | None = None) -> IndexImage:
    if len(buf) < _IDX_HDR.size:
        raise CorruptIndex("index buffer shorter than header")
    magic, version, count = _IDX_HDR.unpack_from(buf, 0)
    if magic != INDEX_MAGIC:
        raise CorruptIndex(f"bad index magic {magic:#x}")
    if version != INDEX_VERSION:
        raise CorruptIndex(f"unsupported index version {version}")
    if count < 1:
        raise CorruptIndex("index without head node")
    pos = _IDX_HDR.size
    heights, shards, offsets, links, node_offsets = [], [], [], [], []
    for i in range(count):
        if pos + _IDX_NODE.size > len(buf):
            raise CorruptIndex(f"truncated at node {i}")
        node_offsets.append(pos)
        h, sid, off = _IDX_NODE.unpack_from(buf, pos)
        pos += _IDX_NODE.size
        if h < 1 or h > MAX_HEIGHT:
            raise CorruptIndex(f"node {i} height {h}")
        end = pos + 4 * h
        if end > len(buf):
            raise CorruptIndex(f"truncated links at node {i}")
        lk = list(struct.unpack_from(f"<{h}I", buf, pos))
        pos = end
        for t in lk:
            if t != NULL_LINK and not 1 <= t < count:
                raise CorruptIndex(f"node {i} links to ordinal {t} (count {count})")
        if i > 0 and shard_count is not None and sid >= shard_count:
            raise CorruptIndex(f"node {i} shard {sid} >= {shard_count}")
        heights.append(h)
        shards.append(sid)
        offsets.append(off)
        links.append(lk)
    if pos != len(buf):
        raise CorruptIndex("trailing bytes after index")
    return IndexImage(heights, shards, offsets, links, node_offsets)


# ----------------------------------------------------------------- transfer
_TR_HDR = struct.Struct("<Q2s2sBH")
_TR_PART = struct.Struct("<QQI")


@dataclass(frozen=True)
class TransferPart:
    local_base: int
    remote_base: int
    length: int


@dataclass(frozen=True)
class TransferRecord:
    """Base addresses of every transferred part of one memtable.

    ``parts[0]`` is the index block; ``parts[1 + s]`` is KV-shard block ``s``.
    """

    memtable_id: int
    owner: NodeId
    dm: NodeId
    shard_bits: int
    parts: tuple[TransferPart, ...]

    @property
    def index(self) -> TransferPart:
        return self.parts[0]

    def shard(self, s: int) -> TransferPart:
        return self.parts[1 + s]

    def remote_address(self, shard: int, kv_ref: int) -> int:
        p = self.shard(shard)
        return relocate(kv_ref, p.local_base, p.remote_base, max(p.length, 1))

    def encode(self) -> bytes:
        out = [_TR_HDR.pack(self.memtable_id, self.owner.encode(), self.dm.encode(),
                            self.shard_bits, len(self.parts))]
        out.extend(_TR_PART.pack(p.local_base, p.remote_base, p.length) for p in self.parts)
        return b"".join(out)

    @classmethod
    def decode(cls, buf, pos: int = 0) -> tuple["TransferRecord", int]:
        mid, owner, dmn, k, n = _TR_HDR.unpack_from(buf, pos)
        pos += _TR_HDR.size
        parts = []
        for _ in range(n):
            parts.append(TransferPart(*_TR_PART.unpack_from(buf, pos)))
            pos += _TR_PART.size
        return cls(mid, NodeId.decode(owner), NodeId.decode(dmn), k, tuple(parts)), pos

    def wire_size(self) -> int:
        return _TR_HDR.size + _TR_PART.size * len(self.parts)


__all__ = [
    "DEFAULT_LIMIT", "FREQ_MAX", "INDEX_HEADER_SIZE", "IndexImage", "IndexNode", "KvShardBlock", "LocalAllocator",
    "MAX_HEIGHT", "Memtable", "MemtableState", "NOT_FOUND", "NULL_LINK", "ShardConfig",
    "TransferPart", "TransferRecord", "deserialize_index", "relocate", "shard_bounds",
    "shard_of", "shards_for_range",
]
