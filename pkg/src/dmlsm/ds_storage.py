"""SST file format and simulated disaggregated-storage nodes.

On-disk layout, all integers little-endian::

    data block*   u32 count | count x KV tuple | u32 crc32(count..tuples)
    meta block    u8 level | u8 has_shard | u8 shard | u8 compression | u32 entries
                  | u64 min_seq | u64 max_seq | varint len + smallest | varint len + largest
                  | u32 crc32
    index block   u32 nblocks | nblocks x (varint len + first_key | u64 offset | u32 size)
                  | u32 crc32
    bloom block   u32 num_bits | u8 num_hashes | bits | u32 crc32
    footer (48 B) u64 index_off | u32 index_len | u64 bloom_off | u32 bloom_len
                  | u64 meta_off | u32 meta_len | u64 magic | u32 crc32(footer[0:44])

With compression enabled every data-block payload (between the count and the
crc) is XOR-masked: a length-preserving stand-in for a real codec.
"""

from __future__ import annotations

import bisect
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

from .bloom import BloomFilter
from .encoding import KvTuple, crc32, decode_tuple, decode_varint, encode_varint
from .errors import CorruptBlock, DsWriteFailed, FileNotFound
from .fabric import Completion, Fabric, NodeId

SST_MAGIC = 0x4F334C534D
DEFAULT_BLOCK_SIZE = 4096
_FOOTER = struct.Struct("<QIQIQIQ")
FOOTER_SIZE = _FOOTER.size + 4
_META = struct.Struct("<BBBBIQQ")
_IDX_ENTRY = struct.Struct("<QI")
_XOR = 0x5A


def _mask(buf: bytes) -> bytes:
    return bytes(b ^ _XOR for b in buf)


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", crc32(body))


def _check_crc(buf, what: str) -> bytes:
    if len(buf) < 4:
        raise CorruptBlock(f"{what}: too short")
    body, (crc,) = bytes(buf[:-4]), struct.unpack("<I", buf[-4:])
    if crc32(body) != crc:
        raise CorruptBlock(f"{what}: crc mismatch")
    return body


@dataclass(frozen=True)
class FileMeta:
    file_number: int
    level: int
    smallest: bytes
    largest: bytes
    min_seq: int
    max_seq: int
    size: int
    entries: int
    shard_id: int | None = None
    ds: NodeId | None = None
    owner: NodeId | None = None

    @property
    def name(self) -> str:
        return sst_name(self.owner, self.file_number)

    def overlaps(self, lo: bytes | None, hi: bytes | None) -> bool:
        """Inclusive key-range overlap test; None bounds are open."""
        if hi is not None and self.smallest > hi:
            return False
        if lo is not None and self.largest < lo:
            return False
        return True

    def with_level(self, level: int) -> "FileMeta":
        return FileMeta(self.file_number, level, self.smallest, self.largest, self.min_seq,
                        self.max_seq, self.size, self.entries, self.shard_id, self.ds, self.owner)

    def encode(self) -> bytes:
        out = [struct.pack("<QBQQQI", self.file_number, self.level, self.min_seq, self.max_seq,
                           self.size, self.entries)]
        out.append(bytes([0 if self.shard_id is None else 1, self.shard_id or 0]))
        out.append(self.ds.encode() if self.ds else b"\xff\xff")
        out.append(self.owner.encode() if self.owner else b"\xff\xff")
        for k in (self.smallest, self.largest):
            out.append(encode_varint(len(k)) + k)
        return b"".join(out)

    @classmethod
    def decode(cls, buf, pos: int = 0) -> tuple["FileMeta", int]:
        fnum, level, mn, mx, size, entries = struct.unpack_from("<QBQQQI", buf, pos)
        pos += struct.calcsize("<QBQQQI")
        has_shard, shard = buf[pos], buf[pos + 1]
        pos += 2
        dsb, ownb = bytes(buf[pos : pos + 2]), bytes(buf[pos + 2 : pos + 4])
        pos += 4
        keys = []
        for _ in range(2):
            n, pos = decode_varint(buf, pos)
            keys.append(bytes(buf[pos : pos + n]))
            pos += n
        return cls(fnum, level, keys[0], keys[1], mn, mx, size, entries,
                   shard if has_shard else None,
                   None if dsb == b"\xff\xff" else NodeId.decode(dsb),
                   None if ownb == b"\xff\xff" else NodeId.decode(ownb)), pos


def sst_name(owner: NodeId | None, file_number: int) -> str:
    return f"{owner or 'x'}-{file_number:08d}.sst"


class SstBuilder:
    """Accumulates strictly increasing keys into an SST image."""

    def __init__(self, level: int = 0, shard_id: int | None = None,
                 block_size: int = DEFAULT_BLOCK_SIZE, bits_per_key: int = 10,
                 compression: bool = False):
        self.level = level
        self.shard_id = shard_id
        self.block_size = block_size
        self.bits_per_key = bits_per_key
        self.compression = compression
        self._out = bytearray()
        self._block: list[bytes] = []
        self._block_bytes = 0
        self._block_first: bytes | None = None
        self._index: list[tuple[bytes, int, int]] = []
        self._keys: list[bytes] = []
        self._last: bytes | None = None
        self.min_seq = None
        self.max_seq = 0

    def add(self, t: KvTuple) -> None:
        if self._last is not None and t.key <= self._last:
            raise ValueError(f"keys must be strictly increasing: {t.key!r} after {self._last!r}")
        self._last = t.key
        if not self._block:
            self._block_first = t.key
        enc = t.encode()
        self._block.append(enc)
        self._block_bytes += len(enc)
        self._keys.append(t.key)
        self.min_seq = t.seq if self.min_seq is None else min(self.min_seq, t.seq)
        self.max_seq = max(self.max_seq, t.seq)
        if self._block_bytes >= self.block_size:
            self._flush_block()

    def extend(self, tuples: Iterable[KvTuple]) -> "SstBuilder":
        for t in tuples:
            self.add(t)
        return self

    def _flush_block(self):
        if not self._block:
            return
        payload = b"".join(self._block)
        if self.compression:
            payload = _mask(payload)
        body = _with_crc(struct.pack("<I", len(self._block)) + payload)
        self._index.append((self._block_first, len(self._out), len(body)))
        self._out += body
        self._block, self._block_bytes = [], 0

    def __len__(self):
        return len(self._keys)

    @property
    def estimated_size(self) -> int:
        return len(self._out) + self._block_bytes

    def finish(self) -> bytes:
        self._flush_block()
        smallest = self._keys[0] if self._keys else b""
        largest = self._keys[-1] if self._keys else b""
        meta_off = len(self._out)
        meta = _META.pack(self.level, 0 if self.shard_id is None else 1, self.shard_id or 0,
                          int(self.compression), len(self._keys), self.min_seq or 0, self.max_seq)
        meta += encode_varint(len(smallest)) + smallest + encode_varint(len(largest)) + largest
        meta = _with_crc(meta)
        self._out += meta
        idx_off = len(self._out)
        idx = [struct.pack("<I", len(self._index))]
        for first, off, size in self._index:
            idx.append(encode_varint(len(first)) + first + _IDX_ENTRY.pack(off, size))
        idx_blk = _with_crc(b"".join(idx))
        self._out += idx_blk
        bloom_off = len(self._out)
        bloom = BloomFilter.for_keys(self._keys, self.bits_per_key)
        bloom_blk = _with_crc(bloom.encode())
        self._out += bloom_blk
        footer = _FOOTER.pack(idx_off, len(idx_blk), bloom_off, len(bloom_blk), meta_off, len(meta), SST_MAGIC)
        self._out += footer + struct.pack("<I", crc32(footer))
        return bytes(self._out)


@dataclass
class SstStats:
    blocks_read: int = 0
    bloom_negative: int = 0
    range_pruned: int = 0


class SstReader:
    def __init__(self, data: bytes, name: str = "?"):
        self.data = data
        self.name = name
        if len(data) < FOOTER_SIZE:
            raise CorruptBlock(f"{name}: shorter than footer")
        foot = data[-FOOTER_SIZE:]
        body = _check_crc(foot, f"{name} footer")
        idx_off, idx_len, bloom_off, bloom_len, meta_off, meta_len, magic = _FOOTER.unpack(body)
        if magic != SST_MAGIC:
            raise CorruptBlock(f"{name}: bad magic {magic:#x}")
        meta = _check_crc(data[meta_off : meta_off + meta_len], f"{name} meta")
        (self.level, has_shard, shard, comp, self.entries, self.min_seq,
         self.max_seq) = _META.unpack_from(meta, 0)
        self.shard_id = shard if has_shard else None
        self.compression = bool(comp)
        pos = _META.size
        n, pos = decode_varint(meta, pos)
        self.smallest = meta[pos : pos + n]
        pos += n
        n, pos = decode_varint(meta, pos)
        self.largest = meta[pos : pos + n]
        idx = _check_crc(data[idx_off : idx_off + idx_len], f"{name} index")
        (nblocks,) = struct.unpack_from("<I", idx, 0)
        pos = 4
        self.first_keys: list[bytes] = []
        self.handles: list[tuple[int, int]] = []
        for _ in range(nblocks):
            n, pos = decode_varint(idx, pos)
            self.first_keys.append(idx[pos : pos + n])
            pos += n
            self.handles.append(_IDX_ENTRY.unpack_from(idx, pos))
            pos += _IDX_ENTRY.size
        self.bloom = BloomFilter.decode(_check_crc(data[bloom_off : bloom_off + bloom_len], f"{name} bloom"))
        self.stats = SstStats()

    @property
    def num_blocks(self) -> int:
        return len(self.handles)

    def block_size(self, i: int) -> int:
        return self.handles[i][1]

    def read_block(self, i: int) -> list[KvTuple]:
        if not 0 <= i < len(self.handles):
            raise IndexError(f"{self.name}: block {i} out of range [0, {len(self.handles)})")
        off, size = self.handles[i]
        body = _check_crc(self.data[off : off + size], f"{self.name} block {i}")
        (count,) = struct.unpack_from("<I", body, 0)
        payload = body[4:]
        if self.compression:
            payload = _mask(payload)
        out, pos = [], 0
        try:
            for _ in range(count):
                t, pos = decode_tuple(payload, pos)
                out.append(t)
        except ValueError as e:
            raise CorruptBlock(f"{self.name} block {i}: {e}") from e
        self.stats.blocks_read += 1
        return out

    def block_for(self, key: bytes) -> int | None:
        """Index of the only block that can contain ``key``, without reading data."""
        if key < self.smallest or key > self.largest:
            return None
        i = bisect.bisect_right(self.first_keys, key) - 1
        return i if i >= 0 else None

    def get(self, key: bytes, snapshot_seq: int | None = None,
            block_loader: Callable[[int], list[KvTuple]] | None = None) -> KvTuple | None:
        """Bloom-gated, index-guided point lookup (tombstones returned as-is)."""
        if key < self.smallest or key > self.largest:
            self.stats.range_pruned += 1
            return None
        if not self.bloom.may_contain(key):
            self.stats.bloom_negative += 1
            return None
        i = self.block_for(key)
        if i is None:
            return None
        block = (block_loader or self.read_block)(i)
        lo = bisect.bisect_left([t.key for t in block], key)
        if lo < len(block) and block[lo].key == key:
            t = block[lo]
            if snapshot_seq is None or t.seq <= snapshot_seq:
                return t
        return None

    def __iter__(self) -> Iterator[KvTuple]:
        for i in range(self.num_blocks):
            yield from self.read_block(i)

    def range(self, start: bytes, end: bytes | None) -> Iterator[KvTuple]:
        if end is not None and self.smallest >= end:
            return
        if self.largest < start:
            return
        i = max(0, bisect.bisect_right(self.first_keys, start) - 1)
        for b in range(i, self.num_blocks):
            if end is not None and self.first_keys[b] >= end:
                return
            for t in self.read_block(b):
                if t.key < start:
                    continue
                if end is not None and t.key >= end:
                    return
                yield t


@dataclass
class _PendingWrite:
    name: str
    data: bytes
    writer: NodeId
    incarnation: int
    level: int


@dataclass
class DsNode:
    """Durable storage node: files become visible only after their last byte lands."""

    node_id: NodeId
    fabric: Fabric
    backing_dir: str | None = None
    files: dict[str, bytes] = field(default_factory=dict)
    bytes_written_by_level: dict[int, int] = field(default_factory=dict)
    fault_hook: Callable[[str, dict], bool] | None = None

    def __post_init__(self):
        self._pending: dict[int, _PendingWrite] = {}
        self._next_write = 0
        if self.backing_dir:
            os.makedirs(self.backing_dir, exist_ok=True)
            for fn in sorted(os.listdir(self.backing_dir)):
                if fn.endswith(".sst"):
                    with open(os.path.join(self.backing_dir, fn), "rb") as f:
                        self.files[fn] = f.read()

    # fabric handler hooks
    def on_message(self, ev):
        pass

    def on_crash(self):
        self._pending.clear()

    def write_sst(self, writer: NodeId, name: str, data: bytes, level: int,
                  on_done: Callable[[Exception | None], None]) -> int:
        """Stream ``data`` over the writer's storage link; durable after the footer."""
        wid = self._next_write
        self._next_write += 1
        pw = _PendingWrite(name, data, writer, self.fabric.incarnation(writer), level)
        self._pending[wid] = pw

        def landed(comp: Completion):
            p = self._pending.pop(wid, None)
            if p is None or not self.fabric.is_alive(self.node_id):
                return
            if not self.fabric.is_alive(writer) or self.fabric.incarnation(writer) != p.incarnation:
                return  # writer died mid-stream: partial file never becomes visible
            if self.fault_hook and self.fault_hook("ds.write", {"name": name, "writer": writer}):
                on_done(DsWriteFailed(f"injected failure writing {name}"))
                return
            self._make_durable(p)
            on_done(None)

        self.fabric.transfer(writer, self.node_id, len(data), landed)
        return wid

    def _make_durable(self, p: _PendingWrite):
        if self.backing_dir:
            path = os.path.join(self.backing_dir, p.name)
            tmp = path + ".tmp"
            with open(tmp, "wb") as f:
                f.write(p.data)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, path)
        self.files[p.name] = p.data
        self.bytes_written_by_level[p.level] = self.bytes_written_by_level.get(p.level, 0) + len(p.data)

    def abort_writes_from(self, writer: NodeId) -> None:
        for wid in [w for w, p in self._pending.items() if p.writer == writer]:
            del self._pending[wid]

    def list_files(self) -> list[str]:
        return sorted(self.files)

    def read(self, name: str) -> bytes:
        try:
            return self.files[name]
        except KeyError:
            raise FileNotFound(name) from None

    def delete(self, name: str) -> bool:
        existed = self.files.pop(name, None) is not None
        if existed and self.backing_dir:
            try:
                os.remove(os.path.join(self.backing_dir, name))
            except FileNotFoundError:
                pass
        return existed

    def reader(self, name: str) -> SstReader:
        return SstReader(self.read(name), name)


__all__ = [
    "DEFAULT_BLOCK_SIZE", "DsNode", "FOOTER_SIZE", "FileMeta", "SST_MAGIC", "SstBuilder",
    "SstReader", "SstStats", "sst_name",
]
