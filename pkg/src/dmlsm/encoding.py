"""Byte-level helpers: varints, the KV tuple codec, and CRC-framed durable logs.

The KV tuple layout is shared by memtable shard blocks, SST data blocks and
the delegation reply path::

    varint key_len | varint (val_len << 1 | tombstone) | u64 seq | key | value
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from typing import Iterator

U32 = struct.Struct("<I")
U64 = struct.Struct("<Q")
FRAME = struct.Struct("<II")  # payload length, crc32


def crc32(data) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def encode_varint(value: int) -> bytes:
    if value < 0:
        raise ValueError("varint must be non-negative")
    out = bytearray()
    while value >= 0x80:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    out.append(value)
    return bytes(out)


def decode_varint(buf, pos: int = 0) -> tuple[int, int]:
    """Return ``(value, next_pos)``."""
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise ValueError("truncated varint")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise ValueError("varint too long")


@dataclass(frozen=True)
class KvTuple:
    key: bytes
    value: bytes
    seq: int
    tombstone: bool = False

    def encode(self) -> bytes:
        return encode_tuple(self.key, self.value, self.seq, self.tombstone)


def encode_tuple(key: bytes, value: bytes, seq: int, tombstone: bool = False) -> bytes:
    if tombstone:
        value = b""
    return b"".join(
        (
            encode_varint(len(key)),
            encode_varint((len(value) << 1) | int(tombstone)),
            U64.pack(seq),
            key,
            value,
        )
    )


def tuple_size(key_len: int, val_len: int) -> int:
    return len(encode_varint(key_len)) + len(encode_varint(val_len << 1)) + 8 + key_len + val_len


def decode_tuple(buf, pos: int = 0) -> tuple[KvTuple, int]:
    """Decode one tuple at ``pos``; returns the tuple and the position after it."""
    klen, pos = decode_varint(buf, pos)
    vfield, pos = decode_varint(buf, pos)
    vlen, tomb = vfield >> 1, bool(vfield & 1)
    end = pos + 8 + klen + vlen
    if end > len(buf):
        raise ValueError("truncated tuple")
    (seq,) = U64.unpack_from(buf, pos)
    pos += 8
    key = bytes(buf[pos : pos + klen])
    pos += klen
    value = bytes(buf[pos : pos + vlen])
    return KvTuple(key, value, seq, tomb), end


def iter_tuples(buf, start: int = 0, end: int | None = None) -> Iterator[tuple[int, KvTuple]]:
    """Yield ``(offset, tuple)`` for every tuple in ``buf[start:end]``."""
    end = len(buf) if end is None else end
    pos = start
    while pos < end:
        t, nxt = decode_tuple(buf, pos)
        yield pos, t
        pos = nxt


def frame(payload: bytes) -> bytes:
    return FRAME.pack(len(payload), crc32(payload)) + payload


def unframe_all(buf) -> tuple[list[bytes], int]:
    """Split a buffer of framed records.

    Returns the valid records and the byte length of the valid prefix; a torn
    or corrupt record ends the scan.
    """
    records = []
    pos = 0
    while pos + FRAME.size <= len(buf):
        length, crc = FRAME.unpack_from(buf, pos)
        end = pos + FRAME.size + length
        if end > len(buf):
            break
        payload = bytes(buf[pos + FRAME.size : end])
        if crc32(payload) != crc:
            break
        records.append(payload)
        pos = end
    return records, pos


class DurableLog:
    """Append-only log of CRC-framed records with explicit sync.

    Only synced bytes survive :meth:`crash`.  When ``path`` is given the log
    is mirrored to a real file and ``sync`` calls ``os.fsync``.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = os.fspath(path) if path is not None else None
        self._buf = bytearray()
        self._synced = 0
        self.sync_count = 0
        self.truncated_bytes = 0
        if self.path is not None and os.path.exists(self.path):
            with open(self.path, "rb") as f:
                self._buf = bytearray(f.read())
            self._synced = len(self._buf)

    def __len__(self):
        return len(self._buf)

    @property
    def synced_size(self) -> int:
        return self._synced

    def append(self, payload: bytes) -> int:
        offset = len(self._buf)
        self._buf += frame(payload)
        return offset

    def sync(self) -> None:
        if self._synced == len(self._buf):
            return
        if self.path is not None:
            with open(self.path, "ab") as f:
                f.write(self._buf[self._synced :])
                f.flush()
                os.fsync(f.fileno())
        self._synced = len(self._buf)
        self.sync_count += 1

    def crash(self) -> None:
        """Drop everything that was not synced."""
        del self._buf[self._synced :]

    def records(self) -> list[bytes]:
        recs, valid = unframe_all(self._buf)
        if valid < len(self._buf):
            # torn tail: truncate to the last valid record
            self.truncated_bytes += len(self._buf) - valid
            del self._buf[valid:]
            self._synced = min(self._synced, valid)
            if self.path is not None:
                with open(self.path, "r+b") as f:
                    f.truncate(valid)
        return recs

    def raw(self) -> bytes:
        return bytes(self._buf)

    def corrupt_tail(self, nbytes: int) -> None:
        """Test helper: chop bytes off the synced tail to simulate a torn write."""
        cut = max(0, len(self._buf) - nbytes)
        del self._buf[cut:]
        self._synced = min(self._synced, cut)
        if self.path is not None:
            with open(self.path, "r+b") as f:
                f.truncate(cut)

    def rewrite(self, payloads: list[bytes]) -> None:
        """Replace the log contents atomically (used for WAL trimming)."""
        self._buf = bytearray(b"".join(frame(p) for p in payloads))
        if self.path is not None:
            tmp = self.path + ".tmp"
            with open(tmp, "wb") as f:
                f.write(self._buf)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, self.path)
        self._synced = len(self._buf)
