"""Write-ahead log: the authoritative record of unflushed writes.

Record payload (framed with length + CRC32 by :class:`DurableLog`)::

    u64 seq | u8 op | varint key_len | key | value

``MEMTABLE_BEGIN`` records carry the new memtable id in the ``seq`` field so
recovery reproduces the exact memtable split.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator

from .encoding import DurableLog, decode_varint, encode_varint
from .errors import CorruptWal

_HDR = struct.Struct("<QB")


class WalOp(IntEnum):
    PUT = 0
    DELETE = 1
    MEMTABLE_BEGIN = 2


@dataclass(frozen=True)
class WalRecord:
    seq: int
    op: WalOp
    key: bytes = b""
    value: bytes = b""

    def encode(self) -> bytes:
        return _HDR.pack(self.seq, self.op) + encode_varint(len(self.key)) + self.key + self.value

    @classmethod
    def decode(cls, buf) -> "WalRecord":
        try:
            seq, op = _HDR.unpack_from(buf, 0)
            klen, pos = decode_varint(buf, _HDR.size)
            if pos + klen > len(buf):
                raise ValueError("key runs past record")
            return cls(seq, WalOp(op), bytes(buf[pos : pos + klen]), bytes(buf[pos + klen :]))
        except (struct.error, ValueError) as e:
            raise CorruptWal(f"undecodable WAL record: {e}") from e


class Wal:
    def __init__(self, log: DurableLog | None = None):
        self.log = log or DurableLog()
        self.last_seq = 0
        self.persisted_seq = 0
        self.appends = 0

    def append(self, seq: int, key: bytes, value: bytes, tombstone: bool = False) -> None:
        op = WalOp.DELETE if tombstone else WalOp.PUT
        self.log.append(WalRecord(seq, op, key, b"" if tombstone else value).encode())
        self.last_seq = max(self.last_seq, seq)
        self.appends += 1

    def begin_memtable(self, mem_id: int) -> None:
        self.log.append(WalRecord(mem_id, WalOp.MEMTABLE_BEGIN).encode())

    def sync(self) -> None:
        self.log.sync()
        self.persisted_seq = self.last_seq

    @property
    def persisted_offset(self) -> int:
        return self.log.synced_size

    def crash(self) -> None:
        self.log.crash()

    def records(self) -> list[WalRecord]:
        return [WalRecord.decode(r) for r in self.log.records()]

    def by_memtable(self) -> Iterator[tuple[int, list[WalRecord]]]:
        """Yield (mem_id, records) groups in log order."""
        cur, batch = None, []
        for r in self.records():
            if r.op == WalOp.MEMTABLE_BEGIN:
                if cur is not None:
                    yield cur, batch
                cur, batch = r.seq, []
            elif cur is None:
                raise CorruptWal(f"write seq {r.seq} before any memtable marker")
            else:
                batch.append(r)
        if cur is not None:
            yield cur, batch

    def trim_below(self, mem_id: int) -> int:
        """Drop every group for memtables older than ``mem_id``; returns records dropped."""
        keep, dropped, cur = [], 0, None
        for raw in self.log.records():
            r = WalRecord.decode(raw)
            if r.op == WalOp.MEMTABLE_BEGIN:
                cur = r.seq
            if cur is not None and cur < mem_id:
                dropped += 1
            else:
                keep.append(raw)
        if dropped:
            self.log.rewrite(keep)
        return dropped


__all__ = ["Wal", "WalOp", "WalRecord"]
