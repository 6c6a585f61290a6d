"""Manifest: append-only log of file-set edits, the visibility boundary for SSTs."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .ds_storage import FileMeta
from .encoding import DurableLog, decode_varint, encode_varint
from .errors import CorruptManifest

_EDIT_HDR = struct.Struct("<BQqqqqQ")
_NONE = -1


@dataclass(frozen=True)
class ManifestEdit:
    edit_seq: int = 0
    added: tuple[FileMeta, ...] = ()
    removed: tuple[str, ...] = ()
    flushed: tuple[tuple[int, int], ...] = ()  # (memtable id, shard)
    wal_watermark: int | None = None  # every memtable below this id is fully flushed
    epoch: int | None = None
    next_mem_id: int | None = None
    job_id: int | None = None
    snapshot: bool = False

    def encode(self) -> bytes:
        def opt(v):
            return _NONE if v is None else v

        out = [_EDIT_HDR.pack(int(self.snapshot), self.edit_seq, opt(self.wal_watermark), opt(self.epoch),
                              opt(self.next_mem_id), opt(self.job_id), 0)]
        out.append(encode_varint(len(self.added)))
        out.extend(m.encode() for m in self.added)
        out.append(encode_varint(len(self.removed)))
        for name in self.removed:
            b = name.encode()
            out.append(encode_varint(len(b)) + b)
        out.append(encode_varint(len(self.flushed)))
        out.extend(struct.pack("<QB", mid, s) for mid, s in self.flushed)
        return b"".join(out)

    @classmethod
    def decode(cls, buf) -> "ManifestEdit":
        def opt(v):
            return None if v == _NONE else v

        try:
            snap, seq, wm, epoch, nmid, job, _ = _EDIT_HDR.unpack_from(buf, 0)
            pos = _EDIT_HDR.size
            n, pos = decode_varint(buf, pos)
            added = []
            for _ in range(n):
                m, pos = FileMeta.decode(buf, pos)
                added.append(m)
            n, pos = decode_varint(buf, pos)
            removed = []
            for _ in range(n):
                k, pos = decode_varint(buf, pos)
                removed.append(bytes(buf[pos : pos + k]).decode())
                pos += k
            n, pos = decode_varint(buf, pos)
            flushed = []
            for _ in range(n):
                flushed.append(struct.unpack_from("<QB", buf, pos))
                pos += 9
            if pos != len(buf):
                raise ValueError("trailing bytes")
        except (struct.error, ValueError, UnicodeDecodeError, IndexError) as e:
            raise CorruptManifest(f"bad manifest edit: {e}") from e
        return cls(seq, tuple(added), tuple(removed), tuple(flushed), opt(wm), opt(epoch), opt(nmid),
                   opt(job), bool(snap))


@dataclass
class Version:
    files: dict[str, FileMeta] = field(default_factory=dict)
    flushed: set[tuple[int, int]] = field(default_factory=set)
    wal_watermark: int = 0
    epoch: int = 0
    next_mem_id: int = 0
    edit_seq: int = 0

    def level(self, n: int) -> list[FileMeta]:
        fs = [f for f in self.files.values() if f.level == n]
        if n == 0:
            return sorted(fs, key=lambda f: (-f.max_seq, f.file_number))
        return sorted(fs, key=lambda f: f.smallest)

    def max_level(self) -> int:
        return max((f.level for f in self.files.values()), default=0)

    def level_bytes(self, n: int) -> int:
        return sum(f.size for f in self.files.values() if f.level == n)

    def is_flushed(self, mem_id: int, shard: int) -> bool:
        return mem_id < self.wal_watermark or (mem_id, shard) in self.flushed


class Manifest:
    def __init__(self, log: DurableLog | None = None, snapshot_every: int = 64):
        self.log = log or DurableLog()
        self.snapshot_every = snapshot_every
        self.version = Version()
        self.edits_since_snapshot = 0
        self.edit_count = 0
        self.flush_edits: dict[int, int] = {}  # job id -> edits installing it

    def replay(self) -> Version:
        self.version = Version()
        self.flush_edits = {}
        self.edits_since_snapshot = 0
        for raw in self.log.records():
            edit = ManifestEdit.decode(raw)
            if edit.snapshot:
                self.version = Version()
                self.edits_since_snapshot = 0
            self._apply(edit)
            if not edit.snapshot:
                self.edits_since_snapshot += 1
        return self.version

    def _apply(self, e: ManifestEdit) -> None:
        v = self.version
        for name in e.removed:
            v.files.pop(name, None)
        for m in e.added:
            v.files[m.name] = m
        v.flushed.update((int(a), int(b)) for a, b in e.flushed)
        if e.wal_watermark is not None:
            v.wal_watermark = max(v.wal_watermark, e.wal_watermark)
            v.flushed = {p for p in v.flushed if p[0] >= v.wal_watermark}
        if e.epoch is not None:
            v.epoch = e.epoch
        if e.next_mem_id is not None:
            v.next_mem_id = max(v.next_mem_id, e.next_mem_id)
        v.edit_seq = max(v.edit_seq, e.edit_seq)
        if e.job_id is not None and e.added:
            self.flush_edits[e.job_id] = self.flush_edits.get(e.job_id, 0) + 1

    def log_and_apply(self, edit: ManifestEdit) -> ManifestEdit:
        """Durably append ``edit`` (the commit point) and apply it."""
        v = self.version
        edit = ManifestEdit(v.edit_seq + 1, edit.added, edit.removed, edit.flushed, edit.wal_watermark,
                            edit.epoch, edit.next_mem_id, edit.job_id)
        self.log.append(edit.encode())
        self.log.sync()
        self._apply(edit)
        self.edit_count += 1
        self.edits_since_snapshot += 1
        if self.edits_since_snapshot >= self.snapshot_every:
            self.write_snapshot()
        return edit

    def write_snapshot(self) -> None:
        v = self.version
        snap = ManifestEdit(v.edit_seq, tuple(v.files.values()), (), tuple(sorted(v.flushed)), v.wal_watermark,
                            v.epoch, v.next_mem_id, None, True)
        self.log.rewrite([snap.encode()])
        self.edits_since_snapshot = 0

    def crash(self) -> None:
        self.log.crash()


__all__ = ["Manifest", "ManifestEdit", "Version"]
