"""Leveled compaction, run locally by the owning engine.

L0 files produced by shard-aligned flushes have disjoint key ranges across
shards, so L0->L1 splits into one independent task per shard.  Without shard
alignment the whole of L0 forms a single serial task.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

from .ds_storage import FileMeta, SstBuilder
from .encoding import KvTuple
from .manifest import Version
from .memtable import shard_of


@dataclass(frozen=True)
class CompactionConfig:
    l0_trigger: int = 4
    l1_target_bytes: int = 256 << 20
    level_multiplier: int = 10
    target_file_bytes: int = 64 << 20
    shard_bits: int = 0
    block_size: int = 4096
    bits_per_key: int = 10
    compression: bool = False
    max_levels: int = 7

    def target_bytes(self, level: int) -> int:
        return self.l1_target_bytes * self.level_multiplier ** (level - 1)


@dataclass(frozen=True)
class CompactionTask:
    level: int  # input level; output goes to level + 1
    inputs: tuple[FileMeta, ...]  # from ``level``
    overlaps: tuple[FileMeta, ...]  # from ``level + 1``
    shard_id: int | None = None

    @property
    def output_level(self) -> int:
        return self.level + 1

    @property
    def all_inputs(self) -> tuple[FileMeta, ...]:
        return self.inputs + self.overlaps

    @property
    def input_bytes(self) -> int:
        return sum(f.size for f in self.all_inputs)

    def key_range(self) -> tuple[bytes, bytes]:
        fs = self.all_inputs
        return min(f.smallest for f in fs), max(f.largest for f in fs)


def _overlapping(files: Iterable[FileMeta], lo: bytes, hi: bytes) -> list[FileMeta]:
    return [f for f in files if f.overlaps(lo, hi)]


def shard_aligned(files: Iterable[FileMeta], shard_bits: int) -> bool:
    if shard_bits == 0:
        return False
    for f in files:
        if f.shard_id is None or shard_of(f.smallest, shard_bits) != f.shard_id \
                or shard_of(f.largest, shard_bits) != f.shard_id:
            return False
    return True


def pick_compactions(v: Version, cfg: CompactionConfig, busy: set[str] = frozenset()) -> list[CompactionTask]:
    """Tasks that may run now; inputs of different tasks never intersect."""
    tasks: list[CompactionTask] = []
    taken = set(busy)

    def free(fs):
        return not any(f.name in taken for f in fs)

    l0 = v.level(0)
    l1 = v.level(1)
    if len(l0) >= cfg.l0_trigger:
        if shard_aligned(l0, cfg.shard_bits) and shard_aligned(l1, cfg.shard_bits):
            by_shard: dict[int, list[FileMeta]] = {}
            for f in l0:
                by_shard.setdefault(f.shard_id, []).append(f)
            for sid in sorted(by_shard):
                ins = by_shard[sid]
                lo, hi = min(f.smallest for f in ins), max(f.largest for f in ins)
                ov = _overlapping(l1, lo, hi)
                if free(ins) and free(ov):
                    tasks.append(CompactionTask(0, tuple(ins), tuple(ov), sid))
                    taken.update(f.name for f in ins + ov)
        elif free(l0):
            lo, hi = min(f.smallest for f in l0), max(f.largest for f in l0)
            ov = _overlapping(l1, lo, hi)
            if free(ov):
                tasks.append(CompactionTask(0, tuple(l0), tuple(ov)))
                taken.update(f.name for f in l0 + ov)
    for level in range(1, cfg.max_levels - 1):
        if v.level_bytes(level) <= cfg.target_bytes(level):
            continue
        for f in v.level(level):
            if f.name in taken:
                continue
            ov = _overlapping(v.level(level + 1), f.smallest, f.largest)
            if free(ov):
                tasks.append(CompactionTask(level, (f,), tuple(ov), f.shard_id))
                taken.update([f.name] + [o.name for o in ov])
                break
    return tasks


def merge_for_compaction(sources: Iterable[Iterable[KvTuple]], drop_tombstones: bool) -> list[KvTuple]:
    newest: dict[bytes, KvTuple] = {}
    for src in sources:
        for t in src:
            cur = newest.get(t.key)
            if cur is None or t.seq > cur.seq:
                newest[t.key] = t
    out = [newest[k] for k in sorted(newest)]
    if drop_tombstones:
        out = [t for t in out if not t.tombstone]
    return out


def build_outputs(tuples: list[KvTuple], level: int, cfg: CompactionConfig,
                  next_number: Callable[[], int]) -> list[tuple[int, bytes, list[KvTuple]]]:
    """Cut merged tuples into files at the target size and at shard boundaries."""
    outputs = []
    builder = None
    chunk: list[KvTuple] = []
    cur_shard = None

    def close():
        nonlocal builder, chunk
        if builder is not None and chunk:
            outputs.append((next_number(), builder.finish(), chunk))
        builder, chunk = None, []

    for t in tuples:
        sid = shard_of(t.key, cfg.shard_bits) if cfg.shard_bits else None
        if builder is not None and (sid != cur_shard or builder.estimated_size >= cfg.target_file_bytes):
            close()
        if builder is None:
            cur_shard = sid
            builder = SstBuilder(level, sid, cfg.block_size, cfg.bits_per_key, cfg.compression)
        builder.add(t)
        chunk.append(t)
    close()
    return outputs


__all__ = [
    "CompactionConfig", "CompactionTask", "build_outputs", "merge_for_compaction", "pick_compactions",
    "shard_aligned",
]
