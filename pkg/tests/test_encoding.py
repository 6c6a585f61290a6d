import pytest
from hypothesis import given
from hypothesis import strategies as st

from dmlsm.ds_storage import FileMeta
from dmlsm.encoding import (
    DurableLog, KvTuple, crc32, decode_tuple, decode_varint, encode_tuple, encode_varint, frame,
    iter_tuples, tuple_size, unframe_all,
)
from dmlsm.errors import CorruptManifest, CorruptWal
from dmlsm.fabric import cn, ds
from dmlsm.manifest import Manifest, ManifestEdit
from dmlsm.wal import Wal, WalOp, WalRecord

tuples = st.builds(KvTuple, st.binary(max_size=40), st.binary(max_size=80), st.integers(0, 2**64 - 1),
                   st.booleans()).map(lambda t: KvTuple(t.key, b"" if t.tombstone else t.value, t.seq, t.tombstone))


@given(st.integers(0, 2**64 - 1))
def test_varint_roundtrip(n):
    buf = encode_varint(n)
    assert decode_varint(b"\x00" + buf, 1) == (n, len(buf) + 1)


def test_varint_small_values():
    assert encode_varint(0) == b"\x00"
    assert encode_varint(127) == b"\x7f"
    assert encode_varint(128) == b"\x80\x01"


@given(tuples)
def test_tuple_roundtrip(t):
    buf = t.encode()
    back, end = decode_tuple(buf)
    assert back == t and end == len(buf)
    if not t.tombstone:
        assert len(buf) == tuple_size(len(t.key), len(t.value))


def test_tombstone_flag_in_length_prefix():
    buf = encode_tuple(b"k", b"ignored", 9, tombstone=True)
    assert buf[1] & 1 == 1
    assert decode_tuple(buf)[0] == KvTuple(b"k", b"", 9, True)


def test_truncated_tuple_rejected():
    with pytest.raises(ValueError):
        decode_tuple(encode_tuple(b"key", b"value", 1)[:-1])


@given(st.lists(tuples, max_size=30))
def test_iter_tuples_offsets(ts):
    buf = b"".join(t.encode() for t in ts)
    got = list(iter_tuples(buf))
    assert [t for _, t in got] == ts
    for off, t in got:
        assert decode_tuple(buf, off)[0] == t


@given(st.lists(st.binary(max_size=50), max_size=20), st.integers(1, 40))
def test_unframe_stops_at_torn_tail(payloads, cut):
    buf = b"".join(frame(p) for p in payloads)
    recs, valid = unframe_all(buf)
    assert recs == payloads and valid == len(buf)
    if buf:
        torn = buf[: max(0, len(buf) - cut)]
        recs, valid = unframe_all(torn)
        assert recs == payloads[: len(recs)]
        assert valid <= len(torn)


def test_unframe_detects_bad_crc():
    buf = bytearray(frame(b"abc") + frame(b"def"))
    buf[-1] ^= 0xFF
    assert unframe_all(bytes(buf))[0] == [b"abc"]
    assert crc32(b"abc") != crc32(b"abd")


def test_durable_log_crash_keeps_synced():
    log = DurableLog()
    log.append(b"one")
    log.sync()
    log.append(b"two")
    log.crash()
    assert log.records() == [b"one"]


def test_durable_log_file_backed(tmp_path):
    path = tmp_path / "log"
    log = DurableLog(path)
    log.append(b"a")
    log.append(b"b")
    log.sync()
    log.append(b"lost")
    again = DurableLog(path)
    assert again.records() == [b"a", b"b"]


def test_durable_log_torn_tail_truncated(tmp_path):
    log = DurableLog(tmp_path / "log")
    for p in (b"r1", b"r2", b"r3"):
        log.append(p)
    log.sync()
    log.corrupt_tail(3)
    assert log.records() == [b"r1", b"r2"]
    assert log.truncated_bytes > 0
    assert DurableLog(tmp_path / "log").records() == [b"r1", b"r2"]


# ------------------------------------------------------------------ wal
def test_wal_record_roundtrip():
    for r in (WalRecord(5, WalOp.PUT, b"k", b"v"), WalRecord(6, WalOp.DELETE, b"k"),
              WalRecord(3, WalOp.MEMTABLE_BEGIN)):
        assert WalRecord.decode(r.encode()) == r


def test_wal_corrupt_record():
    with pytest.raises(CorruptWal):
        WalRecord.decode(b"\x01\x02")


def test_wal_groups_and_trim():
    w = Wal()
    w.begin_memtable(1)
    w.append(1, b"a", b"1")
    w.append(2, b"b", b"", tombstone=True)
    w.begin_memtable(2)
    w.append(3, b"c", b"3")
    w.sync()
    groups = dict(w.by_memtable())
    assert [r.seq for r in groups[1]] == [1, 2]
    assert groups[1][1].op == WalOp.DELETE
    assert w.persisted_seq == 3
    assert w.trim_below(2) == 3
    assert list(dict(w.by_memtable())) == [2]


def test_wal_unsynced_lost_on_crash():
    w = Wal()
    w.begin_memtable(0)
    w.append(1, b"a", b"1")
    w.sync()
    w.append(2, b"b", b"2")
    w.crash()
    assert [r.seq for r in w.records() if r.op != WalOp.MEMTABLE_BEGIN] == [1]


# ------------------------------------------------------------- manifest
def _meta(n, level=0, lo=b"a", hi=b"z"):
    return FileMeta(n, level, lo, hi, 1, 9, 100, 5, None, ds(0), cn(0))


def test_manifest_edit_roundtrip():
    e = ManifestEdit(3, (_meta(1), _meta(2, 1)), ("cn0-000009.sst",), ((4, 0), (5, 1)), 2, 1, 6, 77)
    assert ManifestEdit.decode(e.encode()) == e


def test_manifest_edit_corrupt():
    with pytest.raises(CorruptManifest):
        ManifestEdit.decode(b"\x00" * 5)


def test_manifest_replay_reconstructs_live_set():
    m = Manifest(snapshot_every=1000)
    m.log_and_apply(ManifestEdit(added=(_meta(1), _meta(2)), job_id=10))
    m.log_and_apply(ManifestEdit(added=(_meta(3, 1),), removed=(_meta(1).name,)))
    live = set(m.version.files)
    fresh = Manifest(m.log)
    assert set(fresh.replay().files) == live == {_meta(2).name, _meta(3, 1).name}
    assert fresh.flush_edits == {10: 1}


def test_manifest_snapshot_compacts_log():
    m = Manifest(snapshot_every=4)
    for i in range(10):
        m.log_and_apply(ManifestEdit(added=(_meta(i),), flushed=((i, 0),)))
    assert len(m.log.records()) < 10
    v = Manifest(m.log).replay()
    assert set(v.files) == {_meta(i).name for i in range(10)}
    assert v.is_flushed(3, 0) and not v.is_flushed(3, 1)


def test_manifest_watermark_prunes_flushed_pairs():
    m = Manifest()
    m.log_and_apply(ManifestEdit(flushed=((1, 0), (5, 0))))
    m.log_and_apply(ManifestEdit(wal_watermark=3))
    assert m.version.flushed == {(5, 0)}
    assert m.version.is_flushed(2, 7)


def test_manifest_unsynced_tail_dropped():
    m = Manifest()
    m.log_and_apply(ManifestEdit(added=(_meta(1),)))
    m.log.append(ManifestEdit(added=(_meta(2),)).encode())
    m.crash()
    assert set(Manifest(m.log).replay().files) == {_meta(1).name}
