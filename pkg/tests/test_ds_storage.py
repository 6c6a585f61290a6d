import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmlsm.encoding import KvTuple
from dmlsm.errors import CorruptBlock, DsWriteFailed, FileNotFound
from dmlsm.fabric import Fabric, NodeKind, cn, ds
from dmlsm.ds_storage import DsNode, FileMeta, SstBuilder, SstReader, sst_name


def _tuples(rng, n, vsize=(0, 200)):
    keys = sorted({rng.randbytes(rng.randrange(1, 12)) for _ in range(n)})
    out = []
    for k in keys:
        dead = rng.random() < 0.1
        value = b"" if dead else rng.randbytes(rng.randrange(*vsize))
        out.append(KvTuple(k, value, rng.randrange(1, 10**6), dead))
    return out


def _ds_fabric(backing_dir=None):
    f = Fabric()
    f.register_node(cn(0))
    node = DsNode(ds(0), f, backing_dir)
    f.register_node(ds(0), node)
    return f, node


def _write(f, node, name, data, level=0, writer=None):
    result = []
    node.write_sst(writer or cn(0), name, data, level, result.append)
    return result


@pytest.mark.parametrize("compression", [False, True])
def test_block_round_trip(rng, compression):
    ts = _tuples(rng, 2000)
    data = SstBuilder(1, 3, block_size=1024, compression=compression).extend(ts).finish()
    r = SstReader(data)
    assert r.num_blocks > 10
    got = [t for i in range(r.num_blocks) for t in r.read_block(i)]
    assert got == ts
    assert (r.level, r.shard_id, r.entries) == (1, 3, len(ts))
    assert (r.smallest, r.largest) == (ts[0].key, ts[-1].key)
    assert (r.min_seq, r.max_seq) == (min(t.seq for t in ts), max(t.seq for t in ts))


def test_compression_masks_payload():
    ts = [KvTuple(b"key%03d" % i, b"plaintext-value", i) for i in range(50)]
    plain = SstBuilder().extend(ts).finish()
    masked = SstBuilder(compression=True).extend(ts).finish()
    assert b"plaintext-value" in plain and b"plaintext-value" not in masked
    assert list(SstReader(masked)) == ts


def test_keys_must_increase():
    b = SstBuilder()
    b.add(KvTuple(b"b", b"", 1))
    with pytest.raises(ValueError):
        b.add(KvTuple(b"a", b"", 2))
    with pytest.raises(ValueError):
        b.add(KvTuple(b"b", b"", 3))


def test_out_of_range_block(rng):
    r = SstReader(SstBuilder().extend(_tuples(rng, 10)).finish())
    with pytest.raises(IndexError):
        r.read_block(r.num_blocks)
    with pytest.raises(IndexError):
        r.read_block(-1)


def test_flipped_byte_is_corrupt(rng):
    data = bytearray(SstBuilder(block_size=512).extend(_tuples(rng, 300)).finish())
    r = SstReader(bytes(data))
    off, size = r.handles[2]
    data[off + size // 2] ^= 0x01
    with pytest.raises(CorruptBlock):
        SstReader(bytes(data)).read_block(2)
    footer = bytearray(r.data)
    footer[-10] ^= 0xFF
    with pytest.raises(CorruptBlock):
        SstReader(bytes(footer))
    with pytest.raises(CorruptBlock):
        SstReader(b"short")


def test_footer_magic(rng):
    data = SstBuilder().extend(_tuples(rng, 5)).finish()
    assert int.from_bytes(data[-12:-4], "little") == 0x4F334C534D


def test_get_shadow_oracle(rng):
    ts = _tuples(rng, 3000)
    r = SstReader(SstBuilder(block_size=2048).extend(ts).finish())
    for t in rng.sample(ts, 500):
        r.stats.blocks_read = 0
        got = r.get(t.key)
        assert got == t and r.stats.blocks_read == 1
        assert r.get(t.key, snapshot_seq=t.seq - 1) is None
        assert r.get(t.key, snapshot_seq=t.seq) == t


def test_get_absent_bloom_negative_reads_nothing(rng):
    ts = [KvTuple(b"k" + rng.randbytes(8), b"v", 1) for _ in range(1000)]
    ts.sort(key=lambda t: t.key)
    r = SstReader(SstBuilder().extend(ts).finish())
    for _ in range(2000):
        key = b"k" + rng.randbytes(9)
        before = r.stats.blocks_read
        negative_before = r.stats.bloom_negative
        assert r.get(key) is None
        if r.stats.bloom_negative > negative_before:
            assert r.stats.blocks_read == before
    assert r.stats.bloom_negative > 1900


def test_get_above_largest_no_io():
    r = SstReader(SstBuilder().extend([KvTuple(b"a", b"1", 1), KvTuple(b"m", b"2", 2)]).finish())
    assert r.get(b"z") is None and r.get(b"0") is None
    assert r.stats.range_pruned == 2 and r.stats.blocks_read == 0


@given(st.lists(st.binary(min_size=1, max_size=6), max_size=200, unique=True),
       st.binary(max_size=6), st.one_of(st.none(), st.binary(max_size=6)))
@settings(max_examples=80, deadline=None)
def test_range_matches_filter(keys, start, end):
    ts = [KvTuple(k, k, 1) for k in sorted(keys)]
    if not ts:
        return
    r = SstReader(SstBuilder(block_size=64).extend(ts).finish())
    expected = [t for t in ts if t.key >= start and (end is None or t.key < end)]
    assert list(r.range(start, end)) == expected


def test_file_meta_round_trip():
    m = FileMeta(17, 2, b"a", b"zz", 4, 99, 12345, 77, 3, ds(1), cn(2))
    got, pos = FileMeta.decode(m.encode())
    assert got == m and pos == len(m.encode())
    bare = FileMeta(1, 0, b"", b"x", 0, 0, 0, 0)
    assert FileMeta.decode(bare.encode())[0] == bare
    assert m.name == sst_name(cn(2), 17) == "cn2-00000017.sst"
    assert m.overlaps(b"m", None) and not m.overlaps(b"zzz", None) and not m.overlaps(None, b"0")


def test_write_then_list(rng):
    f, node = _ds_fabric()
    data = SstBuilder().extend(_tuples(rng, 50)).finish()
    res = _write(f, node, "cn0-00000001.sst", data, level=0)
    assert node.list_files() == []  # not durable until the last byte lands
    f.run_until_idle()
    assert res == [None]
    assert node.list_files() == ["cn0-00000001.sst"]
    assert node.reader("cn0-00000001.sst").entries == SstReader(data).entries
    with pytest.raises(FileNotFound):
        node.read("nope.sst")


def test_writer_crash_mid_write_invisible(rng):
    f, node = _ds_fabric()
    _write(f, node, "a.sst", SstBuilder().extend(_tuples(rng, 50)).finish())
    f.run_until(f.now + 1.0)
    f.crash(cn(0))
    f.run_until_idle()
    assert node.list_files() == []


def test_ds_crash_mid_write_invisible(rng):
    f, node = _ds_fabric()
    _write(f, node, "a.sst", SstBuilder().extend(_tuples(rng, 50)).finish())
    f.crash(ds(0))
    f.run_until_idle()
    assert node.list_files() == []


def test_injected_write_failure(rng):
    f, node = _ds_fabric()
    node.fault_hook = lambda name, ctx: True
    res = _write(f, node, "a.sst", SstBuilder().extend(_tuples(rng, 5)).finish())
    f.run_until_idle()
    assert isinstance(res[0], DsWriteFailed) and node.list_files() == []


def test_bandwidth_cap_64mib():
    f, node = _ds_fabric()
    n = 64 << 20
    expected_us = n * 8 / 2.5e9 * 1e6
    assert expected_us == pytest.approx(214_748.4, abs=0.1)
    done = f.transfer(cn(0), ds(0), n).done_at
    assert done == pytest.approx(expected_us, rel=1e-9)


def test_level_bytes_match_fabric_traffic(rng):
    f, node = _ds_fabric()
    total = 0
    for i in range(12):
        data = SstBuilder().extend(_tuples(rng, rng.randrange(5, 200))).finish()
        total += len(data)
        _write(f, node, f"f{i}.sst", data, level=i % 3)
    f.run_until_idle()
    assert sum(node.bytes_written_by_level.values()) == total
    assert f.traffic_by_class()["cn->ds"] == total


def test_durable_files_immutable(rng):
    f, node = _ds_fabric()
    data = SstBuilder().extend(_tuples(rng, 30)).finish()
    _write(f, node, "a.sst", data)
    f.run_until_idle()
    snapshot = node.read("a.sst")
    assert isinstance(snapshot, bytes)
    assert node.delete("a.sst") and not node.delete("a.sst")


def test_backing_dir_survives_reopen(tmp_path, rng):
    f, node = _ds_fabric(str(tmp_path))
    data = SstBuilder().extend(_tuples(rng, 30)).finish()
    _write(f, node, "a.sst", data)
    f.run_until_idle()
    assert (tmp_path / "a.sst").read_bytes() == data
    reopened = DsNode(ds(0), Fabric(), str(tmp_path))
    assert reopened.read("a.sst") == data
    reopened.delete("a.sst")
    assert not (tmp_path / "a.sst").exists()
