import math
import random

from hypothesis import given, settings
from hypothesis import strategies as st

from dmlsm.bloom import BloomFilter

TARGET_FPR = 0.01


@given(st.lists(st.binary(min_size=1, max_size=24), max_size=300))
@settings(max_examples=60)
def test_no_false_negatives(keys):
    bf = BloomFilter.for_keys(keys)
    assert all(bf.may_contain(k) for k in keys)


def test_measured_fpr_within_twice_target():
    rng = random.Random(11)
    present = {rng.randbytes(16) for _ in range(10_000)}
    bf = BloomFilter.for_keys(present)
    probes = 0
    hits = 0
    while probes < 100_000:
        k = rng.randbytes(16)
        if k in present:
            continue
        probes += 1
        hits += bf.may_contain(k)
    fpr = hits / probes
    # classic estimate (1 - e^(-kn/m))^k for n keys, m bits, k probes
    n, m, k = len(present), bf.num_bits, bf.num_hashes
    theory = (1 - math.exp(-k * n / m)) ** k
    assert fpr <= 2 * TARGET_FPR
    assert abs(fpr - theory) < 0.003


def test_empty_filter_rejects_everything():
    bf = BloomFilter.for_keys([])
    rng = random.Random(2)
    assert not any(bf.may_contain(rng.randbytes(8)) for _ in range(1000))


def test_encode_roundtrip():
    keys = [i.to_bytes(4, "big") for i in range(500)]
    bf = BloomFilter.for_keys(keys)
    back = BloomFilter.decode(bf.encode())
    assert back.bits == bf.bits and back.num_hashes == 7
    assert all(back.may_contain(k) for k in keys)
    assert len(bf) == len(bf.encode())


def test_size_is_ten_bits_per_key():
    bf = BloomFilter.for_keys([bytes([i]) for i in range(200)])
    assert bf.num_bits == 2000
