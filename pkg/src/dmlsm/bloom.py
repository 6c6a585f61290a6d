"""Bloom filter with double hashing (10 bits/key, 7 probes by default)."""

from __future__ import annotations

import hashlib
import struct

_HDR = struct.Struct("<IB")
_MASK64 = (1 << 64) - 1


def _hash_pair(key: bytes) -> tuple[int, int]:
    d = hashlib.blake2b(key, digest_size=16).digest()
    h1, h2 = struct.unpack("<QQ", d)
    return h1, h2 | 1


class BloomFilter:
    def __init__(self, num_bits: int, num_hashes: int = 7, bits: bytearray | None = None):
        self.num_bits = max(8, num_bits)
        self.num_hashes = num_hashes
        self.bits = bits if bits is not None else bytearray((self.num_bits + 7) // 8)
        self.count = 0

    @classmethod
    def for_keys(cls, keys, bits_per_key: int = 10, num_hashes: int = 7) -> "BloomFilter":
        keys = list(keys)
        bf = cls(len(keys) * bits_per_key, num_hashes)
        for k in keys:
            bf.add(k)
        return bf

    def _positions(self, key: bytes):
        h1, h2 = _hash_pair(key)
        m = self.num_bits
        for i in range(self.num_hashes):
            yield ((h1 + i * h2) & _MASK64) % m

    def add(self, key: bytes) -> None:
        for p in self._positions(key):
            self.bits[p >> 3] |= 1 << (p & 7)
        self.count += 1

    def may_contain(self, key: bytes) -> bool:
        bits = self.bits
        return all(bits[p >> 3] & (1 << (p & 7)) for p in self._positions(key))

    __contains__ = may_contain

    def encode(self) -> bytes:
        return _HDR.pack(self.num_bits, self.num_hashes) + bytes(self.bits)

    @classmethod
    def decode(cls, buf) -> "BloomFilter":
        num_bits, k = _HDR.unpack_from(buf, 0)
        bits = bytearray(buf[_HDR.size : _HDR.size + (num_bits + 7) // 8])
        return cls(num_bits, k, bits)

    def __len__(self):
        return len(self.encode())
