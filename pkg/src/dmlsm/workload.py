"""Workload generators: key encoding, uniform and Zipfian key choice, op streams."""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum
from typing import Iterator

import numpy as np

from .errors import ConfigError


class WorkloadKind(str, Enum):
    FILLRANDOM = "fillrandom"
    READRANDOM = "readrandom"
    READRANDOMWRITERANDOM = "readrandomwriterandom"
    YCSB_MIX = "ycsb_mix"


class OpKind(str, Enum):
    PUT = "put"
    GET = "get"
    DELETE = "delete"


@dataclass(frozen=True)
class WorkloadSpec:
    kind: WorkloadKind = WorkloadKind.FILLRANDOM
    ops: int = 100_000
    key_size: int = 16
    value_size: int = 64
    dist: str = "uniform"
    theta: float = 0.99
    read_ratio: float = 0.5
    seed: int = 0
    key_space: int | None = None  # defaults to ``ops``
    delete_ratio: float = 0.1  # share of writes that are deletes in ycsb_mix

    def __post_init__(self):
        if self.ops < 0:
            raise ConfigError("ops must be >= 0")
        if self.key_size < 8:
            raise ConfigError("key_size must be >= 8")
        if self.value_size < 0:
            raise ConfigError("value_size must be >= 0")
        if self.dist not in ("uniform", "zipfian"):
            raise ConfigError(f"unknown distribution {self.dist!r}")
        if self.dist == "zipfian" and not 0 <= self.theta < 1:
            raise ConfigError("zipfian theta must be in [0, 1)")
        if not 0 <= self.read_ratio <= 1:
            raise ConfigError("read_ratio must be in [0, 1]")

    @property
    def keys(self) -> int:
        return max(1, self.key_space or self.ops)


def encode_key(i: int, n: int, key_size: int = 16) -> bytes:
    """Spread ``n`` key indices evenly over the 64-bit prefix space.

    Even spacing keeps uniform workloads uniform across shards, since the
    shard is taken from the leading key bits.
    """
    stride = (1 << 64) // max(1, n)
    return (i * stride).to_bytes(8, "big") + bytes(key_size - 8)


def zeta(n: int, theta: float) -> float:
    return float(np.sum(np.arange(1, n + 1, dtype=np.float64) ** -theta))


class Zipfian:
    """Gray et al. rejection-free Zipfian generator over ranks 0..n-1 (rank 0 hottest)."""

    def __init__(self, n: int, theta: float = 0.99, seed: int = 0):
        if n < 1:
            raise ConfigError("zipfian n must be >= 1")
        if not 0 <= theta < 1:
            raise ConfigError("zipfian theta must be in [0, 1)")
        self.n = n
        self.theta = theta
        self.rng = random.Random(seed)
        self.zetan = zeta(n, theta)
        zeta2 = zeta(min(2, n), theta)
        self.alpha = 1.0 / (1.0 - theta)
        self.eta = (1 - (2.0 / n) ** (1 - theta)) / (1 - zeta2 / self.zetan) if n > 2 else 0.0
        self.half_pow = 1 + 0.5 ** theta

    def next(self) -> int:
        u = self.rng.random()
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if uz < self.half_pow or self.n <= 2:
            return min(1, self.n - 1)
        return min(self.n - 1, int(self.n * (self.eta * u - self.eta + 1) ** self.alpha))

    def probability(self, rank: int) -> float:
        return (rank + 1) ** -self.theta / self.zetan


class KeyChooser:
    def __init__(self, spec: WorkloadSpec, salt: int = 0):
        self.n = spec.keys
        self.key_size = spec.key_size
        self.rng = random.Random((spec.seed << 8) ^ salt)
        self.zipf = Zipfian(self.n, spec.theta, spec.seed ^ salt) if spec.dist == "zipfian" else None

    def index(self) -> int:
        return self.zipf.next() if self.zipf else self.rng.randrange(self.n)

    def key(self) -> bytes:
        return encode_key(self.index(), self.n, self.key_size)


def operations(spec: WorkloadSpec) -> Iterator[tuple[OpKind, bytes, bytes]]:
    """Deterministic op stream for ``spec``; values are empty for gets and deletes."""
    chooser = KeyChooser(spec, salt=1)
    rng = random.Random(spec.seed)
    for _ in range(spec.ops):
        key = chooser.key()
        if spec.kind == WorkloadKind.FILLRANDOM:
            op = OpKind.PUT
        elif spec.kind == WorkloadKind.READRANDOM:
            op = OpKind.GET
        elif rng.random() < spec.read_ratio:
            op = OpKind.GET
        elif spec.kind == WorkloadKind.YCSB_MIX and rng.random() < spec.delete_ratio:
            op = OpKind.DELETE
        else:
            op = OpKind.PUT
        value = rng.randbytes(spec.value_size) if op == OpKind.PUT else b""
        yield op, key, value


def preload(spec: WorkloadSpec) -> Iterator[tuple[bytes, bytes]]:
    """Every key of the key space once, in random order, for read workloads."""
    rng = random.Random(spec.seed ^ 0x5EED)
    order = list(range(spec.keys))
    rng.shuffle(order)
    for i in order:
        yield encode_key(i, spec.keys, spec.key_size), rng.randbytes(spec.value_size)


__all__ = [
    "KeyChooser", "OpKind", "WorkloadKind", "WorkloadSpec", "Zipfian", "encode_key", "operations", "preload",
    "zeta",
]
