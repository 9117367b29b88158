#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Helper classes and methods."""

import logging
import zlib
from abc import ABC, abstractmethod
from typing import Hashable

import numpy as np
from cryptography.hazmat.primitives import hashes

logger = logging.getLogger(__name__)

PURPOSES = ("delay", "drop", "churn", "clock", "workload")


def stable_code(value: Hashable) -> int:
    """Process-independent 32 bit code for any value with a deterministic repr."""
    return zlib.crc32(repr(value).encode())


def derive_seed(base_seed: int, point: Hashable, repetition: int) -> int:
    """Seed of one (sweep point, repetition) cell of an experiment plan."""
    sequence = np.random.SeedSequence([base_seed, stable_code(point), repetition])
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


class RandomStreams:
    """Independent random generators split per actor and per purpose.

    Every generator derives from the single run seed, so toggling one model (say, clock
    error) never changes the draws another model (say, packet drops) sees.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self._streams: dict[tuple[int, int], np.random.Generator] = {}

    def stream(self, actor: Hashable, purpose: str) -> np.random.Generator:
        """Returns the generator for `purpose` draws made by `actor`."""
        if purpose not in PURPOSES:
            raise ValueError(f"unknown random stream purpose {purpose!r}")

        key = (stable_code(actor), PURPOSES.index(purpose))
        if key not in self._streams:
            sequence = np.random.SeedSequence(self.seed, spawn_key=key)
            self._streams[key] = np.random.default_rng(sequence)

        return self._streams[key]


class HashProvider(ABC):
    """Base interface for the 256-bit hash used for content ids and state digests."""

    name: str
    digest_size: int = 32

    def __init__(self):
        for field in ("name",):
            if not getattr(self, field, None):
                raise AttributeError(
                    f"{field} not defined on HashProvider interface, did you forget to set the {field} class variable?"
                )

    @abstractmethod
    def digest(self, data: bytes) -> bytes:
        """Returns the digest of `data`."""
        ...

    def digest_many(self, parts: list[bytes]) -> bytes:
        """Digest of the concatenation of `parts`."""
        return self.digest(b"".join(parts))

    def empty(self) -> bytes:
        """Digest of the empty byte string."""
        return self.digest(b"")


class Sha256Provider(HashProvider):
    """SHA-256 backed by `cryptography`."""

    name = "sha256"

    def digest(self, data: bytes) -> bytes:
        hasher = hashes.Hash(hashes.SHA256())
        hasher.update(data)
        return hasher.finalize()

    def digest_many(self, parts: list[bytes]) -> bytes:
        hasher = hashes.Hash(hashes.SHA256())
        for part in parts:
            hasher.update(part)
        return hasher.finalize()


DEFAULT_HASH = Sha256Provider()
