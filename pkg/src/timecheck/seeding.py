"""Deterministic seed derivation.

All randomness in a run flows from one master seed through named sub-seeds,
so any report can be regenerated byte-for-byte. Derivation hashes
(master, label, index) instead of splitting RNG streams, which keeps trial
seeds independent of scheduling order.
"""

import hashlib
import random


def derive_seed(master: int, label: str, index: int = 0) -> int:
    """64-bit sub-seed for (master, label, index)."""
    h = hashlib.blake2b(f"{master}:{label}:{index}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def sub_rng(master: int, label: str, index: int = 0) -> random.Random:
    return random.Random(derive_seed(master, label, index))


def random_words(seed: int, count: int) -> list:
    """count seeded pseudorandom 64-bit words."""
    rng = random.Random(seed)
    return [rng.getrandbits(64) for _ in range(count)]
