"""Counter-based uniform variates keyed by (seed, tensor name, flat index).

Each element's variate depends only on its key, never on how many variates
were drawn before it, so masks come out identical whatever order or thread
layout produces them. The generator is SplitMix64: a Weyl sequence
``key + (i + 1) * golden`` pushed through the SplitMix64 finalizer.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def _name_hash(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")


def stream_key(seed: int, name: str) -> int:
    """64-bit stream key for one tensor under one seed."""
    return mix64(mix64(seed & MASK64) ^ _name_hash(name))


def derive_seed(seed: int, label: str) -> int:
    """Independent sub-seed, e.g. one per task of a merge run."""
    return stream_key(seed, "seed:" + label)


def uniforms(seed: int, name: str, count: int, start: int = 0) -> np.ndarray:
    """Float64 uniforms in [0, 1) for flat indices ``start .. start + count - 1``."""
    key = np.uint64(stream_key(seed, name))
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = key + idx * np.uint64(GOLDEN)
        bits = _mix64_array(z) >> np.uint64(11)
    return bits.astype(np.float64) * (1.0 / (1 << 53))


def uniform_scalar(seed: int, name: str, index: int) -> float:
    """Reference evaluation of a single variate with plain integer arithmetic."""
    z = (stream_key(seed, name) + (index + 1) * GOLDEN) & MASK64
    return (mix64(z) >> 11) / float(1 << 53)
