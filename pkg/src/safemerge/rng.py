"""Deterministic per-tensor random streams for reproducible sparsification.

Streams are splitmix64 sequences keyed by (seed, tensor name), so results do
not depend on tensor iteration order or parallel scheduling. The per-tensor
start state is s0 = splitmix64(seed XOR fnv1a64(name)); element i consumes the
i-th subsequent output.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
FNV_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(text: str) -> int:
    h = FNV_BASIS
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64(state: int) -> int:
    """One splitmix64 step applied to `state`; returns the output."""
    return _mix((state + GAMMA) & MASK64)


def tensor_stream(seed: int, name: str, n: int) -> np.ndarray:
    """First n 64-bit outputs of the stream for (seed, name), vectorized."""
    s0 = splitmix64((seed ^ fnv1a64(name)) & MASK64)
    idx = np.arange(1, n + 1, dtype=np.uint64)
    z = np.uint64(s0) + idx * np.uint64(GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def uniform_stream(seed: int, name: str, n: int) -> np.ndarray:
    """Stream mapped to float64 uniforms in [0, 1) via the top 53 bits."""
    u = tensor_stream(seed, name, n)
    return (u >> np.uint64(11)).astype(np.float64) / float(1 << 53)
