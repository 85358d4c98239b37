"""Shared helpers: order-invariant reductions, keyed RNG streams, CSV formatting."""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "perm_sum", "perm_mean", "canonical_order", "content_key",
    "stream", "fmt_float", "crc32_of",
]


def perm_sum(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sum that is bit-identical under any permutation along `axis`.

    Sorting each 1-D lane before summing makes the reduction a function of
    the multiset of values, so float non-associativity cannot leak
    permutation order into the result.
    """
    return np.sort(np.asarray(x), axis=axis).sum(axis=axis)


def perm_mean(x: np.ndarray, axis: int = 0) -> np.ndarray:
    x = np.asarray(x)
    return perm_sum(x, axis=axis) / x.shape[axis]


def canonical_order(rows: np.ndarray) -> np.ndarray:
    """Content-determined row order; ties are between identical rows only.

    Rows are ranked by a 64-bit content hash (a full lexsort would need one
    pass per column). Identical rows hash identically, and any order among
    them is immaterial because their contributions coincide.
    """
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    keys = np.array([content_key(rows[i]) for i in range(rows.shape[0])],
                    dtype=np.uint64)
    return np.argsort(keys, kind="stable")


def content_key(arr: np.ndarray) -> int:
    """Stable 64-bit key of an array's bytes (for content-keyed RNG streams)."""
    h = hashlib.blake2b(np.ascontiguousarray(arr, dtype=np.float64).tobytes(),
                        digest_size=8)
    return int.from_bytes(h.digest(), "little")


def stream(*key_parts) -> np.random.Generator:
    """Deterministic Generator keyed by a tuple of integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key_parts))))


def fmt_float(x) -> str:
    """9 significant digits, the fixed precision used in every CSV."""
    return f"{float(x):.9g}"


def crc32_of(data: bytes) -> int:
    import zlib

    return zlib.crc32(data) & 0xFFFFFFFF
