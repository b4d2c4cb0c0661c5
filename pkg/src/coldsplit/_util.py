"""Small shared numerics: tie-average ranks, stable hashing, seeded streams."""

from __future__ import annotations

import hashlib

import numpy as np

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_U64_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash. Fixed algorithm and constants so fingerprints are
    reproducible across platforms and Python builds (never ``hash()``)."""
    h = FNV64_OFFSET
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & _U64_MASK
    return h


def stable_u64(text: str) -> int:
    """Stable 64-bit digest of a string, for keying RNG streams by fold keys."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def substream(seed: int, *keys) -> np.random.Generator:
    """Independent RNG stream keyed by (seed, keys...).

    Streams are a pure function of their key tuple, which is what makes every
    parallel pipeline worker-count independent: each work item derives its own
    stream instead of consuming a shared one.
    """
    spawn = tuple(stable_u64(k) if isinstance(k, str) else int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=spawn))


def average_ranks(x) -> np.ndarray:
    """Ranks 1..n with ties assigned the mean of the ranks they span."""
    x = np.asarray(x)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
