"""Deterministic random-stream management.

One master seed fans out into named substreams (env, policy, buffer,
influence, ...) so that adding draws to one subsystem never perturbs the
others. Stream names are hashed with SHA-256, not Python's ``hash``, so
streams are stable across processes and platforms.

Influence scoring additionally needs one substream *per sample id* that can
be evaluated for a whole batch at once; ``counter_normals`` provides that via
a vectorized splitmix64 counter generator (constructing thousands of numpy
Generators per update would dominate the step budget).
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _name_words(name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def substream(master_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Named, optionally indexed, generator derived from the master seed."""
    entropy = [int(master_seed) & 0xFFFFFFFF, *_name_words(name), *[int(i) for i in indices]]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def stream_key(master_seed: int, name: str) -> int:
    """64-bit key for the counter generator, derived like a named substream."""
    w = _name_words(name)
    return ((w[0] ^ int(master_seed) & 0xFFFFFFFF) << 32 | w[1]) & 0xFFFFFFFFFFFFFFFF


def _splitmix64(x: np.ndarray) -> np.ndarray:
    # Standard splitmix64 finalizer; x is uint64.
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
    return z ^ (z >> np.uint64(31))


def _uniforms(key: int, ids: np.ndarray, counters: np.ndarray) -> np.ndarray:
    """Open-interval (0,1) uniforms addressed by (key, id, counter)."""
    seed = (
        np.uint64(key)
        ^ (_splitmix64(ids.astype(np.uint64)) * np.uint64(0xD1342543DE82EF95))
        ^ (counters.astype(np.uint64) * _GOLDEN)
    ) & _MASK64
    bits = _splitmix64(_splitmix64(seed))
    u = (bits >> np.uint64(11)).astype(np.float64) * (2.0**-53)
    return u + 2.0**-54  # keep strictly positive for log()


def counter_normals(key: int, ids: np.ndarray, shape_per_id: tuple[int, ...]) -> np.ndarray:
    """Standard normals, shape (len(ids), *shape_per_id).

    The draws for a given (key, id) are a pure function of that pair, so a
    sample keeps the same noise wherever and whenever it is re-scored.
    """
    ids_arr = np.asarray(ids, dtype=np.uint64).ravel()
    n = int(np.prod(shape_per_id)) if shape_per_id else 1
    c = np.arange(n, dtype=np.uint64)[None, :]
    idg = ids_arr[:, None]
    # Box-Muller from two uniforms per normal.
    u1 = _uniforms(key, idg, c)
    u2 = _uniforms(key, idg, c + np.uint64(n))
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return z.reshape(ids_arr.shape[0], *shape_per_id)
