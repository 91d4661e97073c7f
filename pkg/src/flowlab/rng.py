"""Counter-based random streams keyed by experiment coordinates.

Every stream is a Philox generator whose key is derived from a root seed and a
tuple of integers (cell index, replica chunk, purpose tag, ...).  Two streams
with different keys are statistically independent, and a stream is fully
determined by its key, so results never depend on evaluation order or on the
number of worker threads.
"""

from __future__ import annotations

import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

#: Replica chunk size used by every batched Monte Carlo loop.  It is fixed so
#: that the partition of replicas into streams is independent of threading.
CHUNK = 2048


def tag(name: str) -> int:
    """Stable 32-bit integer for a textual purpose label."""
    return zlib.crc32(name.encode("utf-8"))


def float_key(value: float) -> tuple[int, int]:
    """Split the IEEE-754 bits of ``value`` into two 32-bit words."""
    bits = struct.unpack("<Q", struct.pack("<d", float(value)))[0]
    return bits >> 32, bits & 0xFFFFFFFF


def stream(seed: int, *key: int | str) -> np.random.Generator:
    """Return the generator for ``(seed, *key)``.

    String key parts are hashed with :func:`tag`.
    """
    spawn = tuple(tag(k) if isinstance(k, str) else int(k) for k in key)
    seq = np.random.SeedSequence(int(seed) & ((1 << 64) - 1), spawn_key=spawn)
    return np.random.Generator(np.random.Philox(seq))


def cell_stream(seed: int, s: float, t: float, *key: int | str) -> np.random.Generator:
    """Generator for the grid cell ``[s, t]``; depends only on the endpoints."""
    return stream(seed, *key, *float_key(s), *float_key(t))


def chunk_sizes(total: int, chunk: int = CHUNK) -> list[int]:
    """Sizes of consecutive chunks covering ``total`` replicas."""
    if total < 0:
        raise ValueError("total must be nonnegative")
    full, rest = divmod(total, chunk)
    return [chunk] * full + ([rest] if rest else [])


def run_chunks(
    fn: Callable[[np.random.Generator, int, int], T],
    total: int,
    seed: int,
    key: Sequence[int | str],
    threads: int = 1,
    chunk: int = CHUNK,
) -> list[T]:
    """Evaluate ``fn(rng, size, index)`` over replica chunks.

    Chunk ``index`` always receives ``stream(seed, *key, index)``, and the
    results are returned in chunk order whatever ``threads`` is.
    """
    sizes = chunk_sizes(total, chunk)

    def job(i: int) -> T:
        return fn(stream(seed, *key, i), sizes[i], i)

    if threads <= 1 or len(sizes) <= 1:
        return [job(i) for i in range(len(sizes))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(job, range(len(sizes))))
