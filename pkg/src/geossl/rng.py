"""Seedable, splittable random streams.

Every random draw in the package goes through :func:`make_rng`, which builds a
numpy ``Generator`` over the Philox4x64-10 counter-based bit generator. The key
is derived from ``SeedSequence(seed, spawn_key=...)`` where the spawn key is the
tuple of stream labels (strings are mapped through CRC32). Streams with
different labels are statistically independent, and the same
``(seed, labels)`` pair yields the same stream on every platform, so
work can be split across workers without coordination.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["make_rng", "stream_key", "torch_seed"]


def stream_key(*labels: int | str) -> tuple[int, ...]:
    key = []
    for label in labels:
        if isinstance(label, str):
            key.append(zlib.crc32(label.encode("utf-8")))
        else:
            key.append(int(label) & 0xFFFFFFFFFFFFFFFF)
    return tuple(key)


def make_rng(seed: int, *labels: int | str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=stream_key(*labels))
    return np.random.Generator(np.random.Philox(ss))


def torch_seed(seed: int, *labels: int | str) -> int:
    """63-bit integer seed for ``torch.Generator.manual_seed`` derived from a stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=stream_key(*labels))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
