"""Seed scheme.

Every random stream is a PCG64 generator keyed by a numpy ``SeedSequence``
built from the user's root seed plus an integer spawn key::

    SeedSequence(entropy=root_seed, spawn_key=(stream_id, *counters))

``stream_id`` names the purpose of the stream (environment draws, path
draws, ...); the counters identify the replication batch, the generation
count ``n`` of an experiment point, and so on. Streams with different keys
are statistically independent, and no stream depends on how work is
scheduled across workers: path batches are split into fixed-size chunks and
each chunk owns the stream keyed by its chunk index.
"""

from __future__ import annotations

import numpy as np

ENV = 0
PATH = 1
WALK = 2
AUX = 3

CHUNK = 4096


def stream(root_seed: int, stream_id: int, *counters: int) -> np.random.Generator:
    if root_seed is None:
        raise ValueError("an explicit integer seed is required")
    key = (int(stream_id),) + tuple(int(c) for c in counters)
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def chunks(total: int, size: int = CHUNK):
    """Yield ``(chunk_index, start, stop)`` covering ``range(total)``."""
    for c, start in enumerate(range(0, total, size)):
        yield c, start, min(start + size, total)
