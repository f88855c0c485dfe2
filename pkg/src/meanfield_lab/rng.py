"""Counter-based random streams keyed by ``(seed, *stream_ids)``.

Every stream is an independent Philox generator whose key is derived from the
master seed and a tuple of stream identifiers, so particle ``i`` always sees
the same noise whatever the ensemble size or the order of evaluation.
"""

import zlib

import numpy as np

__all__ = ["stream", "stream_key"]


def _as_int(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError("stream identifiers must be non-negative")
    return part


def stream_key(seed, *ids):
    """Return the 128-bit Philox key for ``(seed, *ids)`` as two uint64 words."""
    ss = np.random.SeedSequence(_as_int(seed), spawn_key=tuple(_as_int(i) for i in ids))
    return ss.generate_state(2, dtype=np.uint64)


def stream(seed, *ids):
    """Independent ``numpy.random.Generator`` for the stream ``(seed, *ids)``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *ids)))
