"""Deterministic random number streams.

Every stochastic routine in the package draws from a stream keyed by
``(seed, index)``.  Streams built this way are independent of execution
order and of how work is split across processes, which is what makes
replicate-level parallelism reproducible: replicate ``r`` sees the same
draws whether it runs first, last, or in another worker.
"""

from __future__ import annotations

import numpy as np

__all__ = ["substream"]


def substream(seed: int, index: int) -> np.random.Generator:
    """Return a generator for stream ``index`` of a family keyed by ``seed``.

    Uses a counter-based bit generator (Philox) whose 128-bit key is the
    pair itself, so distinct ``(seed, index)`` pairs give independent
    streams and equal pairs give identical ones, on every platform.
    """
    if seed < 0 or index < 0:
        raise ValueError("seed and stream index must be non-negative")
    key = np.array([seed, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
