"""Counter-based random number streams.

Every random draw in the package comes from a Philox stream addressed by
(seed, domain, counters). Streams are constructed on demand, so results
are independent of call order and of any parallel execution schedule.
"""

from __future__ import annotations

import numpy as np

# Domain separators (second key word) keep unrelated draw families apart.
DOMAIN_NOISE = 0
DOMAIN_TRUTH = 1
DOMAIN_BOOTSTRAP = 2

_MAX_SEED = 2**64 - 1


def check_seed(seed: int) -> int:
    if not isinstance(seed, (int, np.integer)):
        raise ValueError(f"seed must be an integer, got {type(seed).__name__}")
    if not 0 <= int(seed) <= _MAX_SEED:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return int(seed)


def stream(seed: int, domain: int, c1: int = 0, c2: int = 0, c3: int = 0) -> np.random.Generator:
    """Generator for the stream addressed by (seed, domain, c1, c2, c3).

    The low counter word is left at zero so in-stream draws advance it
    without ever colliding with a neighbouring stream.
    """
    key = np.array([check_seed(seed), domain], dtype=np.uint64)
    counter = np.array([0, c1, c2, c3], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
