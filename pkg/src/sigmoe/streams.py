"""Named, counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by the
user seed plus a stream name and integer indices, so that e.g. the data of
trial 3 at n=1000 does not depend on how many restarts trial 2 ran.
"""
import numpy as np

STREAMS = {
    "truth": 0,
    "data": 1,
    "init": 2,
    "restart": 3,
    "probe": 4,
    "trial": 5,
    "misc": 6,
}


def generator(seed, stream="misc", *keys):
    """Philox generator for (seed, stream, *keys)."""
    if stream not in STREAMS:
        raise KeyError(f"unknown stream {stream!r}; known: {sorted(STREAMS)}")
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(STREAMS[stream], *(int(k) for k in keys)))
    return np.random.Generator(np.random.Philox(ss))
