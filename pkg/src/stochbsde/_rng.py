"""Named random substreams.

Every random draw in the package is keyed by ``(seed, stream, *counters)`` through
:class:`numpy.random.SeedSequence` spawn keys, so a block of paths always gets the
same numbers no matter how many workers generate the ensemble.
"""

import numpy as np

PATHS = 0
SAMPLER = 1
NESTED = 2
PERMUTE = 3
INSTANCES = 4

# paths are generated in fixed-size blocks; changing this changes every ensemble
BLOCK_SIZE = 4096


def substream(seed: int, stream: int, *counters: int) -> np.random.Generator:
    key = (int(stream),) + tuple(int(c) for c in counters)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=key)))
