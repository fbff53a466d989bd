"""Independent, reproducible random streams.

Every consumer of randomness draws from a generator keyed by
``(seed, purpose, index)`` so that episodes, trials and training runs never
share a stream and can be regenerated one at a time.
"""

import numpy as np

DATA = 0
TRIAL = 1
TRAIN = 2
SPLIT = 3


def stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(purpose, int(index))))
