"""Seeded, counter-based random streams.

Every artifact draws from its own Philox stream keyed by ``(seed, stream)``,
so results do not depend on the order in which artifacts are generated.
"""

import numpy as np

STREAM_POTENTIAL = 1
STREAM_TRAIN = 2
STREAM_TEST = 3
STREAM_STIEFEL = 4
STREAM_CALIBRATION = 5
STREAM_LEARN_INIT = 6


def rng_for(seed: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))
