"""Named random streams derived from one user seed.

Each consumer (weight init, shuffling, crop origins, synthetic scenes, fold
assignment) draws from its own stream, so changing how many numbers one of
them consumes never perturbs the others.
"""

import numpy as np

STREAMS = {"init": 1, "shuffle": 2, "crops": 3, "synth": 4, "folds": 5}


def stream(seed: int, name: str) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng([STREAMS[name], seed])
