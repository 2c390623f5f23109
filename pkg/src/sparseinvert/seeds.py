"""Named random streams so components stay reproducible independently."""

import numpy as np

STREAMS = {"init": 0, "data": 1, "inversion": 2, "transfer": 3}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[name]]))
