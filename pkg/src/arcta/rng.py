"""Counter-based random streams.

Every draw in the artifact comes from a Philox generator keyed by
(seed, purpose) with the counter set from (iteration, index), so results
do not depend on evaluation order and resuming from a checkpoint only
needs the seed and the step counter.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "init": 0,
    "eps": 1,
    "tsamp": 2,
    "nu": 3,
    "batch": 4,
    "forecast": 5,
    "datagen": 6,
    "theta0": 7,
    "valpaths": 8,
    "oracle": 9,
}


def stream(seed: int, purpose: str, iteration: int = 0, index: int = 0) -> np.random.Generator:
    if purpose not in PURPOSES:
        raise KeyError(f"unknown rng purpose {purpose!r}")
    key = (PURPOSES[purpose] << 64) | (int(seed) & (2**64 - 1))
    counter = (int(index) << 64) | (int(iteration) & (2**64 - 1))
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def state_dict(seed: int, step: int) -> dict:
    """All stream state is derivable from (seed, step); record exactly that."""
    return {"scheme": "philox-counter", "seed": int(seed), "step": int(step)}
