"""Counter-based random streams.

Every draw in the pipeline comes from a Philox generator keyed by
``(seed, stage, step, stream)``.  Streams never share state, so the order in
which chains or stages are evaluated cannot change any number.
"""

import numpy as np

STAGES = {
    "reference": 1,
    "distill": 2,
    "ta": 3,
    "generator": 4,
    "drp": 5,
    "eval": 6,
    "init": 7,
    "validate": 8,
}


def stream(seed, stage, step=0, index=0):
    """Return a fresh generator for one (seed, stage, step, index) key."""
    if isinstance(stage, str):
        stage = STAGES[stage]
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(stage), int(step), int(index)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
