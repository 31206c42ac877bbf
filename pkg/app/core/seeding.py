"""Named, versioned randomness.

All randomness in the simulator flows through numpy's counter-based Philox
bit generator. Seeds for independent streams are derived from the master seed
plus a purpose tag and integer keys, so any stream can be recreated without
replaying the others (serial and parallel runs therefore agree).
"""

from enum import IntEnum

import numpy as np

PRNG_NAME = "numpy.Philox-4x64"
PRNG_VERSION = 1

_MASK64 = (1 << 64) - 1


class Stream(IntEnum):
    """Purpose tags keeping derived streams disjoint."""

    INIT = 1
    SAMPLING = 2
    BATCHES = 3
    SOLO_INIT = 4
    PARTITION = 5
    BLOBS = 6
    SPLIT = 7


def derive_seed(master_seed: int, stream: Stream, *keys: int) -> int:
    """Derive a 64-bit seed for `stream` from the master seed and keys."""
    entropy = [master_seed & _MASK64, PRNG_VERSION, int(stream), *(int(k) & _MASK64 for k in keys)]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def make_rng(seed: int) -> np.random.Generator:
    """Build a generator for a 64-bit seed (negative seeds wrap)."""
    return np.random.Generator(np.random.Philox(seed & _MASK64))
