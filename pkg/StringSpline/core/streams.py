# core/streams.py

"""
Independent random streams derived from one 64-bit seed.

Every consumer asks for a generator by a key tuple; the same (seed, key)
always yields the same stream and different keys never share state.

Stream keys
-----------
SCALAR_NOISE      (0,)                          scalar benchmark noise
REPLICATE_NOISE   (1, replicate)                benchmark replicate noise
CHAIN             (2, family, cell, replicate)  benchmark Gibbs chains
DYNAMICS          (3,)                          Langevin thermostat
FORCE_NOISE       (4,)                          force-sample noise
FIT_CHAIN         (5,)                          cmd_fit Gibbs chain
"""

import numpy as np

SCALAR_NOISE = 0
REPLICATE_NOISE = 1
CHAIN = 2
DYNAMICS = 3
FORCE_NOISE = 4
FIT_CHAIN = 5

_SEED_MASK = (1 << 64) - 1


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based Philox generator for ``seed`` and stream ``key``."""
    sequence = np.random.SeedSequence(int(seed) & _SEED_MASK, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(sequence))
