"""Schedule-independent random streams.

Every stochastic component draws from a generator keyed by
``(master seed, component name, *ids)``, so results do not depend on the
order in which workers happen to run.
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def child_seed(master_seed, component, *ids) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master_seed),
                                  spawn_key=(_key(component), *(_key(i) for i in ids)))


def child_rng(master_seed, component, *ids) -> np.random.Generator:
    return np.random.default_rng(child_seed(master_seed, component, *ids))


def child_int(master_seed, component, *ids) -> int:
    """A 63-bit integer seed, e.g. for initializing an :class:`~fedistill.nn.Mlp`."""
    return int(child_seed(master_seed, component, *ids).generate_state(1, dtype=np.uint64)[0] >> 1)
