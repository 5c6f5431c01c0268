"""Counter-based random streams keyed by integer tuples."""

import numpy as np


def keyed_rng(*keys: int) -> np.random.Generator:
    """Philox generator whose stream depends only on ``keys``.

    Used so that the noise for (seed, step, item) never depends on the order
    in which items are processed.
    """
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])
    return np.random.Generator(np.random.Philox(ss))
