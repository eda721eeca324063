"""Counter-based random streams keyed by ``(seed, replication)``."""
import numpy as np


def stream(seed, replication=0):
    """Independent Philox generator for one replication.

    The same ``(seed, replication)`` pair always yields the same stream, no
    matter how many replications run or in which order.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replication)])))
