"""Per-path random streams.

Each path draws from its own counter-based Philox generator keyed by
``(master_seed, path_index)``, so a path's noise never depends on which
worker simulated it or on how the ensemble was chunked.
"""

from typing import Sequence

import numpy as np


def stream(master_seed: int, path_index: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(int(path_index),))
    return np.random.Generator(np.random.Philox(seq))


def path_normals(master_seed: int, path_indices: Sequence[int], shape: tuple) -> np.ndarray:
    """Standard normals of the given per-path shape, stacked along a leading path axis."""
    out = np.empty((len(path_indices),) + tuple(shape))
    for row, index in enumerate(path_indices):
        out[row] = stream(master_seed, index).standard_normal(shape)
    return out
