"""Seedable, splittable random streams.

Everything stochastic in this package derives from numpy's PCG64 via
``SeedSequence``.  Substream layout, so that runs are reproducible from a
single integer seed:

- replica/seed sweeps: replica ``i`` uses ``SeedSequence(seed).spawn(n)[i]``;
- a coupling run spawns five children of its seed, in order:
  init-A, init-B, chain-A additions, chain-B additions, shared coupled stream.
"""

from __future__ import annotations

import numpy as np


def substreams(seed: int | None, k: int) -> list[np.random.Generator]:
    """k independent generators derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(k)
    return [np.random.default_rng(c) for c in children]


def replica_rngs(seed: int | None, replicas: int) -> list[np.random.Generator]:
    return substreams(seed, replicas)
