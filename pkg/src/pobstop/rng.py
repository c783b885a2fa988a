"""Per-path random streams derived from a single master seed.

Every (purpose, path index) pair gets its own PCG64 stream spawned from
``SeedSequence(seed, spawn_key=(purpose_id, index))``.  Changing the number of
paths therefore never perturbs the draws of the paths that remain, and any
single path can be regenerated in isolation.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "obs": 0,         # observation increments (reference measure)
    "init": 1,        # initial particle locations
    "mutation": 2,    # private particle noise
    "branch": 3,      # branching uniforms
    "state": 4,       # joint (X, Y) noise under the physical measure
    "state_init": 5,  # X_0 draw for joint paths
    "innovation": 6,  # Kalman innovation process
    "oracle": 7,      # Monte Carlo oracles
    "european": 8,    # blocked terminal-value sampling
}


class StreamFactory:
    """Factory of independent generators keyed by ``(purpose, index)``."""

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError(f"seed must be nonnegative, got {seed}")
        self.seed = int(seed)

    def generator(self, purpose: str, index: int = 0) -> np.random.Generator:
        try:
            pid = PURPOSES[purpose]
        except KeyError:
            raise ValueError(f"unknown stream purpose {purpose!r}") from None
        ss = np.random.SeedSequence(self.seed, spawn_key=(pid, int(index)))
        return np.random.Generator(np.random.PCG64(ss))

    def generators(self, purpose: str, start: int, stop: int) -> list[np.random.Generator]:
        return [self.generator(purpose, k) for k in range(start, stop)]

    def __repr__(self) -> str:
        return f"StreamFactory(seed={self.seed})"


def as_factory(rng) -> StreamFactory:
    """Accept a seed or a factory."""
    if isinstance(rng, StreamFactory):
        return rng
    if isinstance(rng, (int, np.integer)):
        return StreamFactory(int(rng))
    if hasattr(rng, "generator"):
        return rng
    raise TypeError(f"expected a seed or StreamFactory, got {type(rng).__name__}")
