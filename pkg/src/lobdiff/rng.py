"""Counter-based random streams keyed by (master seed, path, purpose, sub-stream).

Each stream is a Philox generator whose 128-bit key packs the master seed in
one word and (path, sub, purpose) in the other.  Streams never overlap, and
a path's draws do not depend on how many other paths run alongside it or how
the draws are chunked.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

EVENT = 1
ORDER = 2
BERNOULLI = 3
PRICE_NOISE = 4
VOLUME_NOISE = 5
BOOTSTRAP = 6
AUX = 7

_MASK64 = (1 << 64) - 1


def stream(seed: int, path: int = 0, purpose: int = AUX, sub: int = 0) -> np.random.Generator:
    if not (0 <= path < 2**32 and 0 <= sub < 2**24 and 0 <= purpose < 2**8):
        raise ValueError(f"stream key out of range: path={path}, sub={sub}, purpose={purpose}")
    if seed < 0 or seed > _MASK64:
        raise ValueError("master seed must fit in 64 unsigned bits")
    key = np.array([seed, (path << 32) | (sub << 8) | purpose], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class BatchStreams:
    """One stream per path for a single purpose, drawn in lockstep blocks."""

    def __init__(self, seed: int, paths: Sequence[int], purpose: int, sub: int = 0):
        self.gens = [stream(seed, int(p), purpose, sub) for p in paths]

    def uniforms(self, n_steps: int, width: int = 1) -> np.ndarray:
        """Array (n_steps, n_paths, width) of U(0, 1) draws."""
        if not self.gens:
            return np.zeros((n_steps, 0, width))
        return np.stack([g.random((n_steps, width)) for g in self.gens], axis=1)

    def normals(self, n_steps: int, width: int = 1) -> np.ndarray:
        if not self.gens:
            return np.zeros((n_steps, 0, width))
        return np.stack([g.standard_normal((n_steps, width)) for g in self.gens], axis=1)
