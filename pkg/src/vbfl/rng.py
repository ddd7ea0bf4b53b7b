"""Deterministic named random substreams.

Every stochastic component of a run draws from its own substream, derived
from the run's master seed plus a label path, e.g. ``("noise", device_hex,
round)``. Streams with different paths are independent, so changing how one
component consumes randomness never perturbs another component's draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _digest(master_seed: int, path: tuple) -> bytes:
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode())
    for part in path:
        if isinstance(part, bytes):
            token = b"b:" + part.hex().encode()
        else:
            token = b"s:" + str(part).encode()
        h.update(b"/")
        h.update(token)
    return h.digest()


def substream(master_seed: int, *path) -> np.random.Generator:
    """Generator keyed by (master_seed, *path); same key, same stream."""
    return np.random.default_rng(int.from_bytes(_digest(master_seed, path), "big"))


def derive_seed(master_seed: int, *path) -> int:
    """64-bit integer seed keyed by (master_seed, *path)."""
    return int.from_bytes(_digest(master_seed, path)[:8], "big")
