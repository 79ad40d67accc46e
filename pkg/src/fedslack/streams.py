"""Deterministic derivation of per-purpose RNG streams from one master seed.

Every source of randomness in a run is drawn from a stream keyed by
(master_seed, purpose, round, client, batch).  The purpose label is mixed
in via CRC32 so adding a new purpose, round, or client never perturbs the
streams of the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(master_seed: int, purpose: str, round_idx: int = 0,
           client_id: int = 0, batch_idx: int = 0) -> np.random.Generator:
    """Return an independent Generator for the given coordinates."""
    key = [
        int(master_seed),
        zlib.crc32(purpose.encode("utf-8")),
        int(round_idx),
        int(client_id),
        int(batch_idx),
    ]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
