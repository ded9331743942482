"""Named random streams: every source of randomness is keyed by (seed, name)."""

from __future__ import annotations

import hashlib
import logging

import numpy as np

log = logging.getLogger(__name__)


def seed_stream(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.blake2b(name.encode(), digest_size=8).digest()
    log.debug("seed stream %r <- seed %d", name, seed)
    return np.random.default_rng([seed, int.from_bytes(digest, "little")])
