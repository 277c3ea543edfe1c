"""Named random streams derived from one master seed.

Each consumer (data, init, mixing, selector, ...) gets its own stream, so
turning one feature on or off never shifts another feature's random draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def seed_sequence(master: int, name: str, *extra) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), _key(name), *(_key(e) for e in extra)])


def stream(master: int, name: str, *extra) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master, name, *extra))


def child_seed(master: int, name: str, *extra) -> int:
    return int(seed_sequence(master, name, *extra).generate_state(1, np.uint64)[0])
