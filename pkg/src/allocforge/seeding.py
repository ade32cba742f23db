"""Named random sub-streams derived from one master seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(master: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name``; same (master, name, extra) gives the same stream."""
    return np.random.default_rng([int(master), zlib.crc32(name.encode()), *map(int, extra)])


def stream_int(master: int, name: str, *extra: int) -> int:
    return int(stream(master, name, *extra).integers(0, 2**31 - 1))
