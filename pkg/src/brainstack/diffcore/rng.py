"""Named, splittable random streams on top of numpy's counter-based Philox."""
from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def make_rng(seed: int | Sequence[int], *names) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``; same key, same stream."""
    seeds = [seed] if isinstance(seed, (int, np.integer)) else list(seed)
    entropy = [_key(s) for s in seeds]
    ss = np.random.SeedSequence(entropy, spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.Philox(ss))
