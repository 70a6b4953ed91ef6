"""Expansion of the single project seed into per-module streams.

``derive_seed(root, name)`` hashes ``(root, crc32(name))`` through numpy's
``SeedSequence`` and returns a 32-bit integer, so each module ("encoder",
"lm", "adapter", "lora", "trainer", "pipeline", ...) gets an independent,
reproducible stream from one root seed.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(root: int, name: str) -> int:
    ss = np.random.SeedSequence([root & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


def derive_rng(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, name))
