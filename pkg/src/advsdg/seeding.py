"""Deterministic RNG substreams derived from a single root seed.

Every randomized component pulls from a named substream so that, e.g.,
changing the patch count never perturbs the data ordering of an otherwise
identical run.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

# Fixed ids keep streams stable across releases; never renumber.
_STREAM_IDS = {
    "data": 0,
    "style": 1,
    "patches": 2,
    "init": 3,
    "geometry": 4,
    "texture": 5,
    "augment": 6,
    "split": 7,
    "preview": 8,
}


def _as_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"substream key must be int or str, got {type(key).__name__}")


def substream(seed: int, name: str, *keys) -> np.random.Generator:
    """Return the numpy generator for stream `name` (plus optional sub-keys)."""
    if name not in _STREAM_IDS:
        raise KeyError(f"unknown stream {name!r}; known: {sorted(_STREAM_IDS)}")
    entropy = (int(seed), _STREAM_IDS[name]) + tuple(_as_int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def torch_generator(rng: np.random.Generator) -> torch.Generator:
    """Fork a torch CPU generator off a numpy substream."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(rng.integers(0, 2**63 - 1)))
    return gen
