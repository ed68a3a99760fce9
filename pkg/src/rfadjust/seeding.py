"""Deterministic seed derivation for independent random streams."""

import numpy as np


def derive_seed(root: int, *path: int) -> int:
    """64-bit seed for the stream addressed by ``(root, *path)``.

    Distinct paths give statistically independent streams (numpy
    ``SeedSequence`` spawn keys), so work can be split across workers in any
    order without changing results.
    """
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in path))
    hi, lo = ss.generate_state(2, np.uint32)
    return (int(hi) << 32) | int(lo)


def stream(root: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in path)))
