"""Counter-based random streams (Philox) keyed by seed and stream id."""

from __future__ import annotations

import os

import numpy as np

SEED_ENV = "RFM_SEED"


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent, reproducible generator for ``(seed, stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def resolve_seed(seed: int | None, default: int = 0) -> int:
    """Explicit seed wins, then the RFM_SEED environment variable, then ``default``."""
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else default


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    bg.state = state
    return np.random.Generator(bg)
