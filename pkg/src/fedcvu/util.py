"""Small shared helpers: seeded RNG streams and environment knobs.

Every random draw in the package goes through `rng_for`, which derives an
independent generator from (seed, stream, *extra) via SeedSequence. The
stream ids below are part of the determinism contract: given the same
experiment seed, the same draws happen in the same order regardless of
thread count or method.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError

# Stream ids. Keep stable: reference implementations in the test suite
# rely on them to replay client-side draws.
STREAM_GEN = 0          # synthetic data generation
STREAM_SPLIT = 1        # train/test eval splits
STREAM_PARTITION = 2    # client sharding
STREAM_INIT = 3         # global model init
STREAM_CLIENT = 4       # per-client training (extra = client_id)
STREAM_SKETCH = 5       # signature projection matrices (extra = block_id)

THREADS_ENV = "FEDCVU_THREADS"


def rng_for(seed: int, stream: int, *extra: int) -> np.random.Generator:
    """Deterministic generator for a named stream under an experiment seed."""
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), *map(int, extra)]))


def thread_count() -> int:
    """Worker cap from the environment; 0 means run clients serially."""
    raw = os.environ.get(THREADS_ENV, "0")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ConfigError(f"{THREADS_ENV} must be >= 0, got {n}")
    return n
