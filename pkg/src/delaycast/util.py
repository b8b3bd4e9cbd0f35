"""Shared numerics: reproducible sample quantiles and seed plumbing.

All random streams in the package descend from a single integer seed via
``numpy.random.SeedSequence``; the salts below keep the streams of different
operations disjoint without any global state.
"""

from __future__ import annotations

import numpy as np

# Stream salts: one per operation that consumes randomness downstream of a fit.
SALT_NOWCAST = 11
SALT_FORECAST = 12
SALT_REPLICATE = 13
SALT_COVERAGE = 14
SALT_SIMULATE = 21
SALT_RECOVERY = 22


def rng_for(seed: int, salt: int, *extra: int) -> np.random.Generator:
    """Independent generator for one operation, derived from the run seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(salt), *map(int, extra)]))


def chain_seed_sequences(seed: int, n_chains: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(int(seed)).spawn(n_chains)


def empirical_quantile(x, q, axis: int = -1):
    """Type-1 (inverted CDF) sample quantile.

    Always returns an element of the sample, so results are reproducible
    across platforms with no interpolation ambiguity.
    """
    x = np.sort(np.asarray(x), axis=axis)
    q_arr = np.asarray(q, dtype=float)
    if np.any((q_arr <= 0.0) | (q_arr >= 1.0)):
        raise ValueError("quantile levels must lie strictly inside (0, 1)")
    n = x.shape[axis]
    if n == 0:
        raise ValueError("cannot take quantiles of an empty sample")
    idx = np.maximum(np.ceil(q_arr * n).astype(np.int64) - 1, 0)
    return np.take(x, idx, axis=axis)


def equal_tailed_interval(x, level: float, axis: int = -1):
    """Equal-tailed interval of probability ``level`` from sample quantiles."""
    if not 0.0 < level < 1.0:
        raise ValueError("interval level must lie in (0, 1)")
    tail = (1.0 - level) / 2.0
    lo = empirical_quantile(x, tail, axis=axis)
    hi = empirical_quantile(x, 1.0 - tail, axis=axis)
    return lo, hi
