"""Seeded random streams.

Every stream is a Philox counter-based generator keyed by a seed plus a
tuple of integer tags, so independent consumers (graph draws, problem
generation, per-agent sampling) never share state and fixtures stay stable
across platforms.
"""

import numpy as np

# Domain tags keep streams for different purposes disjoint.
TAG_GRAPH = 0
TAG_PROBLEM = 1
TAG_AGENTS = 2


def make_rng(seed: int, *tags: int) -> np.random.Generator:
    """Return a Philox generator keyed by ``(seed, *tags)``."""
    ss = np.random.SeedSequence([int(seed), *(int(t) for t in tags)])
    return np.random.Generator(np.random.Philox(ss))


def agent_streams(seed: int, m: int) -> list[np.random.Generator]:
    """One independent generator per agent, derived from a single seed."""
    ss = np.random.SeedSequence([int(seed), TAG_AGENTS])
    return [np.random.Generator(np.random.Philox(child)) for child in ss.spawn(m)]
