"""Shared fixtures and state builders for the test suite."""

import numpy as np
import pytest

from rlshield.surface import FlowPools, WorldState


@pytest.fixture(scope="session")
def shared_pools():
    return FlowPools.synthetic(d=6, seed=0, rows=400)


def make_state(levels, **kw):
    """WorldState with default modifier arrays, for hand-built transitions."""
    levels = np.asarray(levels, dtype=np.int8)
    n = len(levels)
    base = dict(
        levels=levels,
        exfiltrated=False,
        t=0,
        isolated=np.zeros(n, dtype=bool),
        blocked=np.zeros(n, dtype=bool),
        throttled=np.zeros(n, dtype=bool),
        miss_factor=np.ones(n),
    )
    base.update(kw)
    return WorldState(**base)
