import numpy as np
import pytest

from htte import synth
from htte.network import RoadNetwork, RoadSegment


@pytest.fixture(scope="session")
def lattice():
    """3 x 3 lattice (24 directed segments) and its node-pair -> id map."""
    return synth.lattice_network(3, 3)


def chain_network(n: int, length: float = 100.0) -> RoadNetwork:
    """Segments 0 -> 1 -> ... -> n-1 along a straight east-west street."""
    lon0, lat0, step = 23.7, 38.0, 0.001
    return RoadNetwork(
        RoadSegment(i, ((lon0 + i * step, lat0), (lon0 + (i + 1) * step, lat0)), length, (i + 1,) if i + 1 < n else ())
        for i in range(n)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
