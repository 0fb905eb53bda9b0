import numpy as np
import pytest

from app.db.base import store
from app.db.geodesic_cache import geodesic_cache
from app.models.geometry import ManifoldPoint


@pytest.fixture(autouse=True)
def isolated_store(tmp_path):
    """Route every result file of a test into its own directory."""
    previous = store.root
    store.set_root(tmp_path / "results")
    store.reset()
    yield store
    store.set_root(previous)


@pytest.fixture(autouse=True)
def fresh_geodesic_cache():
    geodesic_cache.clear()
    yield
    geodesic_cache.clear()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def point(manifold_id, coords):
    return ManifoldPoint(manifold_id=manifold_id, coords=[float(c) for c in coords])
