import threading
from collections import OrderedDict
from typing import Optional, Tuple

import numpy as np
from loguru import logger

from app.core.config import settings


Key = Tuple[str, Tuple[int, ...], Tuple[int, ...]]


class GeodesicCache:
    """Warm starts for the surface Log solver keyed by quantized (x, v) pairs.

    Values are ambient initial velocities. Concurrent writers for the same key
    store equivalent solutions, so the map is last-write-wins.
    """

    def __init__(self, grid: Optional[float] = None, max_entries: Optional[int] = None):
        self.grid = grid or settings.GEODESIC_CACHE_GRID
        self.max_entries = max_entries or settings.GEODESIC_CACHE_MAX_ENTRIES
        self._entries: "OrderedDict[Key, np.ndarray]" = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def key(self, surface_id: str, x: np.ndarray, v: np.ndarray) -> Key:
        qx = tuple(int(k) for k in np.round(np.asarray(x, dtype=float) / self.grid))
        qv = tuple(int(k) for k in np.round(np.asarray(v, dtype=float) / self.grid))
        return (surface_id, qx, qv)

    def get(self, surface_id: str, x: np.ndarray, v: np.ndarray) -> Optional[np.ndarray]:
        k = self.key(surface_id, x, v)
        with self._lock:
            value = self._entries.get(k)
            if value is None:
                self.misses += 1
                return None
            self.hits += 1
            return value.copy()

    def put(self, surface_id: str, x: np.ndarray, v: np.ndarray, velocity: np.ndarray) -> None:
        k = self.key(surface_id, x, v)
        with self._lock:
            self._entries[k] = np.array(velocity, dtype=float)
            while len(self._entries) > self.max_entries:
                self._entries.popitem(last=False)

    def lookup_rows(self, surface_id: str, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Cached velocities per row, NaN where nothing is stored."""
        out = np.full(x.shape, np.nan)
        for i in range(x.shape[0]):
            value = self.get(surface_id, x[i], v[i])
            if value is not None:
                out[i] = value
        return out

    def store_rows(self, surface_id: str, x: np.ndarray, v: np.ndarray, velocity: np.ndarray, mask: np.ndarray) -> None:
        for i in np.flatnonzero(mask):
            self.put(surface_id, x[i], v[i], velocity[i])

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()
            self.hits = 0
            self.misses = 0
        logger.debug("Geodesic cache cleared")

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


# Singleton
geodesic_cache = GeodesicCache()
