from .base import ResultStore, store
from .geodesic_cache import GeodesicCache, geodesic_cache
