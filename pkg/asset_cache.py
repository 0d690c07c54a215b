"""
asset_cache.py
Thread-safe LRU cache for decoded assets (PNG textures and images).

Loader threads in the worker pool share one cache; the lock guards both the
recency order and eviction.
"""

import threading
from collections import OrderedDict
from typing import Callable, Hashable, Optional, TypeVar

V = TypeVar("V")


class AssetCache:
    def __init__(self, capacity: int = 64) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._entries: "OrderedDict[Hashable, object]" = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key: Hashable) -> Optional[object]:
        with self._lock:
            try:
                value = self._entries[key]
            except KeyError:
                self.misses += 1
                return None
            self._entries.move_to_end(key)
            self.hits += 1
            return value

    def put(self, key: Hashable, value: object) -> None:
        with self._lock:
            self._entries[key] = value
            self._entries.move_to_end(key)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)

    def get_or_load(self, key: Hashable, loader: Callable[[], V]) -> V:
        """
        Return the cached value or run `loader` and cache its result.

        Two threads missing on the same key may both run the loader; the
        results are equal, the later put wins.
        """
        value = self.get(key)
        if value is None:
            value = loader()
            self.put(key, value)
        return value  # type: ignore[return-value]

    def keys(self) -> list[Hashable]:
        """Least recently used first."""
        with self._lock:
            return list(self._entries)

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()
            self.hits = 0
            self.misses = 0

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)
