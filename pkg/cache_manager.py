#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Cache Manager for mcaesthetics.

Keeps track of the image and variant caches so they can be cleared together
under memory pressure or between runs.
"""

import threading
from typing import Any, Dict

from logging_config import StructuredLogger
from utils import LRUCache

logger = StructuredLogger(__name__)


class CacheManager:
    """Centralized cache management system.

    Provides registration, clearing and statistics for all registered caches.
    """

    def __init__(self):
        """Initialize the cache manager."""
        self._lru_caches: Dict[str, LRUCache] = {}
        self._lock = threading.Lock()

    def register_lru_cache(self, name: str, cache: LRUCache) -> None:
        """Register an LRU cache with the manager.

        Args:
            name: A unique name for the cache
            cache: The LRUCache instance to register
        """
        with self._lock:
            self._lru_caches[name] = cache
        logger.debug(f"Registered LRU cache: {name}")

    def unregister(self, name: str) -> None:
        with self._lock:
            self._lru_caches.pop(name, None)

    def clear_all_caches(self) -> Dict[str, Any]:
        """Clear all registered caches.

        Returns:
            dict: Number of entries removed per cache
        """
        results: Dict[str, Any] = {}
        with self._lock:
            caches = dict(self._lru_caches)
        for name, cache in caches.items():
            try:
                results[name] = cache.clear()
            except Exception as e:
                logger.error(f"Error clearing LRU cache {name}: {e}")
                results[name] = f"Error: {e}"
        logger.info("Cache clearing complete", results=results)
        return results

    def clear_cache_by_name(self, name: str) -> int:
        """Clear a specific cache by name.

        Raises:
            ValueError: If the cache name is not found
        """
        with self._lock:
            cache = self._lru_caches.get(name)
        if cache is None:
            logger.warning(f"Cache {name} not found")
            raise ValueError(f"Cache {name} not found")
        count = cache.clear()
        logger.info(f"Cleared LRU cache {name}: {count} items removed")
        return count

    def get_stats(self) -> Dict[str, Any]:
        """Get statistics for all registered caches."""
        with self._lock:
            caches = dict(self._lru_caches)
        return {name: cache.get_stats() for name, cache in caches.items()}


# Create a singleton instance
cache_manager = CacheManager()
