#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
General utilities and helper classes for mcaesthetics.

Includes Memory Monitor, LRU Cache, Performance Timer and the seeding helpers
that keep preprocessing and training reproducible.
"""

import gc
import hashlib
import os
import random
import threading
import time
from collections import OrderedDict
from contextlib import contextmanager
from datetime import datetime, timezone
from typing import Any, Dict, Optional

import numpy as np
import psutil

from config import config
from logging_config import StructuredLogger

logger = StructuredLogger(__name__)


# --- Seeding ---

def derive_seed(*parts: Any) -> int:
    """Derive a 63-bit seed from arbitrary parts (seed, record id, epoch...).

    Uses SHA-256 over the joined string form so the value is stable across
    processes and platforms, unlike ``hash()``.
    """
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def seed_everything(seed: int, deterministic: Optional[bool] = None) -> None:
    """Seed python, numpy and torch and optionally force deterministic kernels."""
    import torch

    deterministic = config.DETERMINISTIC if deterministic is None else deterministic
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False
    logger.debug("Seeded random generators", seed=seed, deterministic=deterministic)


# --- Memory Monitor ---

class MemoryMonitor:
    """Monitors system and process memory usage during preprocessing and training.

    Provides methods to check memory usage and trigger cache clearing when
    memory pressure is detected.
    """

    _last_check_time = 0.0
    _warning_issued = False
    _memory_pressure = False
    _process = psutil.Process(os.getpid())

    @classmethod
    def get_process_memory_mb(cls) -> float:
        """Get the current memory usage (RSS) of this process in megabytes.

        Returns:
            float: Memory usage in MB, or 0.0 if unavailable.
        """
        try:
            return cls._process.memory_info().rss / (1024 * 1024)
        except psutil.NoSuchProcess:
            cls._process = psutil.Process(os.getpid())
            return cls._process.memory_info().rss / (1024 * 1024)
        except Exception as e:
            logger.debug(f"Error reading process memory: {e}")
            return 0.0

    @classmethod
    def get_system_available_memory_mb(cls) -> float:
        """Get the amount of available system memory in megabytes."""
        try:
            return psutil.virtual_memory().available / (1024 * 1024)
        except Exception as e:
            logger.debug(f"Error reading system available memory: {e}")
            return float("inf")

    @classmethod
    def check_memory_pressure(cls, force_check: bool = False) -> bool:
        """Check if the system or process is under memory pressure based on configured thresholds.

        Args:
            force_check: If True, bypass the check interval and perform the check immediately.

        Returns:
            bool: True if memory pressure is detected, False otherwise.
        """
        current_time = time.monotonic()
        if not force_check and (current_time - cls._last_check_time < config.MEMORY_CHECK_INTERVAL_SECONDS):
            return cls._memory_pressure

        cls._last_check_time = current_time
        process_memory = cls.get_process_memory_mb()
        system_available = cls.get_system_available_memory_mb()
        is_under_pressure = (
            process_memory > config.MEMORY_PRESSURE_THRESHOLD_MB
            or system_available < config.SYSTEM_LOW_MEMORY_THRESHOLD_MB
        )
        cls._memory_pressure = is_under_pressure

        log_details = {
            "process_memory_mb": round(process_memory, 2),
            "system_available_mb": round(system_available, 2),
            "under_pressure": is_under_pressure,
        }
        if is_under_pressure and not cls._warning_issued:
            logger.warning("Memory pressure detected", **log_details)
            cls._warning_issued = True
        elif not is_under_pressure and cls._warning_issued:
            logger.info("Memory pressure resolved", **log_details)
            cls._warning_issued = False

        return is_under_pressure

    @classmethod
    def clear_caches_if_needed(cls, force_clear: bool = False) -> bool:
        """Clear registered caches if memory pressure is detected or forced.

        Returns:
            bool: True if caches were cleared, False otherwise.
        """
        if not (force_clear or cls.check_memory_pressure(force_check=True)):
            return False

        from cache_manager import cache_manager
        logger.warning("Forcing cache clear" if force_clear else "High memory pressure detected, clearing caches")
        results = cache_manager.clear_all_caches()
        gc.collect()
        logger.info(f"Cache clearing finished. {len(results)} caches were cleared.")
        return True

    @classmethod
    def snapshot(cls) -> Dict[str, Any]:
        """Memory figures suitable for attaching to a log record."""
        return {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "process_memory_mb": round(cls.get_process_memory_mb(), 1),
            "system_available_mb": round(cls.get_system_available_memory_mb(), 1),
        }


# --- Performance Timer ---

@contextmanager
def performance_timer(operation_name: str, threshold_ms: float = 100.0):
    """Context manager for timing operations with threshold-based logging.

    Logs the duration of the enclosed code block. Logs at INFO level if duration
    exceeds threshold_ms, WARNING if it significantly exceeds it, otherwise DEBUG.

    Args:
        operation_name: A descriptive name for the operation being timed.
        threshold_ms: Threshold in milliseconds. Defaults to 100ms.

    Yields:
        dict: Filled with ``duration_ms`` when the block exits.
    """
    timing: Dict[str, float] = {}
    start_time = time.monotonic()
    try:
        yield timing
    finally:
        duration_ms = (time.monotonic() - start_time) * 1000
        timing["duration_ms"] = duration_ms

        log_data = {
            "operation": operation_name,
            "duration_ms": round(duration_ms, 2),
            "threshold_ms": threshold_ms
        }

        if duration_ms > threshold_ms * 10:
            logger.warning(f"SLOW OPERATION: '{operation_name}' took {duration_ms:.2f}ms", **log_data)
        elif duration_ms > threshold_ms:
            logger.info(f"Performance watch: '{operation_name}' took {duration_ms:.2f}ms", **log_data)
        else:
            logger.debug(f"Performance: '{operation_name}' completed in {duration_ms:.2f}ms", **log_data)


# --- LRU Cache ---

class LRUCache:
    """Thread-safe Least Recently Used (LRU) Cache with Time-To-Live (TTL) support.

    Provides a dictionary-like object with a maximum size. When the cache is full,
    it discards the least recently used items. Optional TTL ensures items expire
    after a set duration. Safe to share between DataLoader threads.
    """

    def __init__(self, maxsize: int = 128, ttl_seconds: Optional[float] = None,
                 eviction_percent: Optional[int] = None):
        """Initialize the LRU cache.

        Args:
            maxsize: The maximum number of items to store in the cache. Must be > 0.
            ttl_seconds: Optional time-to-live in seconds for cached items.
            eviction_percent: Percentage (1-100) of cache to evict when full.
                              Defaults to config value.
        """
        if maxsize <= 0:
            raise ValueError("LRUCache maxsize must be greater than 0")
        if eviction_percent is None:
            eviction_percent = config.CACHE_EVICTION_PERCENT
        self.maxsize = maxsize
        self.ttl_seconds = ttl_seconds
        self.eviction_percent = max(1, min(int(eviction_percent), 100))
        self._num_to_evict = max(1, int(self.maxsize * (self.eviction_percent / 100.0)))

        self._cache: "OrderedDict[Any, Any]" = OrderedDict()
        self._expiry: Optional[Dict[Any, float]] = {} if ttl_seconds is not None else None
        self._lock = threading.Lock()

        self._stats = {
            "hits": 0,
            "misses": 0,
            "evictions": 0,
            "ttl_expirations": 0,
        }
        logger.debug(f"LRUCache initialized: maxsize={maxsize}, ttl={ttl_seconds}s")

    def get(self, key: Any) -> Optional[Any]:
        """Retrieve an item from the cache. Returns None if not found or expired."""
        with self._lock:
            if key not in self._cache:
                self._stats["misses"] += 1
                return None

            if self._expiry is not None:
                expiry_time = self._expiry.get(key)
                if expiry_time is not None and time.monotonic() > expiry_time:
                    self._stats["ttl_expirations"] += 1
                    self._stats["misses"] += 1
                    self._cache.pop(key, None)
                    self._expiry.pop(key, None)
                    return None

            value = self._cache[key]
            self._cache.move_to_end(key)
            self._stats["hits"] += 1
            return value

    def put(self, key: Any, value: Any) -> None:
        """Add or update an item in the cache."""
        with self._lock:
            if key not in self._cache and len(self._cache) >= self.maxsize:
                self._evict_lru_items()

            self._cache[key] = value
            self._cache.move_to_end(key)

            if self._expiry is not None:
                self._expiry[key] = time.monotonic() + self.ttl_seconds

    def _evict_lru_items(self) -> None:
        """Evict the oldest eviction_percent of entries. Caller holds the lock."""
        for _ in range(self._num_to_evict):
            if not self._cache:
                break
            old_key, _ = self._cache.popitem(last=False)
            if self._expiry is not None:
                self._expiry.pop(old_key, None)
            self._stats["evictions"] += 1

    def clear(self) -> int:
        """Remove all items from the cache.

        Returns:
            int: The number of items removed.
        """
        with self._lock:
            count = len(self._cache)
            self._cache.clear()
            if self._expiry is not None:
                self._expiry.clear()
            return count

    def __len__(self) -> int:
        with self._lock:
            return len(self._cache)

    def get_stats(self) -> Dict[str, Any]:
        """Get cache usage statistics."""
        with self._lock:
            stats = self._stats.copy()
            stats["size"] = len(self._cache)
            stats["maxsize"] = self.maxsize
            stats["ttl_enabled"] = self.ttl_seconds is not None
            total_lookups = stats["hits"] + stats["misses"]
            stats["hit_ratio"] = (stats["hits"] / total_lookups) if total_lookups > 0 else 0.0
            return stats
