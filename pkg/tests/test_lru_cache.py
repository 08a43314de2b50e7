"""
Tests for the LRUCache class.
"""
import unittest
import sys
import os
import threading
from unittest.mock import patch

# Add the parent directory to the path so we can import the application modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from utils import LRUCache


class TestLRUCache(unittest.TestCase):
    """Test cases for the LRUCache class."""

    def setUp(self):
        """Set up test fixtures."""
        self.cache = LRUCache(maxsize=3, eviction_percent=1)

    def test_put_and_get(self):
        """Test basic put and get operations."""
        self.cache.put("key1", "value1")
        self.assertEqual(self.cache.get("key1"), "value1")

    def test_get_missing_key(self):
        """Test getting a missing key returns None and counts a miss."""
        self.assertIsNone(self.cache.get("missing"))
        self.assertEqual(self.cache.get_stats()["misses"], 1)

    def test_eviction_order(self):
        """The least recently used entry is evicted first."""
        self.cache.put("a", 1)
        self.cache.put("b", 2)
        self.cache.put("c", 3)
        self.cache.get("a")  # a becomes most recent
        self.cache.put("d", 4)

        self.assertIsNone(self.cache.get("b"))
        self.assertEqual(self.cache.get("a"), 1)
        self.assertEqual(self.cache.get("d"), 4)
        self.assertEqual(self.cache.get_stats()["evictions"], 1)

    def test_update_existing_key_does_not_evict(self):
        """Test that updating a key keeps the size unchanged."""
        for key in ("a", "b", "c"):
            self.cache.put(key, key)
        self.cache.put("a", "updated")
        self.assertEqual(len(self.cache), 3)
        self.assertEqual(self.cache.get("a"), "updated")

    def test_eviction_percent(self):
        """A larger eviction percentage evicts several entries at once."""
        cache = LRUCache(maxsize=10, eviction_percent=50)
        for i in range(10):
            cache.put(i, i)
        cache.put(10, 10)
        self.assertEqual(len(cache), 6)
        self.assertIsNone(cache.get(0))
        self.assertEqual(cache.get(5), 5)

    def test_ttl_expiration(self):
        """Entries past their time to live are dropped on access."""
        cache = LRUCache(maxsize=3, ttl_seconds=10)
        with patch("utils.time.monotonic", return_value=100.0):
            cache.put("k", "v")
        with patch("utils.time.monotonic", return_value=105.0):
            self.assertEqual(cache.get("k"), "v")
        with patch("utils.time.monotonic", return_value=111.0):
            self.assertIsNone(cache.get("k"))
        stats = cache.get_stats()
        self.assertEqual(stats["ttl_expirations"], 1)
        self.assertTrue(stats["ttl_enabled"])

    def test_clear(self):
        """Test clearing the cache returns the number of removed entries."""
        self.cache.put("a", 1)
        self.cache.put("b", 2)
        self.assertEqual(self.cache.clear(), 2)
        self.assertEqual(len(self.cache), 0)

    def test_stats(self):
        """Test hit ratio computation."""
        self.cache.put("a", 1)
        self.cache.get("a")
        self.cache.get("b")
        stats = self.cache.get_stats()
        self.assertEqual(stats["hits"], 1)
        self.assertEqual(stats["misses"], 1)
        self.assertAlmostEqual(stats["hit_ratio"], 0.5)
        self.assertEqual(stats["maxsize"], 3)

    def test_invalid_maxsize(self):
        """Test that a non-positive maxsize is rejected."""
        with self.assertRaises(ValueError):
            LRUCache(maxsize=0)

    def test_concurrent_access(self):
        """Concurrent writers never push the cache past its bound."""
        cache = LRUCache(maxsize=50)

        def worker(offset):
            for i in range(200):
                cache.put(offset * 1000 + i, i)
                cache.get(offset * 1000 + i)

        threads = [threading.Thread(target=worker, args=(n,)) for n in range(4)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        self.assertLessEqual(len(cache), 50)


if __name__ == '__main__':
    unittest.main()
