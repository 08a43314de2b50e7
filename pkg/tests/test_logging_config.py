"""
Tests for the logging configuration.
"""
import unittest
import sys
import os
import json
import logging
import tempfile
from pathlib import Path

# Add the parent directory to the path so we can import the application modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from logging_config import ConsoleFormatter, JSONFormatter, RunContextFilter, StructuredLogger, setup_logging


def _record(message="Epoch 1/3", data=None):
    record = logging.LogRecord("services.train", logging.INFO, __file__, 10, message, None, None)
    if data is not None:
        record.data = data
    return record


class TestFormatters(unittest.TestCase):
    """Test cases for the JSON and console formatters."""

    def test_json_carries_context(self):
        payload = json.loads(JSONFormatter().format(_record(data={"stage": "head", "loss": 0.25})))
        self.assertEqual(payload["message"], "Epoch 1/3")
        self.assertEqual(payload["level"], "INFO")
        self.assertEqual(payload["stage"], "head")
        self.assertEqual(payload["loss"], 0.25)

    def test_json_serializes_paths(self):
        payload = json.loads(JSONFormatter().format(_record(data={"path": Path("runs/x")})))
        self.assertEqual(payload["path"], str(Path("runs/x")))

    def test_console_key_values(self):
        line = ConsoleFormatter().format(_record(data={"stage": "head", "fingerprint": "abc"}))
        self.assertTrue(line.endswith("Epoch 1/3 stage=head"))
        self.assertIn("[INFO]", line)

    def test_run_context_filter(self):
        record = _record(data={"stage": "head"})
        self.assertTrue(RunContextFilter({"fingerprint": "abc", "command": None}).filter(record))
        self.assertEqual(record.data, {"fingerprint": "abc", "stage": "head"})

        bare = _record()
        RunContextFilter({"run_dir": "runs/x"}).filter(bare)
        self.assertEqual(bare.data, {"run_dir": "runs/x"})


class TestStructuredLogger(unittest.TestCase):
    """Test cases for StructuredLogger."""

    def test_bind_merges_context(self):
        log = StructuredLogger("tests.logging", {"a": 1}).bind(b=2)
        with self.assertLogs("tests.logging", level="INFO") as captured:
            log.info("hello", c=3)
        self.assertEqual(captured.records[0].data, {"a": 1, "b": 2, "c": 3})


class TestSetupLogging(unittest.TestCase):
    """Test cases for setup_logging."""

    def setUp(self):
        """Set up test fixtures."""
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        setup_logging(log_level_console="WARNING", log_file=None)
        self.tmp.cleanup()

    def test_run_log_file(self):
        log_file = Path(self.tmp.name) / "run" / "mcaesthetics.log"
        setup_logging(log_level_console="ERROR", log_level_file="DEBUG", log_file=log_file,
                      context={"fingerprint": "0123456789ab", "command": "train"})
        StructuredLogger("tests.logging").info("Stage finished", stage="head")
        for handler in logging.getLogger().handlers:
            handler.flush()
        lines = [json.loads(line) for line in log_file.read_text(encoding="utf-8").splitlines()]
        record = next(r for r in lines if r["message"] == "Stage finished")
        self.assertEqual(record["fingerprint"], "0123456789ab")
        self.assertEqual(record["command"], "train")
        self.assertEqual(record["stage"], "head")

    def test_without_file(self):
        setup_logging(log_level_console="warning", log_file=None)
        handlers = logging.getLogger().handlers
        self.assertEqual(len(handlers), 1)
        self.assertIsInstance(handlers[0], logging.StreamHandler)
        self.assertEqual(logging.getLogger().level, logging.WARNING)
        self.assertGreaterEqual(logging.getLogger("PIL").level, logging.INFO)


if __name__ == '__main__':
    unittest.main()
