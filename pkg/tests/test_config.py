"""
Tests for the config module.
"""
import unittest
import sys
import os
import tempfile
from pathlib import Path
from unittest.mock import patch

# Add the parent directory to the path so we can import the application modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from config import Config, fingerprint_of
from exceptions import ConfigurationError


class TestConfigLayers(unittest.TestCase):
    """Test cases for layered configuration resolution."""

    def setUp(self):
        """Set up test fixtures."""
        self.config = Config(load_from_env=False, profile="PAPER")
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_defaults(self):
        """Test the default values of the PAPER profile."""
        self.assertEqual(self.config.IMAGE_SIZE, 224)
        self.assertEqual(self.config.BACKBONE, "vgg19")
        self.assertEqual(self.config.HEAD_EPOCHS, 300)
        self.assertEqual(self.config.FINETUNE_EPOCHS, 100)
        self.assertEqual(self.config.RANDOM_CROP_MIN_SEP, 100)
        self.assertEqual(self.config.HEAD_WIDTHS[-1], 2)
        self.assertEqual(len(self.config.HEAD_WIDTHS), 9)
        self.assertEqual(self.config.source_of("IMAGE_SIZE"), "default")

    def test_desk_profile(self):
        """The DESK profile switches to the small backbone."""
        self.config.reset(profile="DESK")
        self.assertEqual(self.config.BACKBONE, "tiny")
        self.assertFalse(self.config.PRETRAINED)
        self.assertEqual(self.config.source_of("BACKBONE"), "profile")

    def test_unknown_profile(self):
        """Test that an unknown profile raises ConfigurationError."""
        with self.assertRaises(ConfigurationError):
            self.config.reset(profile="HUGE")

    def test_file_layer(self):
        """Test loading a YAML file on top of the profile."""
        path = Path(self.tmp.name) / "run.yaml"
        path.write_text("profile: DESK\nbatch_size: 4\nCOLUMNS: 2\n", encoding="utf-8")
        self.config.load_file(path)
        self.assertEqual(self.config.PROFILE, "DESK")
        self.assertEqual(self.config.BATCH_SIZE, 4)
        self.assertEqual(self.config.COLUMNS, 2)
        self.assertEqual(self.config.source_of("BATCH_SIZE"), "file")

    def test_file_with_unknown_key(self):
        """Unknown keys in a file are rejected."""
        path = Path(self.tmp.name) / "bad.yaml"
        path.write_text("NOT_A_KEY: 1\n", encoding="utf-8")
        with self.assertRaises(ConfigurationError):
            self.config.load_file(path)

    def test_unreadable_file(self):
        """Test that a missing file raises ConfigurationError."""
        with self.assertRaises(ConfigurationError):
            self.config.load_file(Path(self.tmp.name) / "missing.yaml")

    def test_env_layer(self):
        """Test loading typed values from the environment."""
        env = {"MCA_SEED": "42", "MCA_HEAD_LR": "0.5", "MCA_PRETRAINED": "false",
               "MCA_SPLIT_RATIOS": "0.6, 0.2, 0.2", "MCA_BACKBONE": "alexnet"}
        with patch.dict(os.environ, env):
            self.config.load_from_env()
        self.assertEqual(self.config.SEED, 42)
        self.assertEqual(self.config.HEAD_LR, 0.5)
        self.assertFalse(self.config.PRETRAINED)
        self.assertEqual(self.config.SPLIT_RATIOS, [0.6, 0.2, 0.2])
        self.assertEqual(self.config.BACKBONE, "alexnet")
        self.assertEqual(self.config.source_of("SEED"), "env")

    def test_invalid_env_value_is_ignored(self):
        """Test that a malformed integer keeps the previous value."""
        with patch.dict(os.environ, {"MCA_BATCH_SIZE": "many"}):
            self.config.load_from_env()
        self.assertEqual(self.config.BATCH_SIZE, 32)

    def test_overrides(self):
        """Test explicit overrides and unknown keys."""
        self.config.apply_overrides({"seed": 7})
        self.assertEqual(self.config.SEED, 7)
        self.assertEqual(self.config.source_of("SEED"), "override")
        with self.assertRaises(ConfigurationError):
            self.config.apply_overrides({"bogus": 1})

    def test_fingerprint_tracks_values(self):
        """The fingerprint changes with any resolved value."""
        before = self.config.fingerprint()
        self.assertEqual(before, Config(load_from_env=False, profile="PAPER").fingerprint())
        self.config.apply_overrides({"SEED": 99})
        self.assertNotEqual(before, self.config.fingerprint())
        self.assertEqual(fingerprint_of({"a": 1, "b": 2}), fingerprint_of({"b": 2, "a": 1}))

    def test_dump_round_trip(self):
        """A dumped configuration loads back to the same fingerprint."""
        self.config.apply_overrides({"SEED": 5, "COLUMNS": 2})
        path = Path(self.tmp.name) / "config.yaml"
        self.config.dump(path)
        other = Config(load_from_env=False, profile="PAPER")
        other.load_file(path)
        self.assertEqual(other.fingerprint(), self.config.fingerprint())


if __name__ == '__main__':
    unittest.main()
