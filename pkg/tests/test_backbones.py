"""
Tests for the backbones service.
"""
import unittest
import sys
import os
import tempfile
from pathlib import Path
from unittest.mock import patch

import torch
import torch.nn.functional as F

# Add the parent directory to the path so we can import the application modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from config import config
from exceptions import BadSpecError, WeightsIncompatibleError
from models import BackboneKind, HeadSpec, TrainablePolicy
from services.backbones import (backbone_spec, build_backbone, count_layers, ensure_pretrained_weights,
                                load_pretrained, parameter_checksums, port_state_dict, port_torchvision_weights,
                                replace_head, save_backbone_weights, set_trainable, strip_head)


def _tiny(head=(32, 2), pretrained=False, weights_path=None):
    network = build_backbone(backbone_spec("tiny", pretrained=pretrained, weights_path=weights_path))
    if head is not None:
        replace_head(network, HeadSpec(head))
    return network


def _changed(before, after, prefix):
    return [name for name in before if name.startswith(prefix) and before[name] != after[name]]


class TestBuildBackbone(unittest.TestCase):
    """Test cases for backbone construction."""

    def test_vgg19_structure(self):
        """VGG19 has 16 convolutions in blocks of 2/2/4/4/4, each closed by a pool."""
        spec = backbone_spec("vgg19", pretrained=False)
        network = build_backbone(spec)
        self.assertEqual(spec.conv_counts, [2, 2, 4, 4, 4])
        self.assertEqual([len(block.convs()) for block in network.blocks()], [2, 2, 4, 4, 4])
        self.assertEqual(count_layers(network), {"conv": 16, "pool": 5, "dense": 0})
        self.assertEqual(network.feature_dim, 512 * 7 * 7)

    @patch.object(config, "ALEXNET_HEAD_WIDTHS", [64, 32, 2])
    def test_alexnet_structure(self):
        """AlexNet has five convolutions and three dense layers."""
        network = build_backbone(backbone_spec("alexnet", pretrained=False))
        counts = count_layers(network)
        self.assertEqual((counts["conv"], counts["dense"]), (5, 3))
        logits = network(torch.zeros(2, 3, 224, 224))
        self.assertEqual(tuple(logits.shape), (2, 2))

    @patch.object(config, "TINY_CHANNELS", [8, 16])
    @patch.object(config, "TINY_POOL", 4)
    def test_tiny_feature_shape(self):
        network = _tiny(head=None)
        features = network(torch.randn(4, 3, 64, 64))
        self.assertEqual(tuple(features.shape), (4, 16 * 4 * 4))

    def test_unknown_kind(self):
        with self.assertRaises(BadSpecError):
            backbone_spec("resnet")

    def test_head_must_end_in_two(self):
        with self.assertRaises(BadSpecError):
            HeadSpec((16, 3))
        with self.assertRaises(BadSpecError):
            HeadSpec(())

    def test_spec_round_trip(self):
        spec = backbone_spec("alexnet", pretrained=False)
        self.assertEqual(type(spec).from_dict(spec.to_dict()), spec)


class TestReplaceHead(unittest.TestCase):
    """Test cases for head replacement."""

    @patch.object(config, "HEAD_WIDTHS", [32] * 8 + [2])
    def test_default_head_on_vgg19(self):
        """Nine dense layers end in two logits for any batch size."""
        network = build_backbone(backbone_spec("vgg19", pretrained=False))
        replace_head(network, HeadSpec.default())
        self.assertEqual(count_layers(network)["dense"], 9)
        for batch in (1, 5):
            logits = network(torch.zeros(batch, 3, 64, 64))
            self.assertEqual(tuple(logits.shape), (batch, 2))
            self.assertTrue(bool(torch.isfinite(logits).all()))

    def test_feature_weights_preserved(self):
        network = _tiny(head=(16, 2))
        before = {k: v for k, v in parameter_checksums(network).items() if k.startswith("block")}
        replace_head(network, HeadSpec((8, 8, 2)))
        after = {k: v for k, v in parameter_checksums(network).items() if k.startswith("block")}
        self.assertEqual(before, after)
        self.assertEqual(network.head.spec.widths, (8, 8, 2))

    def test_strip_head(self):
        network = strip_head(_tiny())
        self.assertEqual(network(torch.zeros(1, 3, 32, 32)).shape[1], network.feature_dim)


class TestTrainablePolicies(unittest.TestCase):
    """Test cases for freezing policies."""

    def _step(self, network, policy):
        torch.manual_seed(0)
        set_trainable(network, policy)
        before = parameter_checksums(network)
        optimizer = torch.optim.SGD([p for p in network.parameters() if p.requires_grad], lr=0.1)
        for _ in range(10):
            optimizer.zero_grad()
            loss = F.cross_entropy(network(torch.randn(4, 3, 32, 32)), torch.tensor([0, 1, 0, 1]))
            loss.backward()
            optimizer.step()
        return before, parameter_checksums(network)

    def test_head_only(self):
        network = _tiny()
        before, after = self._step(network, TrainablePolicy.HEAD_ONLY)
        self.assertEqual(_changed(before, after, "block"), [])
        self.assertTrue(_changed(before, after, "head."))
        for name, param in network.named_parameters():
            if name.startswith("block"):
                self.assertIsNone(param.grad, name)

    def test_head_plus_top_conv(self):
        network = _tiny()
        before, after = self._step(network, TrainablePolicy.HEAD_PLUS_TOP_CONV)
        self.assertEqual(_changed(before, after, "block1."), [])
        self.assertTrue(_changed(before, after, "block2."))
        self.assertTrue(_changed(before, after, "head."))

    def test_all(self):
        network = _tiny()
        before, after = self._step(network, TrainablePolicy.ALL)
        self.assertTrue(_changed(before, after, "block1."))
        self.assertTrue(_changed(before, after, "block2."))

    def test_vgg19_top_blocks(self):
        """Fine-tuning VGG19 unfreezes blocks 4 and 5 only."""
        network = build_backbone(backbone_spec("vgg19", pretrained=False))
        replace_head(network, HeadSpec((8, 2)))
        set_trainable(network, TrainablePolicy.HEAD_PLUS_TOP_CONV)
        for name, param in network.named_parameters():
            expected = name.startswith(("block4.", "block5.", "head."))
            self.assertEqual(param.requires_grad, expected, name)

    def test_policies_are_nested(self):
        network = _tiny()
        trainable = {}
        for policy in TrainablePolicy:
            set_trainable(network, policy)
            trainable[policy] = {n for n, p in network.named_parameters() if p.requires_grad}
        self.assertLess(trainable[TrainablePolicy.HEAD_ONLY], trainable[TrainablePolicy.HEAD_PLUS_TOP_CONV])
        self.assertLess(trainable[TrainablePolicy.HEAD_PLUS_TOP_CONV], trainable[TrainablePolicy.ALL])

    def test_tiny_memorizes_random_images(self):
        """The whole stack can fit 16 random images."""
        torch.manual_seed(1)
        network = _tiny(head=(64, 2))
        images, labels = torch.randn(16, 3, 32, 32), torch.tensor([0, 1] * 8)
        optimizer = torch.optim.Adam(network.parameters(), lr=1e-2)
        for _ in range(200):
            optimizer.zero_grad()
            F.cross_entropy(network(images), labels).backward()
            optimizer.step()
        with torch.no_grad():
            accuracy = (network(images).argmax(1) == labels).float().mean().item()
        self.assertGreaterEqual(accuracy, 15 / 16)


class TestPretrainedWeights(unittest.TestCase):
    """Test cases for weight loading and porting."""

    def setUp(self):
        """Set up test fixtures."""
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / "tiny.pt"
        torch.manual_seed(3)
        save_backbone_weights(_tiny(), self.path)

    def test_matching_file(self):
        torch.manual_seed(4)
        network = _tiny()
        before = parameter_checksums(network)
        load_pretrained(network, self.path)
        after = parameter_checksums(network)
        convs = [n for n in before if n.startswith("block")]
        self.assertEqual(sorted(_changed(before, after, "block")), sorted(convs))
        self.assertEqual(_changed(before, after, "head."), [])

    def test_truncated_file(self):
        data = self.path.read_bytes()
        self.path.write_bytes(data[:len(data) // 2])
        with self.assertRaises(WeightsIncompatibleError):
            load_pretrained(_tiny(), self.path)

    def test_absent_file(self):
        missing = Path(self.tmp.name) / "missing.pt"
        with self.assertRaises(WeightsIncompatibleError):
            load_pretrained(_tiny(pretrained=True), missing)
        network = _tiny(pretrained=False)
        before = parameter_checksums(network)
        load_pretrained(network, missing)
        self.assertEqual(before, parameter_checksums(network))

    def test_pretrained_without_source(self):
        with self.assertRaises(WeightsIncompatibleError):
            load_pretrained(_tiny(pretrained=True))
        network = _tiny(pretrained=False)
        self.assertIs(load_pretrained(network), network)

    def test_shape_mismatch_names_layer(self):
        with patch.object(config, "TINY_CHANNELS", [4, 16]):
            network = _tiny()
        with self.assertRaises(WeightsIncompatibleError) as ctx:
            load_pretrained(network, self.path)
        self.assertEqual(ctx.exception.layer, "block1.conv1.weight")

    def test_port_torchvision_alexnet(self):
        import torchvision

        ported = port_state_dict("alexnet", torchvision.models.alexnet(weights=None).state_dict())
        self.assertEqual(len(ported), 10)
        with patch.object(config, "ALEXNET_HEAD_WIDTHS", [16, 16, 2]):
            network = build_backbone(backbone_spec(BackboneKind.ALEXNET, pretrained=False))
        load_pretrained(network, ported)
        torch.testing.assert_close(network.block5.conv1.weight, ported["block5.conv1.weight"])
        with self.assertRaises(WeightsIncompatibleError):
            port_state_dict("vgg19", torchvision.models.alexnet(weights=None).state_dict())

    def test_pretrained_spec_uses_cached_port(self):
        import torchvision

        reference = torchvision.models.alexnet(weights=None)
        cache = Path(self.tmp.name) / "cache"
        with patch.object(config, "ALEXNET_HEAD_WIDTHS", [16, 16, 2]):
            spec = backbone_spec(BackboneKind.ALEXNET, pretrained=True, weights_path="")
        with patch("torchvision.models.alexnet", return_value=reference) as fetch:
            resolved = ensure_pretrained_weights(spec, cache)
            again = ensure_pretrained_weights(spec, cache)
        fetch.assert_called_once()
        self.assertEqual(resolved.weights_path, str(cache / "alexnet_imagenet.pt"))
        self.assertEqual(again.weights_path, resolved.weights_path)
        network = load_pretrained(build_backbone(resolved))
        torch.testing.assert_close(network.block1.conv1.weight, reference.features[0].weight)
        torch.testing.assert_close(network.block5.conv1.bias, reference.features[10].bias)

    def test_specs_left_alone(self):
        cache = Path(self.tmp.name) / "cache"
        for spec in (backbone_spec("alexnet", pretrained=False), backbone_spec("tiny", pretrained=True),
                     backbone_spec("vgg19", pretrained=True, weights_path=str(self.path))):
            self.assertIs(ensure_pretrained_weights(spec, cache), spec)
        self.assertFalse(cache.exists())

    def test_port_failure_is_weights_error(self):
        with patch("torchvision.models.vgg19", side_effect=RuntimeError("offline")):
            with self.assertRaises(WeightsIncompatibleError):
                port_torchvision_weights("vgg19", Path(self.tmp.name) / "vgg19.pt")
        with self.assertRaises(BadSpecError):
            port_torchvision_weights("tiny", Path(self.tmp.name) / "tiny.pt")


if __name__ == '__main__':
    unittest.main()
