"""
Tests for the multi-column assembly service.
"""
import unittest
import sys
import os
import tempfile
from collections import Counter
from pathlib import Path
from unittest.mock import patch

import numpy as np
import torch

# Add the parent directory to the path so we can import the application modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from cache_manager import cache_manager
from config import config
from exceptions import (BadConfigError, BadFusionError, InsufficientSeparationError, NoVariantError,
                        WeightsIncompatibleError)
from models import (AestheticLabel, ColumnConfig, ColumnVariant, FusionConfig, HeadSpec, ImageRecord,
                    MultiplexStrategy, SelectionMode, VoteHistogram)
from services.backbones import backbone_spec, build_backbone, parameter_checksums, strip_head
from services.geometry import save_image
from services.multicolumn import (MENU_A, MENU_B, MENU_C, VariantDataset, VariantFactory, architecture_name,
                                  assemble, build_from_description, describe, menu_combinations,
                                  network_name, plan_variants, select_variants, standard_configs,
                                  variant_order, warm_start)

SIZE = 64


def _small_profile():
    return patch.multiple(config, IMAGE_SIZE=SIZE, RANDOM_CROP_MIN_SEP=16, BACKBONE="tiny",
                          PRETRAINED=False, WEIGHTS_PATH="", FUSION_WIDTHS=[16, 2], HEAD_WIDTHS=[16, 2],
                          ALEXNET_HEAD_WIDTHS=[8, 8, 2])


def _write_image(directory, name, width, height, seed=0):
    rng = np.random.default_rng(seed)
    path = Path(directory) / f"{name}.png"
    save_image(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8), path)
    return ImageRecord(id=name, path=str(path), histogram=VoteHistogram((0,) * 7 + (3, 0, 0)),
                       label=AestheticLabel.HIGH)


def _batch(model, batch, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return [torch.randn(batch, 3, SIZE, SIZE, generator=generator) for _ in range(model.column_count)]


class MultiColumnTestCase(unittest.TestCase):
    """Shared desk-scale configuration."""

    def setUp(self):
        """Set up test fixtures."""
        patcher = _small_profile()
        patcher.start()
        self.addCleanup(patcher.stop)
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        torch.manual_seed(0)


class TestStandardConfigs(MultiColumnTestCase):
    """Test cases for the standard column menus."""

    def test_menus(self):
        self.assertEqual([c.menu for c in standard_configs(1)[0]], [(ColumnVariant.ORIGINAL,)])
        configs, fusion = standard_configs(3)
        self.assertEqual([c.menu for c in configs], [MENU_A, MENU_B, MENU_C])
        self.assertEqual([len(c.menu) for c in configs], [3, 3, 2])
        self.assertEqual(fusion.in_features, 3 * configs[0].backbone.feature_dim)
        self.assertEqual(fusion.classifier.widths, (16, 2))

    def test_menus_are_disjoint(self):
        for n in (2, 3):
            variants = [v for c in standard_configs(n)[0] for v in c.menu]
            self.assertEqual(len(variants), len(set(variants)))

    def test_bad_column_count(self):
        for n in (0, 4):
            with self.assertRaises(BadConfigError):
                standard_configs(n)

    def test_bad_menus(self):
        with self.assertRaises(BadConfigError):
            ColumnConfig(menu=(), backbone=backbone_spec())
        with self.assertRaises(BadConfigError):
            ColumnConfig(menu=(ColumnVariant.PADDED, ColumnVariant.PADDED), backbone=backbone_spec())
        overlapping = [ColumnConfig(menu=MENU_A, backbone=backbone_spec()),
                       ColumnConfig(menu=(ColumnVariant.PADDED,), backbone=backbone_spec())]
        with self.assertRaises(BadConfigError):
            assemble(overlapping, standard_configs(2)[1])

    def test_combinations(self):
        self.assertEqual(len(menu_combinations(standard_configs(3)[0])), 18)
        self.assertEqual(len(menu_combinations(standard_configs(2)[0])), 9)


class TestVariantSelection(MultiColumnTestCase):
    """Test cases for variant ordering and selection."""

    def test_eval_is_canonical(self):
        plan = plan_variants("42", standard_configs(3)[0], SelectionMode.EVAL, seed=0, epoch=5)
        self.assertEqual([order[0] for order in plan],
                         [ColumnVariant.ORIGINAL, ColumnVariant.RANDOM_CROP_1, ColumnVariant.SALIENCY_SPECTRAL])

    def test_train_is_deterministic(self):
        configs = standard_configs(3)[0]
        first = plan_variants("42", configs, SelectionMode.TRAIN, seed=7, epoch=3)
        self.assertEqual(first, plan_variants("42", configs, SelectionMode.TRAIN, seed=7, epoch=3))
        for order, column in zip(first, configs):
            self.assertEqual(sorted(order), sorted(column.menu))

    def test_train_draws_are_uniform(self):
        """Each menu element is drawn within three standard deviations of 1/3."""
        draws = 10000
        counts = Counter(variant_order(MENU_A, SelectionMode.TRAIN, 11, "img", epoch=e)[0] for e in range(draws))
        expected = draws / 3
        sigma = (draws * (1 / 3) * (2 / 3)) ** 0.5
        for variant in MENU_A:
            self.assertLess(abs(counts[variant] - expected), 3 * sigma, variant)

    def test_select_variants_shapes(self):
        record = _write_image(self.tmp.name, "wide", 160, 120)
        tensors = select_variants(record, standard_configs(3)[0], SelectionMode.EVAL, seed=0,
                                  factory=VariantFactory(seed=0))
        self.assertEqual([tuple(t.shape) for t in tensors], [(3, SIZE, SIZE)] * 3)
        self.assertTrue(all(bool(torch.isfinite(t).all()) for t in tensors))

    def test_crop_sized_image_has_no_random_crop(self):
        record = _write_image(self.tmp.name, "square", SIZE, SIZE)
        configs = standard_configs(2)[0]
        factory = VariantFactory(seed=0)
        for variant in MENU_B:
            with self.assertRaises(InsufficientSeparationError):
                factory.plane(record.id, record.path, variant)
        with self.assertRaises(NoVariantError):
            select_variants(record, configs, SelectionMode.EVAL, seed=0, factory=factory)
        single = select_variants(record, configs[:1], SelectionMode.EVAL, seed=0, factory=factory)
        self.assertEqual(tuple(single[0].shape), (3, SIZE, SIZE))

    def test_fallback_to_next_menu_element(self):
        record = _write_image(self.tmp.name, "fallback", 160, 120)
        factory = VariantFactory(seed=0)
        markers = {v: float(i) for i, v in enumerate(ColumnVariant)}

        def fake_tensor(record_id, path, variant):
            if variant is ColumnVariant.RANDOM_CROP_1:
                raise InsufficientSeparationError()
            return torch.full((3, SIZE, SIZE), markers[variant])

        with patch.object(factory, "tensor", side_effect=fake_tensor):
            tensors = select_variants(record, standard_configs(2)[0], SelectionMode.EVAL, seed=0,
                                      factory=factory, strategy=MultiplexStrategy.RANDOM)
        self.assertEqual(float(tensors[1][0, 0, 0]), markers[ColumnVariant.RANDOM_CROP_2])

    def test_average_strategy(self):
        record = _write_image(self.tmp.name, "average", 160, 120)
        factory = VariantFactory(seed=0)
        configs = standard_configs(1)[0] + [ColumnConfig(menu=MENU_C, backbone=backbone_spec())]
        tensors = select_variants(record, configs, SelectionMode.TRAIN, seed=0, factory=factory,
                                  strategy=MultiplexStrategy.AVERAGE)
        expected = torch.stack([factory.tensor(record.id, record.path, v) for v in MENU_C]).mean(dim=0)
        torch.testing.assert_close(tensors[1], expected)

    def test_variants_differ(self):
        record = _write_image(self.tmp.name, "distinct", 160, 120)
        factory = VariantFactory(seed=0)
        planes = {v: factory.plane(record.id, record.path, v) for v in ColumnVariant}
        for plane in planes.values():
            self.assertEqual(plane.shape[:2], (SIZE, SIZE))
        self.assertFalse(np.array_equal(planes[ColumnVariant.ORIGINAL], planes[ColumnVariant.PADDED]))
        self.assertFalse(np.array_equal(planes[ColumnVariant.RANDOM_CROP_1], planes[ColumnVariant.RANDOM_CROP_2]))
        self.assertIn("variants", cache_manager.get_stats())

    def test_dataset_items(self):
        record = _write_image(self.tmp.name, "item", 160, 120)
        dataset = VariantDataset([record], standard_configs(3)[0], SelectionMode.TRAIN, seed=1,
                                 factory=VariantFactory(seed=1))
        dataset.set_epoch(2)
        tensors, label = dataset[0]
        self.assertEqual(len(tensors), 3)
        self.assertEqual(label, 1)
        self.assertEqual(len(dataset), 1)


class TestAssemble(MultiColumnTestCase):
    """Test cases for model assembly."""

    def test_logit_shapes(self):
        for n in (1, 2, 3):
            model = assemble(*standard_configs(n)).eval()
            for batch in (1, 4, 5):
                self.assertEqual(tuple(model(*_batch(model, batch)).shape), (batch, 2))
            self.assertEqual(architecture_name(model), ["Single Column", "Double Column", "Triple Column"][n - 1])
            self.assertEqual(network_name(model), "TINY")

    def test_list_input(self):
        model = assemble(*standard_configs(2)).eval()
        inputs = _batch(model, 2)
        torch.testing.assert_close(model(inputs), model(*inputs))
        with self.assertRaises(BadConfigError):
            model(inputs[0])

    def test_parameter_count(self):
        """A double model holds two backbones plus the fusion classifier."""
        model = assemble(*standard_configs(2))
        backbone = strip_head(build_backbone(backbone_spec()))
        backbone_params = sum(p.numel() for p in backbone.parameters())
        fusion_params = sum(p.numel() for p in model.fusion.parameters())
        self.assertEqual(sum(p.numel() for p in model.parameters()), 2 * backbone_params + fusion_params)

    def test_columns_are_independent(self):
        model = assemble(*standard_configs(3))
        self.assertNotEqual(parameter_checksums(model.column1), parameter_checksums(model.column2))
        self.assertIsNot(model.column1.block1.conv1.weight, model.column2.block1.conv1.weight)

    def test_fusion_width_mismatch(self):
        configs, fusion = standard_configs(2)
        with self.assertRaises(BadFusionError):
            assemble(configs, FusionConfig(classifier=fusion.classifier, in_features=fusion.in_features + 1))
        with self.assertRaises(BadFusionError):
            assemble(configs, FusionConfig(classifier=fusion.classifier, strategy="sum"))

    def test_batch_permutation(self):
        model = assemble(*standard_configs(3)).eval()
        inputs = _batch(model, 6)
        order = torch.tensor([3, 0, 5, 1, 4, 2])
        with torch.no_grad():
            logits = model(*inputs)
            permuted = model(*[x[order] for x in inputs])
        torch.testing.assert_close(permuted, logits[order], atol=1e-6, rtol=0)

    def test_column_coupling_is_fusion_only(self):
        model = assemble(*standard_configs(3)).eval()
        inputs = _batch(model, 2)
        with torch.no_grad():
            logits = model(*inputs)
            zeroed = model(inputs[0], inputs[1], torch.zeros_like(inputs[2]))
        self.assertFalse(torch.allclose(logits, zeroed))

        def column_a_grad(freeze_c):
            for param in model.column3.parameters():
                param.requires_grad_(not freeze_c)
            x = inputs[0].clone().requires_grad_(True)
            model(x, inputs[1], inputs[2]).sum().backward()
            return x.grad

        torch.testing.assert_close(column_a_grad(False), column_a_grad(True))

    def test_describe_round_trip(self):
        model = assemble(*standard_configs(3))
        rebuilt = build_from_description(describe(model))
        self.assertEqual(describe(rebuilt), describe(model))
        self.assertEqual(set(rebuilt.state_dict()), set(model.state_dict()))
        self.assertIn("column3.block2.conv1.weight", model.state_dict())
        self.assertIn("fusion.dense1.weight", model.state_dict())


class TestWarmStart(MultiColumnTestCase):
    """Test cases for warm starting a deeper model."""

    def test_triple_from_double_and_single(self):
        double = assemble(*standard_configs(2))
        single = assemble(*standard_configs(1))
        triple = assemble(*standard_configs(3))
        fusion_before = parameter_checksums(triple.fusion)

        warm_start(triple, [double, single])

        self.assertEqual(parameter_checksums(triple.column1), parameter_checksums(double.column1))
        self.assertEqual(parameter_checksums(triple.column2), parameter_checksums(double.column2))
        self.assertEqual(parameter_checksums(triple.column3), parameter_checksums(single.column1))
        self.assertNotEqual(parameter_checksums(triple.fusion), fusion_before)
        self.assertNotEqual(parameter_checksums(triple.fusion), parameter_checksums(double.fusion))

    def test_kind_mismatch(self):
        double = assemble(*standard_configs(2))
        alexnet = build_backbone(backbone_spec("alexnet", pretrained=False))
        with self.assertRaises(WeightsIncompatibleError):
            warm_start(assemble(*standard_configs(3)), [double, alexnet])

    def test_column_count_mismatch(self):
        with self.assertRaises(WeightsIncompatibleError):
            warm_start(assemble(*standard_configs(3)), [assemble(*standard_configs(1))])


if __name__ == '__main__':
    unittest.main()
