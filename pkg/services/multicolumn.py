#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Multi-column assembly for mcaesthetics.

Defines the per-column variant menus, builds variant tensors for a record,
selects which variant feeds each column, and fuses column features by
concatenation into one classifier. Checkpoints use the names
``column{i}.block{j}.conv{k}`` and ``fusion.dense{m}``.
"""

import itertools
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.utils.data import Dataset

from cache_manager import cache_manager
from config import config
from exceptions import (AppBaseError, BadConfigError, BadFusionError, InsufficientSeparationError,
                        NoVariantError, WeightsIncompatibleError)
from logging_config import StructuredLogger
from models import (BackboneKind, BackboneSpec, ColumnConfig, ColumnVariant, FusionConfig, HeadSpec,
                    ImageRecord, MultiplexStrategy, SelectionMode)
from services import geometry, saliency
from services.backbones import (Backbone, DenseHead, backbone_spec, build_backbone, load_pretrained,
                                replace_head, strip_head)
from utils import LRUCache, derive_seed

logger = StructuredLogger(__name__)

ARCHITECTURE_NAMES = {1: "Single Column", 2: "Double Column", 3: "Triple Column"}

MENU_A = (ColumnVariant.ORIGINAL, ColumnVariant.PADDED, ColumnVariant.CENTER_CROP)
MENU_B = (ColumnVariant.RANDOM_CROP_1, ColumnVariant.RANDOM_CROP_2, ColumnVariant.RANDOM_CROP_3)
MENU_C = (ColumnVariant.SALIENCY_SPECTRAL, ColumnVariant.SALIENCY_FINE)


# --- Configurations ---

def standard_configs(n: int, backbone: Optional[BackboneSpec] = None) -> Tuple[List[ColumnConfig], FusionConfig]:
    """Column menus and fusion classifier for a single, double or triple column network.

    A single column keeps the full head (HEAD_WIDTHS, or the AlexNet preset);
    several columns share a FUSION_WIDTHS classifier over their concatenated features.

    Raises:
        BadConfigError: If n is not 1, 2 or 3
    """
    if n not in (1, 2, 3):
        raise BadConfigError(f"Column count must be 1, 2 or 3, got {n}")
    backbone = backbone or backbone_spec()
    if n == 1:
        menus = [(ColumnVariant.ORIGINAL,)]
        widths = backbone.head.widths if backbone.head is not None else tuple(config.HEAD_WIDTHS)
    else:
        menus = [MENU_A, MENU_B, MENU_C][:n]
        widths = tuple(config.FUSION_WIDTHS)
    configs = [ColumnConfig(menu=m, backbone=backbone) for m in menus]
    fusion = FusionConfig(classifier=HeadSpec(widths), in_features=n * backbone.feature_dim)
    return configs, fusion


def _check_menus(configs: Sequence[ColumnConfig]) -> None:
    seen: Dict[ColumnVariant, int] = {}
    for i, column in enumerate(configs, start=1):
        for variant in column.menu:
            if variant in seen:
                raise BadConfigError(f"{variant.value} appears in columns {seen[variant]} and {i}")
            seen[variant] = i


def menu_combinations(configs: Sequence[ColumnConfig]) -> List[Tuple[ColumnVariant, ...]]:
    """Every choice of one variant per column, in menu order."""
    return list(itertools.product(*(c.menu for c in configs)))


# --- Model ---

class MultiColumnNet(nn.Module):
    """Independent backbone columns whose features are concatenated into ``fusion``."""

    def __init__(self, configs: Sequence[ColumnConfig], columns: Sequence[Backbone]):
        super().__init__()
        self.configs = list(configs)
        for i, column in enumerate(columns, start=1):
            self.add_module(f"column{i}", column)
        self.feature_dim = sum(c.feature_dim for c in columns)
        self.fusion: Optional[DenseHead] = None

    @property
    def column_count(self) -> int:
        return len(self.configs)

    def columns(self) -> List[Backbone]:
        return [getattr(self, f"column{i}") for i in range(1, self.column_count + 1)]

    def forward(self, *inputs: torch.Tensor) -> torch.Tensor:
        if len(inputs) == 1 and isinstance(inputs[0], (list, tuple)):
            inputs = tuple(inputs[0])
        if len(inputs) != self.column_count:
            raise BadConfigError(f"Expected {self.column_count} column inputs, got {len(inputs)}")
        features = [column(x) for column, x in zip(self.columns(), inputs)]
        return self.fusion(torch.cat(features, dim=1))


def assemble(configs: Sequence[ColumnConfig], fusion: FusionConfig, load_weights: bool = True) -> MultiColumnNet:
    """Build one headless backbone per column and attach the fusion classifier.

    Raises:
        BadConfigError: Overlapping menus or an unsupported column count
        BadFusionError: If the fusion input width differs from the concatenated features
    """
    if not 1 <= len(configs) <= 3:
        raise BadConfigError(f"Column count must be 1, 2 or 3, got {len(configs)}")
    _check_menus(configs)
    if fusion.strategy != "concat":
        raise BadFusionError(f"Unknown fusion strategy '{fusion.strategy}'")

    columns = []
    for column_config in configs:
        column = build_backbone(column_config.backbone)
        if load_weights:
            load_pretrained(column)
        columns.append(strip_head(column))

    model = MultiColumnNet(configs, columns)
    if fusion.in_features is not None and fusion.in_features != model.feature_dim:
        raise BadFusionError(
            f"Fusion expects {fusion.in_features} inputs but columns provide {model.feature_dim}")
    replace_head(model, fusion.classifier)
    logger.info("Multi-column model assembled", columns=len(configs),
                menus=[[v.value for v in c.menu] for c in configs],
                feature_dim=model.feature_dim, fusion=list(fusion.classifier.widths))
    return model


def architecture_name(model: MultiColumnNet) -> str:
    return ARCHITECTURE_NAMES[model.column_count]


def network_name(model: MultiColumnNet) -> str:
    return model.configs[0].backbone.kind.display_name


def describe(model: MultiColumnNet) -> Dict[str, Any]:
    """Self-describing architecture header stored with checkpoints."""
    return {
        "columns": [
            {"menu": [v.value for v in c.menu], "backbone": c.backbone.to_dict()}
            for c in model.configs
        ],
        "fusion": {"widths": list(model.fusion.spec.widths), "strategy": "concat"},
    }


def build_from_description(description: Dict[str, Any]) -> MultiColumnNet:
    """Rebuild an untrained model from a describe() header."""
    configs = [
        ColumnConfig(menu=tuple(ColumnVariant(v) for v in c["menu"]),
                     backbone=BackboneSpec.from_dict(c["backbone"]))
        for c in description["columns"]
    ]
    fusion = FusionConfig(classifier=HeadSpec(tuple(description["fusion"]["widths"])),
                          strategy=description["fusion"].get("strategy", "concat"))
    return assemble(configs, fusion, load_weights=False)


def _donor_columns(donors: Sequence[nn.Module]) -> List[Backbone]:
    columns: List[Backbone] = []
    for donor in donors:
        if isinstance(donor, MultiColumnNet):
            columns.extend(donor.columns())
        elif isinstance(donor, Backbone):
            columns.append(donor)
        else:
            raise WeightsIncompatibleError(f"Cannot warm start from {type(donor).__name__}")
    return columns


def warm_start(model: MultiColumnNet, donors: Sequence[nn.Module]) -> MultiColumnNet:
    """Copy column weights from donor models in order, then re-initialize the fusion classifier.

    Donor columns are taken in order from each donor (all columns of a
    multi-column donor, or a single backbone without its head).

    Raises:
        WeightsIncompatibleError: On a column count, kind or tensor shape mismatch
    """
    sources = _donor_columns(donors)
    targets = model.columns()
    if len(sources) != len(targets):
        raise WeightsIncompatibleError(f"{len(sources)} donor columns for {len(targets)} model columns")

    with torch.no_grad():
        for i, (target, source) in enumerate(zip(targets, sources), start=1):
            if target.kind is not source.kind:
                raise WeightsIncompatibleError(
                    f"Column {i} is {target.kind.value} but its donor is {source.kind.value}", layer=f"column{i}")
            source_state = {k: v for k, v in source.state_dict().items() if not k.startswith("head.")}
            for name, tensor in target.state_dict().items():
                donor_tensor = source_state.get(name)
                if donor_tensor is None or donor_tensor.shape != tensor.shape:
                    raise WeightsIncompatibleError(f"Donor layer column{i}.{name} does not match",
                                                   layer=f"column{i}.{name}")
                tensor.copy_(donor_tensor)

    replace_head(model, model.fusion.spec)
    logger.info("Warm start applied", columns=len(targets))
    return model


# --- Variants ---

class VariantFactory:
    """Builds the preprocessed planes of every variant for an image.

    Decoded images and finished planes live in LRU caches registered with the
    cache manager so memory pressure can clear them.
    """

    def __init__(self, seed: Optional[int] = None, image_cache_size: Optional[int] = None,
                 variant_cache_size: Optional[int] = None):
        self.seed = config.SEED if seed is None else seed
        self._images = LRUCache(maxsize=image_cache_size or config.IMAGE_CACHE_SIZE)
        self._planes = LRUCache(maxsize=variant_cache_size or config.VARIANT_CACHE_SIZE)
        cache_manager.register_lru_cache("images", self._images)
        cache_manager.register_lru_cache("variants", self._planes)

    def image(self, path: Union[str, Path]) -> np.ndarray:
        key = str(path)
        image = self._images.get(key)
        if image is None:
            image = geometry.load_image(path)
            self._images.put(key, image)
        return image

    def crops(self, record_id: str, image: np.ndarray):
        """Random crops of the upscaled image; infeasible placements keep the crops that fit."""
        try:
            return geometry.random_crops(geometry.upscale_to_min(image), seed=derive_seed(self.seed, record_id))
        except InsufficientSeparationError as e:
            return e.crops

    def plane(self, record_id: str, path: Union[str, Path], variant: ColumnVariant) -> np.ndarray:
        """IMAGE_SIZE square plane for one variant.

        Raises:
            InsufficientSeparationError: If the requested random crop could not be placed
        """
        key = (str(path), variant.value, self.seed)
        plane = self._planes.get(key)
        if plane is None:
            plane = self._build(record_id, self.image(path), variant)
            self._planes.put(key, plane)
        return plane

    def _build(self, record_id: str, image: np.ndarray, variant: ColumnVariant) -> np.ndarray:
        if variant is ColumnVariant.ORIGINAL:
            return geometry.resize_to(image)
        if variant is ColumnVariant.PADDED:
            return geometry.resize_to(geometry.pad_to_square(image))
        if variant is ColumnVariant.CENTER_CROP:
            return geometry.center_crop(geometry.upscale_to_min(image))[0]
        if variant is ColumnVariant.SALIENCY_SPECTRAL:
            return saliency.spectral_residual(geometry.resize_to(image))
        if variant is ColumnVariant.SALIENCY_FINE:
            return saliency.fine_grained(geometry.resize_to(image))

        index = variant.random_crop_index
        crops = self.crops(record_id, image)
        if index >= len(crops):
            raise InsufficientSeparationError(f"{variant.value} could not be placed for {record_id}", crops=crops)
        return geometry.apply_crop(geometry.upscale_to_min(image), crops[index])

    def tensor(self, record_id: str, path: Union[str, Path], variant: ColumnVariant) -> torch.Tensor:
        return geometry.normalize_pixels(self.plane(record_id, path, variant))


def variant_order(menu: Sequence[ColumnVariant], mode: SelectionMode, seed: int, record_id: str,
                  epoch: int = 0, column: int = 0) -> List[ColumnVariant]:
    """Preference order for one column: the chosen variant first, then the rest of the menu cyclically.

    TRAIN draws the first element uniformly from a generator seeded by
    (seed, record id, epoch, column); EVAL always starts at the first menu element.
    """
    start = 0
    if SelectionMode(mode) is SelectionMode.TRAIN:
        rng = np.random.default_rng(derive_seed(seed, record_id, epoch, column))
        start = int(rng.integers(0, len(menu)))
    return [menu[(start + i) % len(menu)] for i in range(len(menu))]


def plan_variants(record_id: str, configs: Sequence[ColumnConfig], mode: SelectionMode,
                  seed: int, epoch: int = 0) -> List[List[ColumnVariant]]:
    return [variant_order(c.menu, mode, seed, record_id, epoch, i) for i, c in enumerate(configs)]


def _first_buildable(factory: VariantFactory, record: ImageRecord, order: Sequence[ColumnVariant]):
    for variant in order:
        try:
            return variant, factory.tensor(record.id, record.path, variant)
        except InsufficientSeparationError as e:
            logger.debug("Variant unavailable, falling back", record=record.id, variant=variant.value,
                         reason=str(e))
    raise NoVariantError(f"No variant of {[v.value for v in order]} can be built for {record.id}")


def select_variants(record: ImageRecord, configs: Sequence[ColumnConfig], mode: SelectionMode,
                    seed: Optional[int] = None, epoch: int = 0, factory: Optional[VariantFactory] = None,
                    strategy: Optional[MultiplexStrategy] = None) -> List[torch.Tensor]:
    """One 3 x S x S tensor per column.

    RANDOM picks per the variant order with fallback on unbuildable variants;
    AVERAGE feeds the pixel mean of every buildable menu variant.

    Raises:
        NoVariantError: If nothing in a column's menu can be built
    """
    seed = config.SEED if seed is None else seed
    factory = factory or VariantFactory(seed=seed)
    strategy = MultiplexStrategy(strategy or config.MULTIPLEX_STRATEGY)

    tensors: List[torch.Tensor] = []
    for order, column in zip(plan_variants(record.id, configs, mode, seed, epoch), configs):
        if strategy is MultiplexStrategy.AVERAGE:
            built = []
            for variant in column.menu:
                try:
                    built.append(factory.tensor(record.id, record.path, variant))
                except InsufficientSeparationError:
                    continue
            if not built:
                raise NoVariantError(f"No variant of {[v.value for v in column.menu]} can be built for {record.id}")
            tensors.append(torch.stack(built).mean(dim=0))
        else:
            tensors.append(_first_buildable(factory, record, order)[1])
    return tensors


def combination_tensors(record: ImageRecord, combination: Sequence[ColumnVariant],
                        factory: VariantFactory) -> List[torch.Tensor]:
    return [factory.tensor(record.id, record.path, v) for v in combination]


class VariantDataset(Dataset):
    """Yields (per-column tensors, class index) for labeled records."""

    def __init__(self, records: Sequence[ImageRecord], configs: Sequence[ColumnConfig],
                 mode: SelectionMode = SelectionMode.TRAIN, seed: Optional[int] = None,
                 factory: Optional[VariantFactory] = None, strategy: Optional[MultiplexStrategy] = None):
        self.records = list(records)
        self.configs = list(configs)
        self.mode = SelectionMode(mode)
        self.seed = config.SEED if seed is None else seed
        self.factory = factory or VariantFactory(seed=self.seed)
        self.strategy = strategy
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int):
        record = self.records[index]
        try:
            tensors = select_variants(record, self.configs, self.mode, seed=self.seed, epoch=self.epoch,
                                      factory=self.factory, strategy=self.strategy)
        except AppBaseError as e:
            logger.error(f"Cannot prepare record {record.id}: {e.message}", exc_info=False)
            raise
        return tuple(tensors), record.label.index
