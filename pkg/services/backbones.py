#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Convolutional backbones for mcaesthetics.

Builds block-structured AlexNet, VGG19 and a tiny desk-scale network, swaps
classification heads, loads pretrained convolution weights and applies the
trainable-layer policies used by the staged schedule.

Parameter names follow ``block{i}.conv{j}`` and ``head.dense{k}`` so weight
files can be ported mechanically.
"""

import hashlib
from dataclasses import replace
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from config import config
from exceptions import BadSpecError, WeightsIncompatibleError
from logging_config import StructuredLogger
from models import (BackboneKind, BackboneSpec, BlockSpec, ConvSpec, HeadSpec,
                    TrainablePolicy)

logger = StructuredLogger(__name__)


# --- Specifications ---

def _vgg19_blocks() -> Tuple[BlockSpec, ...]:
    layout = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)]
    return tuple(BlockSpec(convs=tuple(ConvSpec(ch) for _ in range(n))) for ch, n in layout)


def _alexnet_blocks() -> Tuple[BlockSpec, ...]:
    return (
        BlockSpec((ConvSpec(64, 11, 4, 2),), pool=True, pool_kernel=3, pool_stride=2),
        BlockSpec((ConvSpec(192, 5, 1, 2),), pool=True, pool_kernel=3, pool_stride=2),
        BlockSpec((ConvSpec(384),), pool=False),
        BlockSpec((ConvSpec(256),), pool=False),
        BlockSpec((ConvSpec(256),), pool=True, pool_kernel=3, pool_stride=2),
    )


def backbone_spec(kind: Union[str, BackboneKind, None] = None, pretrained: Optional[bool] = None,
                  weights_path: Optional[str] = None) -> BackboneSpec:
    """Build the spec of a backbone kind from the current configuration.

    Raises:
        BadSpecError: For an unknown kind
    """
    kind = BackboneKind.parse(config.BACKBONE if kind is None else kind)
    pretrained = config.PRETRAINED if pretrained is None else pretrained
    weights_path = (config.WEIGHTS_PATH or None) if weights_path is None else weights_path

    if kind is BackboneKind.VGG19:
        spec = BackboneSpec(kind, _vgg19_blocks(), pooled_size=7, top_blocks=(4, 5))
    elif kind is BackboneKind.ALEXNET:
        spec = BackboneSpec(kind, _alexnet_blocks(), pooled_size=6, top_blocks=(4, 5),
                            head=HeadSpec(tuple(config.ALEXNET_HEAD_WIDTHS)))
    else:
        channels = list(config.TINY_CHANNELS)
        if len(channels) != 2:
            raise BadSpecError(f"The tiny backbone has two blocks, got channels {channels}")
        blocks = tuple(BlockSpec((ConvSpec(ch),)) for ch in channels)
        spec = BackboneSpec(kind, blocks, pooled_size=int(config.TINY_POOL), top_blocks=(2,))

    return BackboneSpec(spec.kind, spec.blocks, spec.pooled_size, spec.top_blocks, spec.head,
                        pretrained=bool(pretrained), weights_path=weights_path)


def _validate_spec(spec: BackboneSpec) -> None:
    if not isinstance(spec.kind, BackboneKind):
        raise BadSpecError(f"Unknown backbone kind {spec.kind!r}")
    if not spec.blocks or any(not b.convs for b in spec.blocks):
        raise BadSpecError("Every block needs at least one convolution")
    if spec.kind is BackboneKind.VGG19:
        if spec.conv_counts != [2, 2, 4, 4, 4] or not all(b.pool for b in spec.blocks):
            raise BadSpecError(f"VGG19 needs conv counts 2/2/4/4/4 with a pool per block, got {spec.conv_counts}")
    if spec.kind is BackboneKind.ALEXNET and sum(spec.conv_counts) != 5:
        raise BadSpecError("AlexNet needs 5 convolutional layers")
    if any(not 1 <= t <= len(spec.blocks) for t in spec.top_blocks):
        raise BadSpecError(f"Top blocks {spec.top_blocks} outside 1..{len(spec.blocks)}")


# --- Modules ---

class ConvBlock(nn.Module):
    """conv1..convN with ReLU after each, optionally closed by a max-pool."""

    def __init__(self, in_channels: int, spec: BlockSpec):
        super().__init__()
        self.spec = spec
        self.conv_count = len(spec.convs)
        channels = in_channels
        for j, conv in enumerate(spec.convs, start=1):
            self.add_module(f"conv{j}", nn.Conv2d(channels, conv.out_channels, conv.kernel_size,
                                                  stride=conv.stride, padding=conv.padding))
            channels = conv.out_channels
        self.out_channels = channels
        self.pool = nn.MaxPool2d(spec.pool_kernel, spec.pool_stride) if spec.pool else None

    def convs(self) -> List[nn.Conv2d]:
        return [getattr(self, f"conv{j}") for j in range(1, self.conv_count + 1)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs():
            x = F.relu(conv(x))
        if self.pool is not None:
            x = self.pool(x)
        return x


class DenseHead(nn.Module):
    """dense1..denseK; ReLU on hidden layers, raw logits out of the last one."""

    def __init__(self, in_features: int, spec: HeadSpec):
        super().__init__()
        self.spec = spec
        self.in_features = in_features
        width = in_features
        for k, out in enumerate(spec.widths, start=1):
            self.add_module(f"dense{k}", nn.Linear(width, out))
            width = out

    def layers(self) -> List[nn.Linear]:
        return [getattr(self, f"dense{k}") for k in range(1, self.spec.dense_count + 1)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        layers = self.layers()
        for layer in layers[:-1]:
            x = F.relu(layer(x))
        return layers[-1](x)


class Backbone(nn.Module):
    """Feature extractor made of numbered blocks, with an optional dense head."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        channels = 3
        for i, block_spec in enumerate(spec.blocks, start=1):
            block = ConvBlock(channels, block_spec)
            self.add_module(f"block{i}", block)
            channels = block.out_channels
        self.avgpool = nn.AdaptiveAvgPool2d(spec.pooled_size)
        self.feature_dim = channels * spec.pooled_size * spec.pooled_size
        self.head: Optional[DenseHead] = None

    @property
    def kind(self) -> BackboneKind:
        return self.spec.kind

    def blocks(self) -> List[ConvBlock]:
        return [getattr(self, f"block{i}") for i in range(1, len(self.spec.blocks) + 1)]

    def named_convs(self) -> Iterator[Tuple[str, nn.Conv2d]]:
        for i, block in enumerate(self.blocks(), start=1):
            for j, conv in enumerate(block.convs(), start=1):
                yield f"block{i}.conv{j}", conv

    def features(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks():
            x = block(x)
        return torch.flatten(self.avgpool(x), 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.features(x)
        if self.head is not None:
            x = self.head(x)
        return x


def _init_alexnet(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0.0, 0.01)
            nn.init.zeros_(m.bias)


# --- Operations ---

def build_backbone(spec: Optional[BackboneSpec] = None) -> Backbone:
    """Instantiate a backbone; AlexNet comes with its three dense layers attached.

    Raises:
        BadSpecError: If the spec violates its block layout
    """
    spec = spec or backbone_spec()
    _validate_spec(spec)
    network = Backbone(spec)
    if spec.head is not None:
        replace_head(network, spec.head)
    if spec.kind is BackboneKind.ALEXNET:
        _init_alexnet(network)
    logger.debug("Backbone built", kind=spec.kind.value, conv_counts=spec.conv_counts,
                 feature_dim=network.feature_dim)
    return network


def replace_head(network: nn.Module, head: HeadSpec) -> nn.Module:
    """Attach a fresh dense head, discarding the previous classifier.

    Works on a Backbone (``head``) and on a multi-column model (``fusion``).
    """
    new_head = DenseHead(network.feature_dim, head)
    if isinstance(network, Backbone):
        network.head = new_head
    else:
        network.fusion = new_head
    if getattr(network, "kind", None) is BackboneKind.ALEXNET:
        _init_alexnet(new_head)
    return network


def strip_head(network: Backbone) -> Backbone:
    """Drop the classifier so the forward pass returns the feature vector."""
    network.head = None
    return network


def _read_weights(source: Union[str, Path, Mapping[str, torch.Tensor]]) -> Mapping[str, torch.Tensor]:
    if isinstance(source, Mapping):
        return source
    path = Path(source)
    if not path.is_file():
        raise WeightsIncompatibleError(f"Weights file {path} does not exist")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise WeightsIncompatibleError(f"Weights file {path} is unreadable: {e}") from e
    if not isinstance(state, Mapping):
        raise WeightsIncompatibleError(f"Weights file {path} does not hold a state mapping")
    return state


def load_pretrained(network: Backbone,
                    source: Union[str, Path, Mapping[str, torch.Tensor], None] = None) -> Backbone:
    """Copy convolution weights into the network; the head keeps its fresh init.

    Without a source, the spec's weights_path is used. A network whose spec is
    not pretrained and has no source is returned unchanged.

    Raises:
        WeightsIncompatibleError: Absent/unreadable file, or a missing or misshaped layer
    """
    source = source if source is not None else network.spec.weights_path
    if source is None or (not isinstance(source, Mapping) and not str(source)):
        if not network.spec.pretrained:
            logger.debug("No pretrained weights requested", kind=network.kind.value)
            return network
        raise WeightsIncompatibleError(f"{network.kind.value} is marked pretrained but no weights were given")
    if not isinstance(source, Mapping) and not Path(source).is_file() and not network.spec.pretrained:
        logger.warning(f"Weights file {source} not found, keeping fresh initialization")
        return network

    state = _read_weights(source)
    with torch.no_grad():
        for name, conv in network.named_convs():
            for suffix, param in (("weight", conv.weight), ("bias", conv.bias)):
                key = f"{name}.{suffix}"
                tensor = state.get(key)
                if tensor is None:
                    raise WeightsIncompatibleError(f"Layer {key} is missing from the weights", layer=key)
                if tuple(tensor.shape) != tuple(param.shape):
                    raise WeightsIncompatibleError(
                        f"Layer {key} has shape {tuple(tensor.shape)}, expected {tuple(param.shape)}", layer=key)
                param.copy_(tensor)
    logger.info("Pretrained convolution weights loaded", kind=network.kind.value)
    return network


def save_backbone_weights(network: Backbone, path: Union[str, Path]) -> Path:
    """Write the convolution weights in block{i}.conv{j} naming."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().clone() for k, v in network.state_dict().items() if k.startswith("block")}
    torch.save(state, path)
    return path


def port_state_dict(kind: Union[str, BackboneKind],
                    torchvision_state: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """Rename torchvision ``features.{n}`` convolution tensors to block{i}.conv{j}.

    Raises:
        WeightsIncompatibleError: If the convolution count does not match
    """
    spec = backbone_spec(kind, pretrained=False)
    names = [f"block{i}.conv{j}" for i, b in enumerate(spec.blocks, start=1)
             for j in range(1, len(b.convs) + 1)]
    indices = sorted({int(k.split(".")[1]) for k in torchvision_state
                      if k.startswith("features.") and k.endswith(".weight")})
    if len(indices) != len(names):
        raise WeightsIncompatibleError(
            f"Expected {len(names)} convolutions for {spec.kind.value}, found {len(indices)}")
    ported: Dict[str, torch.Tensor] = {}
    for name, index in zip(names, indices):
        ported[f"{name}.weight"] = torchvision_state[f"features.{index}.weight"].detach().clone()
        ported[f"{name}.bias"] = torchvision_state[f"features.{index}.bias"].detach().clone()
    return ported


def port_torchvision_weights(kind: Union[str, BackboneKind], path: Union[str, Path]) -> Path:
    """Fetch torchvision's ImageNet weights for AlexNet or VGG19 and save them ported."""
    import torchvision

    kind = BackboneKind.parse(kind)
    if kind is BackboneKind.TINY:
        raise BadSpecError("Only AlexNet and VGG19 have published ImageNet weights")
    try:
        if kind is BackboneKind.VGG19:
            model = torchvision.models.vgg19(weights=torchvision.models.VGG19_Weights.IMAGENET1K_V1)
        else:
            model = torchvision.models.alexnet(weights=torchvision.models.AlexNet_Weights.IMAGENET1K_V1)
    except Exception as e:
        raise WeightsIncompatibleError(f"Could not fetch torchvision {kind.value} weights: {e}") from e
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(port_state_dict(kind, model.state_dict()), path)
    logger.info("Torchvision weights ported", kind=kind.value, path=str(path))
    return path


def ported_weights_path(kind: Union[str, BackboneKind], cache_dir: Union[str, Path]) -> Path:
    return Path(cache_dir) / f"{BackboneKind.parse(kind).value}_imagenet.pt"


def ensure_pretrained_weights(spec: BackboneSpec, cache_dir: Union[str, Path]) -> BackboneSpec:
    """Point a pretrained AlexNet or VGG19 spec without a weights file at ported ImageNet weights.

    The ported file is cached as ``<cache_dir>/<kind>_imagenet.pt`` and reused on later
    calls. Other specs are returned unchanged, so a pretrained TINY spec still fails
    in ``load_pretrained``.

    Raises:
        WeightsIncompatibleError: If torchvision cannot provide the weights
    """
    if not spec.pretrained or spec.weights_path or spec.kind is BackboneKind.TINY:
        return spec
    path = ported_weights_path(spec.kind, cache_dir)
    if path.is_file():
        logger.debug("Reusing ported weights", kind=spec.kind.value, path=str(path))
    else:
        port_torchvision_weights(spec.kind, path)
    return replace(spec, weights_path=str(path))


def trainable_prefixes(network: Backbone, policy: TrainablePolicy) -> List[str]:
    """Parameter-name prefixes a policy unfreezes on a single backbone."""
    policy = TrainablePolicy(policy)
    if policy is TrainablePolicy.ALL:
        return [""]
    prefixes = ["head."]
    if policy is TrainablePolicy.HEAD_PLUS_TOP_CONV:
        prefixes += [f"block{i}." for i in network.spec.top_blocks]
    return prefixes


def set_trainable(network: nn.Module, policy: TrainablePolicy) -> nn.Module:
    """Freeze every parameter outside the policy's trainable set.

    On a multi-column model the policy applies to each column, and the fusion
    classifier is always trainable.
    """
    policy = TrainablePolicy(policy)
    if isinstance(network, Backbone):
        prefixes = trainable_prefixes(network, policy)
        for name, param in network.named_parameters():
            param.requires_grad_(any(name.startswith(p) for p in prefixes))
    else:
        for column in network.columns():
            set_trainable(column, policy)
        for param in network.fusion.parameters():
            param.requires_grad_(True)
    trainable = sum(p.numel() for p in network.parameters() if p.requires_grad)
    logger.debug("Trainable policy applied", policy=policy.value, trainable_parameters=trainable)
    return network


def parameter_checksums(network: nn.Module) -> Dict[str, str]:
    """SHA-256 of every parameter's bytes, keyed by parameter name."""
    return {
        name: hashlib.sha256(param.detach().cpu().contiguous().numpy().tobytes()).hexdigest()
        for name, param in network.named_parameters()
    }


def count_layers(network: nn.Module) -> Dict[str, int]:
    """Number of convolution, max-pool and dense layers."""
    modules = list(network.modules())
    return {
        "conv": sum(isinstance(m, nn.Conv2d) for m in modules),
        "pool": sum(isinstance(m, nn.MaxPool2d) for m in modules),
        "dense": sum(isinstance(m, nn.Linear) for m in modules),
    }
