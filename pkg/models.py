#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Pydantic models and Dataclasses for mcaesthetics: dataset records, crop
geometry, network specifications, training stages and reports.
"""

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, Field, field_validator

from config import config
from exceptions import BadConfigError, BadSpecError, InvalidInputError
from logging_config import StructuredLogger

logger = StructuredLogger(__name__)

RATINGS = tuple(range(1, 11))


# --- Dataset ---

class AestheticLabel(str, Enum):
    """Binary aesthetic class derived from the mode rating."""
    LOW = "LOW"
    HIGH = "HIGH"
    EXCLUDED = "EXCLUDED"

    @property
    def index(self) -> int:
        """Class index used by the networks (LOW=0, HIGH=1)."""
        if self is AestheticLabel.EXCLUDED:
            raise InvalidInputError("EXCLUDED records have no class index")
        return 0 if self is AestheticLabel.LOW else 1

    @classmethod
    def from_index(cls, index: int) -> "AestheticLabel":
        return cls.LOW if int(index) == 0 else cls.HIGH


class Split(str, Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"
    NONE = "NONE"


@dataclass(frozen=True)
class VoteHistogram:
    """Votes per rating; counts[r - 1] is the number of votes for rating r."""
    counts: Tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if len(counts) != 10:
            raise ValueError(f"A vote histogram needs 10 counts, got {len(counts)}")
        if any(c < 0 for c in counts):
            raise ValueError("Vote counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return sum(self.counts)

    def count(self, rating: int) -> int:
        return self.counts[rating - 1]

    @property
    def mean_score(self) -> float:
        """Vote-weighted mean rating, 0.0 for an empty histogram."""
        total = self.total
        if total == 0:
            return 0.0
        return sum(r * c for r, c in zip(RATINGS, self.counts)) / total


@dataclass
class ImageRecord:
    """One dataset image.

    ``line`` is the metadata line the record came from; it is not part of
    equality and is not written to manifests.
    """
    id: str
    path: str
    histogram: VoteHistogram
    label: Optional[AestheticLabel] = None
    split: Split = Split.NONE
    line: int = field(default=0, compare=False, repr=False)


# --- Geometry ---

@dataclass(frozen=True)
class CropSpec:
    """Axis-aligned crop rectangle, origin top-left."""
    x: int
    y: int
    w: int
    h: int

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def doubled_center(self) -> Tuple[int, int]:
        """Twice the centre, kept integral so separation checks stay exact."""
        return (2 * self.x + self.w, 2 * self.y + self.h)

    def fits(self, width: int, height: int) -> bool:
        return (self.w >= 1 and self.h >= 1 and self.x >= 0 and self.y >= 0
                and self.x + self.w <= width and self.y + self.h <= height)

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


# --- Networks ---

class ColumnVariant(str, Enum):
    ORIGINAL = "ORIGINAL"
    PADDED = "PADDED"
    CENTER_CROP = "CENTER_CROP"
    RANDOM_CROP_1 = "RANDOM_CROP_1"
    RANDOM_CROP_2 = "RANDOM_CROP_2"
    RANDOM_CROP_3 = "RANDOM_CROP_3"
    SALIENCY_SPECTRAL = "SALIENCY_SPECTRAL"
    SALIENCY_FINE = "SALIENCY_FINE"

    @property
    def random_crop_index(self) -> Optional[int]:
        """Zero-based crop index for RANDOM_CROP_n, None otherwise."""
        if self.value.startswith("RANDOM_CROP_"):
            return int(self.value.rsplit("_", 1)[1]) - 1
        return None


class TrainablePolicy(str, Enum):
    HEAD_ONLY = "HEAD_ONLY"
    HEAD_PLUS_TOP_CONV = "HEAD_PLUS_TOP_CONV"
    ALL = "ALL"


class BackboneKind(str, Enum):
    ALEXNET = "alexnet"
    VGG19 = "vgg19"
    TINY = "tiny"

    @classmethod
    def parse(cls, name: Union[str, "BackboneKind"]) -> "BackboneKind":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            raise BadSpecError(f"Unknown backbone kind '{name}'") from None

    @property
    def display_name(self) -> str:
        return {"alexnet": "AlexNet", "vgg19": "VGG19", "tiny": "TINY"}[self.value]


class MultiplexStrategy(str, Enum):
    """How a column with several menu variants is fed."""
    RANDOM = "random"
    AVERAGE = "average"


class SelectionMode(str, Enum):
    TRAIN = "TRAIN"
    EVAL = "EVAL"


@dataclass(frozen=True)
class HeadSpec:
    """Dense stack; ReLU after every layer except the last, which has 2 outputs."""
    widths: Tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if not widths:
            raise BadSpecError("A head needs at least one dense layer")
        if any(w < 1 for w in widths):
            raise BadSpecError(f"Head widths must be positive: {widths}")
        if widths[-1] != 2:
            raise BadSpecError(f"The last head layer must have 2 outputs, got {widths[-1]}")
        object.__setattr__(self, "widths", widths)

    @property
    def dense_count(self) -> int:
        return len(self.widths)

    @classmethod
    def default(cls) -> "HeadSpec":
        return cls(tuple(config.HEAD_WIDTHS))


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class BlockSpec:
    """Convolutions of one block, optionally closed by a max-pool."""
    convs: Tuple[ConvSpec, ...]
    pool: bool = True
    pool_kernel: int = 2
    pool_stride: int = 2


@dataclass(frozen=True)
class BackboneSpec:
    kind: BackboneKind
    blocks: Tuple[BlockSpec, ...]
    pooled_size: int
    top_blocks: Tuple[int, ...]
    head: Optional[HeadSpec] = None
    pretrained: bool = False
    weights_path: Optional[str] = None

    @property
    def conv_counts(self) -> List[int]:
        return [len(b.convs) for b in self.blocks]

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1].convs[-1].out_channels * self.pooled_size * self.pooled_size

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["kind"] = self.kind.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BackboneSpec":
        blocks = tuple(
            BlockSpec(
                convs=tuple(ConvSpec(**c) for c in b["convs"]),
                pool=b["pool"], pool_kernel=b["pool_kernel"], pool_stride=b["pool_stride"],
            )
            for b in data["blocks"]
        )
        head = data.get("head")
        return cls(
            kind=BackboneKind.parse(data["kind"]),
            blocks=blocks,
            pooled_size=int(data["pooled_size"]),
            top_blocks=tuple(data["top_blocks"]),
            head=HeadSpec(tuple(head["widths"])) if head else None,
            pretrained=bool(data.get("pretrained", False)),
            weights_path=data.get("weights_path"),
        )


@dataclass(frozen=True)
class ColumnConfig:
    menu: Tuple[ColumnVariant, ...]
    backbone: BackboneSpec

    def __post_init__(self):
        menu = tuple(ColumnVariant(v) for v in self.menu)
        if not menu:
            raise BadConfigError("A column menu cannot be empty")
        if len(set(menu)) != len(menu):
            raise BadConfigError(f"Duplicate variants in column menu: {[v.value for v in menu]}")
        object.__setattr__(self, "menu", menu)


@dataclass(frozen=True)
class FusionConfig:
    """Concatenation of column features followed by a dense classifier.

    ``in_features`` pins the expected concatenated width when known.
    """
    classifier: HeadSpec
    strategy: str = "concat"
    in_features: Optional[int] = None


# --- Training ---

@dataclass(frozen=True)
class TrainStage:
    name: str
    epochs: int
    policy: TrainablePolicy
    learning_rate: float
    batch_size: int = 32
    optimizer: str = "sgd"
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise BadConfigError(f"Stage '{self.name}' needs at least one epoch")
        if not self.learning_rate > 0:
            raise BadConfigError(f"Stage '{self.name}' needs a positive learning rate")
        if self.batch_size < 1:
            raise BadConfigError(f"Stage '{self.name}' needs a positive batch size")


class RunConfig(BaseModel):
    """Resolved configuration of one run, embedded in reports and checkpoints."""

    values: Dict[str, Any] = Field(default_factory=dict)
    seed: int = 0
    profile: str = "PAPER"
    fingerprint: str = ""

    @field_validator("profile")
    @classmethod
    def validate_profile(cls, v: str) -> str:
        v = v.upper()
        if v not in ("PAPER", "DESK"):
            raise ValueError(f"Unknown profile: {v}")
        return v

    @classmethod
    def from_config(cls, cfg=None) -> "RunConfig":
        cfg = cfg or config
        return cls(values=cfg.resolved(), seed=int(cfg.SEED), profile=cfg.PROFILE,
                   fingerprint=cfg.fingerprint())


class EpochMetrics(BaseModel):
    stage: str
    epoch: int = Field(..., ge=1)
    loss: float
    accuracy: float = Field(..., ge=0.0, le=1.0)


class TrainReport(BaseModel):
    """Outcome of a training run; the rendered table mirrors Architecture / Network / accuracies."""

    architecture: str
    network: str
    columns: int = Field(..., ge=1, le=3)
    history: List[EpochMetrics] = Field(default_factory=list)
    train_accuracy: Optional[float] = Field(None, ge=0.0, le=1.0)
    test_accuracy: Optional[float] = Field(None, ge=0.0, le=1.0)
    wall_time_seconds: float = 0.0
    fingerprint: str = ""
    run: Optional[RunConfig] = None
    status: str = "completed"
    error: Optional[str] = None

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainReport":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))


class ReferenceResult(BaseModel):
    """A published accuracy row kept for side-by-side rendering."""
    architecture: str
    network: str
    train_accuracy: Optional[float] = None
    test_accuracy: float


class Prediction(BaseModel):
    label: AestheticLabel
    confidence: float = Field(..., ge=0.0, le=1.0)
    probabilities: List[float]
    combinations: int = 1

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"))
