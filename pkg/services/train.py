#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Staged training, evaluation, checkpointing and prediction for mcaesthetics.

A run trains the classifier with frozen columns first, then unfreezes the top
convolution blocks. Every stage writes atomic checkpoints that carry the model
architecture, optimizer state and history, so an interrupted run resumes to
the same result.
"""

import os
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from config import config
from exceptions import (AppBaseError, BadConfigError, ConfigurationError, DivergedError, EmptySplitError,
                        FreezeViolationError, NoVariantError, WeightsIncompatibleError)
from logging_config import StructuredLogger
from models import (AestheticLabel, BackboneKind, EpochMetrics, ImageRecord, MultiplexStrategy, Prediction,
                    ReferenceResult, RunConfig, SelectionMode, TrainablePolicy, TrainReport, TrainStage,
                    VoteHistogram)
from services.backbones import parameter_checksums, set_trainable
from services.multicolumn import (MultiColumnNet, VariantDataset, VariantFactory, architecture_name,
                                  build_from_description, combination_tensors, describe, menu_combinations,
                                  network_name, select_variants)
from utils import MemoryMonitor, derive_seed, performance_timer

logger = StructuredLogger(__name__)

LATEST_CHECKPOINT = "latest.pt"
_EMPTY_HISTOGRAM = VoteHistogram((0,) * 10)

REFERENCE_RESULTS: List[ReferenceResult] = [
    ReferenceResult(architecture="Single Column", network="AlexNet", train_accuracy=0.993, test_accuracy=0.6164),
    ReferenceResult(architecture="Single Column", network="VGG19", train_accuracy=0.9987, test_accuracy=0.7137),
    ReferenceResult(architecture="Double Column", network="VGG19", train_accuracy=0.8082, test_accuracy=0.7444),
    ReferenceResult(architecture="Triple Column", network="VGG19", train_accuracy=0.92, test_accuracy=0.823),
]

# Published test accuracies (percent) of comparable systems on AVA
LITERATURE_RESULTS: List[Tuple[str, float]] = [
    ("SCNN", 71.20),
    ("DCNN", 73.25),
    ("BDN", 78.08),
    ("Triple Column", 82.3),
]

OPTIMIZERS: Dict[str, Callable[[List[torch.nn.Parameter], TrainStage], torch.optim.Optimizer]] = {
    "sgd": lambda params, stage: torch.optim.SGD(params, lr=stage.learning_rate, momentum=stage.momentum),
    "adam": lambda params, stage: torch.optim.Adam(params, lr=stage.learning_rate),
}


# --- Schedule ---

def scale_epochs(epochs: int) -> int:
    """Apply EPOCH_MULTIPLIER with MIN_STAGE_EPOCHS as the floor."""
    return max(1, int(config.MIN_STAGE_EPOCHS), int(round(epochs * float(config.EPOCH_MULTIPLIER))))


def default_schedule(model: MultiColumnNet) -> List[TrainStage]:
    """Head-only training followed by top-block fine-tuning.

    A single-column AlexNet is trained from scratch in one ALL stage.
    """
    common = dict(batch_size=int(config.BATCH_SIZE), optimizer=str(config.OPTIMIZER).lower(),
                  momentum=float(config.MOMENTUM))
    if model.column_count == 1 and model.configs[0].backbone.kind is BackboneKind.ALEXNET:
        return [TrainStage("scratch", scale_epochs(config.HEAD_EPOCHS), TrainablePolicy.ALL,
                           float(config.HEAD_LR), **common)]
    return [
        TrainStage("head", scale_epochs(config.HEAD_EPOCHS), TrainablePolicy.HEAD_ONLY,
                   float(config.HEAD_LR), **common),
        TrainStage("finetune", scale_epochs(config.FINETUNE_EPOCHS), TrainablePolicy.HEAD_PLUS_TOP_CONV,
                   float(config.FINETUNE_LR), **common),
    ]


# --- Checkpoints ---

def save_checkpoint(path: Union[str, Path], model: MultiColumnNet, optimizer: Optional[torch.optim.Optimizer],
                    stage_index: int, stage_name: str, epoch: int, history: Sequence[EpochMetrics],
                    fingerprint: str = "", seed: int = 0) -> Path:
    """Write a checkpoint atomically (temporary file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "architecture": describe(model),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "stage_index": stage_index,
        "stage_name": stage_name,
        "epoch": epoch,
        "metrics": history[-1].model_dump() if history else {},
        "history": [m.model_dump() for m in history],
        "fingerprint": fingerprint,
        "seed": seed,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    logger.debug("Checkpoint written", path=str(path), stage=stage_name, epoch=epoch)
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a checkpoint written by save_checkpoint.

    Raises:
        WeightsIncompatibleError: If the file is absent or unreadable
    """
    path = Path(path)
    if not path.is_file():
        raise WeightsIncompatibleError(f"Checkpoint {path} does not exist")
    try:
        # Checkpoints hold optimizer state and plain metadata written by this package
        checkpoint = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise WeightsIncompatibleError(f"Checkpoint {path} is unreadable: {e}") from e
    if not isinstance(checkpoint, dict) or "model_state" not in checkpoint or "architecture" not in checkpoint:
        raise WeightsIncompatibleError(f"Checkpoint {path} lacks model state or architecture")
    return checkpoint


def restore_model(checkpoint: Dict[str, Any]) -> MultiColumnNet:
    """Rebuild the model described by a checkpoint and load its weights."""
    model = build_from_description(checkpoint["architecture"])
    try:
        model.load_state_dict(checkpoint["model_state"], strict=True)
    except RuntimeError as e:
        raise WeightsIncompatibleError(f"Checkpoint weights do not match their architecture: {e}") from e
    return model


# --- Training ---

class Trainer:
    """Runs a schedule of stages over a training split.

    Owns the model exclusively for the duration of the run.
    """

    def __init__(self, model: MultiColumnNet, train_records: Sequence[ImageRecord],
                 seed: Optional[int] = None, run_dir: Optional[Union[str, Path]] = None,
                 factory: Optional[VariantFactory] = None, fingerprint: Optional[str] = None,
                 checkpoint_interval: Optional[int] = None, class_weighted: Optional[bool] = None,
                 strategy: Optional[MultiplexStrategy] = None):
        if not train_records:
            raise EmptySplitError("The training split is empty")
        self.model = model
        self.train_records = list(train_records)
        self.seed = config.SEED if seed is None else seed
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.factory = factory or VariantFactory(seed=self.seed)
        self.fingerprint = config.fingerprint() if fingerprint is None else fingerprint
        self.checkpoint_interval = (config.CHECKPOINT_INTERVAL if checkpoint_interval is None
                                    else checkpoint_interval)
        self.class_weighted = config.CLASS_WEIGHTED_LOSS if class_weighted is None else class_weighted
        self.strategy = strategy
        self.history: List[EpochMetrics] = []
        self.log = logger.bind(fingerprint=self.fingerprint)

    @property
    def checkpoint_dir(self) -> Optional[Path]:
        return self.run_dir / "checkpoints" if self.run_dir is not None else None

    def _optimizer(self, stage: TrainStage) -> torch.optim.Optimizer:
        params = [p for p in self.model.parameters() if p.requires_grad]
        if not params:
            raise BadConfigError(f"Stage '{stage.name}' leaves no trainable parameter")
        factory = OPTIMIZERS.get(stage.optimizer.lower())
        if factory is None:
            raise ConfigurationError(f"Unknown optimizer '{stage.optimizer}' (expected one of {sorted(OPTIMIZERS)})")
        return factory(params, stage)

    def _class_weights(self) -> Optional[torch.Tensor]:
        if not self.class_weighted:
            return None
        counts = torch.zeros(2)
        for record in self.train_records:
            counts[record.label.index] += 1
        return counts.sum() / (2.0 * counts.clamp(min=1.0))

    def _checkpoint(self, name: str, optimizer, stage_index: int, stage: TrainStage, epoch: int) -> None:
        if self.checkpoint_dir is None:
            return
        path = save_checkpoint(self.checkpoint_dir / name, self.model, optimizer, stage_index, stage.name,
                               epoch, self.history, self.fingerprint, self.seed)
        if name != LATEST_CHECKPOINT:
            save_checkpoint(self.checkpoint_dir / LATEST_CHECKPOINT, self.model, optimizer, stage_index,
                            stage.name, epoch, self.history, self.fingerprint, self.seed)
        self.log.info("Checkpoint saved", path=str(path), stage=stage.name, epoch=epoch)

    def run_stage(self, stage: TrainStage, stage_index: int = 0, epoch_offset: int = 0,
                  start_epoch: int = 0, optimizer_state: Optional[Dict[str, Any]] = None) -> List[EpochMetrics]:
        """Train for the remaining epochs of one stage.

        Raises:
            DivergedError: If a batch loss is non-finite or above DIVERGENCE_LOSS_CEILING
            FreezeViolationError: If a frozen parameter changed
        """
        set_trainable(self.model, stage.policy)
        frozen = {name for name, p in self.model.named_parameters() if not p.requires_grad}
        before = {k: v for k, v in parameter_checksums(self.model).items() if k in frozen}

        optimizer = self._optimizer(stage)
        if optimizer_state is not None:
            optimizer.load_state_dict(optimizer_state)
        weights = self._class_weights()
        ceiling = float(config.DIVERGENCE_LOSS_CEILING)
        dataset = VariantDataset(self.train_records, self.model.configs, SelectionMode.TRAIN,
                                 seed=self.seed, factory=self.factory, strategy=self.strategy)
        fragment: List[EpochMetrics] = []

        self.log.info(f"Stage '{stage.name}' starting", policy=stage.policy.value, epochs=stage.epochs,
                      start_epoch=start_epoch, lr=stage.learning_rate, optimizer=stage.optimizer)
        with performance_timer(f"stage {stage.name}", threshold_ms=60_000):
            for epoch in range(start_epoch + 1, stage.epochs + 1):
                dataset.set_epoch(epoch_offset + epoch)
                generator = torch.Generator().manual_seed(derive_seed(self.seed, "shuffle", stage_index, epoch))
                loader = DataLoader(dataset, batch_size=stage.batch_size, shuffle=True, generator=generator,
                                    num_workers=int(config.NUM_WORKERS))
                self.model.train()
                total_loss, correct, seen = 0.0, 0, 0
                for batch_index, (inputs, labels) in enumerate(loader, start=1):
                    logits = self.model(*inputs)
                    loss = F.cross_entropy(logits, labels, weight=weights)
                    loss_value = float(loss.detach())
                    if not torch.isfinite(loss) or loss_value > ceiling:
                        self.log.error("Training diverged", exc_info=False, stage=stage.name, epoch=epoch,
                                       batch=batch_index, loss=loss_value)
                        raise DivergedError(f"Loss {loss_value} at epoch {epoch}, batch {batch_index}",
                                            epoch=epoch, batch=batch_index)
                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                    optimizer.step()
                    total_loss += loss_value * len(labels)
                    correct += int((logits.detach().argmax(dim=1) == labels).sum())
                    seen += len(labels)

                metrics = EpochMetrics(stage=stage.name, epoch=epoch, loss=total_loss / seen,
                                       accuracy=correct / seen)
                fragment.append(metrics)
                self.history.append(metrics)
                self.log.info(f"Epoch {epoch}/{stage.epochs}", stage=stage.name, loss=round(metrics.loss, 6),
                              accuracy=round(metrics.accuracy, 4), **MemoryMonitor.snapshot())
                MemoryMonitor.clear_caches_if_needed()

                if epoch < stage.epochs and self.checkpoint_interval and epoch % self.checkpoint_interval == 0:
                    self._checkpoint(LATEST_CHECKPOINT, optimizer, stage_index, stage, epoch)

        after = parameter_checksums(self.model)
        for name, digest in before.items():
            if after[name] != digest:
                raise FreezeViolationError(f"Frozen parameter {name} changed during '{stage.name}'", parameter=name)
        self._checkpoint(f"stage{stage_index + 1}-{stage.name}.pt", optimizer, stage_index, stage, stage.epochs)
        return fragment

    def train(self, stages: Optional[Sequence[TrainStage]] = None, resume: bool = False) -> List[EpochMetrics]:
        """Run every stage, resuming from the latest checkpoint when asked."""
        stages = list(stages or default_schedule(self.model))
        start_stage, start_epoch, optimizer_state = 0, 0, None

        latest = self.checkpoint_dir / LATEST_CHECKPOINT if self.checkpoint_dir is not None else None
        if resume and latest is not None and latest.is_file():
            checkpoint = load_checkpoint(latest)
            try:
                self.model.load_state_dict(checkpoint["model_state"], strict=True)
            except RuntimeError as e:
                raise WeightsIncompatibleError(f"Cannot resume from {latest}: {e}") from e
            self.history = [EpochMetrics(**m) for m in checkpoint.get("history", [])]
            start_stage, start_epoch = int(checkpoint["stage_index"]), int(checkpoint["epoch"])
            optimizer_state = checkpoint.get("optimizer_state")
            if start_epoch >= stages[start_stage].epochs:
                start_stage, start_epoch, optimizer_state = start_stage + 1, 0, None
            self.log.info("Resuming", stage_index=start_stage, epoch=start_epoch)
        elif resume:
            self.log.warning("Nothing to resume from, starting fresh")

        for index in range(start_stage, len(stages)):
            offset = sum(s.epochs for s in stages[:index])
            self.run_stage(stages[index], index, epoch_offset=offset,
                           start_epoch=start_epoch if index == start_stage else 0,
                           optimizer_state=optimizer_state if index == start_stage else None)
        return self.history


def run_stage(model: MultiColumnNet, stage: TrainStage, records: Sequence[ImageRecord],
              seed: Optional[int] = None, run_dir: Optional[Union[str, Path]] = None,
              factory: Optional[VariantFactory] = None) -> Tuple[MultiColumnNet, List[EpochMetrics]]:
    """Train one stage and return the model with that stage's epoch metrics."""
    trainer = Trainer(model, records, seed=seed, run_dir=run_dir, factory=factory)
    return model, trainer.run_stage(stage)


# --- Evaluation ---

def predict_batch(model: MultiColumnNet, inputs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Softmax probabilities for a batch of per-column inputs."""
    model.eval()
    with torch.no_grad():
        return F.softmax(model(*inputs), dim=1)


def evaluate(model: MultiColumnNet, records: Sequence[ImageRecord], seed: Optional[int] = None,
             factory: Optional[VariantFactory] = None, batch_size: Optional[int] = None) -> float:
    """Accuracy under canonical EVAL variant selection.

    Raises:
        EmptySplitError: If records is empty
    """
    if not records:
        raise EmptySplitError("Cannot evaluate an empty split")
    seed = config.SEED if seed is None else seed
    dataset = VariantDataset(records, model.configs, SelectionMode.EVAL, seed=seed,
                             factory=factory or VariantFactory(seed=seed))
    loader = DataLoader(dataset, batch_size=batch_size or int(config.BATCH_SIZE), shuffle=False,
                        num_workers=int(config.NUM_WORKERS))
    correct = 0
    with performance_timer("evaluate", threshold_ms=10_000):
        for inputs, labels in loader:
            correct += int((predict_batch(model, inputs).argmax(dim=1) == labels).sum())
    accuracy = correct / len(records)
    logger.info("Evaluation finished", records=len(records), accuracy=round(accuracy, 6))
    return accuracy


def decide(probabilities: Sequence[float]) -> Tuple[AestheticLabel, float]:
    """Most probable class; an exact tie goes to LOW."""
    probs = torch.as_tensor(probabilities, dtype=torch.float64)
    index = int(torch.argmax(probs))
    return AestheticLabel.from_index(index), float(probs[index])


def predict(model: MultiColumnNet, image_path: Union[str, Path], averaging: bool = False,
            seed: Optional[int] = None, factory: Optional[VariantFactory] = None) -> Prediction:
    """Label and confidence for one image.

    With averaging, the softmax is averaged over every combination of menu
    variants; combinations that cannot be built are skipped.

    Raises:
        BadImageError: If the image cannot be read
        NoVariantError: If no combination can be built
    """
    seed = config.SEED if seed is None else seed
    factory = factory or VariantFactory(seed=seed)
    path = Path(image_path)
    record = ImageRecord(id=path.stem, path=str(path), histogram=_EMPTY_HISTOGRAM)
    factory.image(path)

    if averaging:
        probabilities = []
        for combination in menu_combinations(model.configs):
            try:
                tensors = combination_tensors(record, combination, factory)
            except AppBaseError as e:
                logger.debug("Combination skipped", combination=[v.value for v in combination], reason=str(e))
                continue
            probabilities.append(predict_batch(model, [t.unsqueeze(0) for t in tensors])[0])
        if not probabilities:
            raise NoVariantError(f"No variant combination can be built for {path}")
        mean = torch.stack(probabilities).mean(dim=0)
        count = len(probabilities)
    else:
        tensors = select_variants(record, model.configs, SelectionMode.EVAL, seed=seed, factory=factory,
                                  strategy=MultiplexStrategy.RANDOM)
        mean = predict_batch(model, [t.unsqueeze(0) for t in tensors])[0]
        count = 1

    label, confidence = decide(mean.tolist())
    return Prediction(label=label, confidence=min(1.0, max(0.0, confidence)),
                      probabilities=[float(p) for p in mean], combinations=count)


# --- Runs and reports ---

def run_training(model: MultiColumnNet, train_records: Sequence[ImageRecord],
                 test_records: Sequence[ImageRecord] = (), stages: Optional[Sequence[TrainStage]] = None,
                 run_dir: Optional[Union[str, Path]] = None, resume: bool = False,
                 seed: Optional[int] = None, factory: Optional[VariantFactory] = None) -> TrainReport:
    """Train on a split, evaluate, and write report.json into the run directory.

    A diverged run still writes its partial report before the error propagates.
    """
    seed = config.SEED if seed is None else seed
    factory = factory or VariantFactory(seed=seed)
    run = RunConfig.from_config()
    report = TrainReport(architecture=architecture_name(model), network=network_name(model),
                         columns=model.column_count, fingerprint=run.fingerprint, run=run)
    trainer = Trainer(model, train_records, seed=seed, run_dir=run_dir, factory=factory,
                      fingerprint=run.fingerprint)
    started = time.monotonic()
    try:
        report.history = trainer.train(stages, resume=resume)
        report.train_accuracy = evaluate(model, train_records, seed=seed, factory=factory)
        if test_records:
            report.test_accuracy = evaluate(model, test_records, seed=seed, factory=factory)
    except DivergedError as e:
        report.status = "diverged"
        report.error = e.message
        report.history = list(trainer.history)
        raise
    finally:
        report.wall_time_seconds = time.monotonic() - started
        if run_dir is not None:
            report.save(Path(run_dir) / "report.json")
    return report


def comparison_rows(reports: Sequence[TrainReport]) -> List[Tuple[str, float, str]]:
    """Literature rows plus measured test accuracies (percent), best first."""
    rows = [(name, accuracy, "published") for name, accuracy in LITERATURE_RESULTS]
    for report in reports:
        if report.test_accuracy is None:
            continue
        label = f"{report.architecture} {report.network} ({report.fingerprint or 'unknown'})"
        rows.append((label, round(report.test_accuracy * 100.0, 2), "measured"))
    return sorted(rows, key=lambda row: -row[1])
