#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
AVA-style metadata ingestion for mcaesthetics.

Parses vote histograms, derives binary labels from the mode rating, builds
seeded stratified splits and reads/writes the tab-delimited manifest consumed
by preprocessing and training.
"""

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import config
from exceptions import (ClassMissingError, EmptyHistogramError, InvalidInputError,
                        InvalidRatingError, LineError, ManifestError, MetadataParseError,
                        MissingImagesError)
from logging_config import StructuredLogger
from models import RATINGS, AestheticLabel, ImageRecord, Split, VoteHistogram
from utils import derive_seed, performance_timer

logger = StructuredLogger(__name__)

MIN_METADATA_COLUMNS = 12
MANIFEST_FIELDS = 14
SUMMARY_TOTAL = "total"


@dataclass
class IngestResult:
    """Everything the ingest command reports."""
    records: List[ImageRecord]
    errors: List[LineError] = field(default_factory=list)
    summary: Dict[Union[int, str], int] = field(default_factory=dict)
    missing: List[ImageRecord] = field(default_factory=list)
    mean_scores: Dict[Union[int, str], Optional[float]] = field(default_factory=dict)


# --- Parsing ---

def parse_metadata(lines: Iterable[str], images_dir: Optional[Union[str, Path]] = None,
                   extension: Optional[str] = None) -> Tuple[List[ImageRecord], List[LineError]]:
    """Parse whitespace-delimited AVA metadata.

    Each non-empty line holds a record index, the image id and 10 vote
    counts; further columns (tags, challenge id) are ignored. Bad lines are
    reported and skipped.

    Args:
        lines: Text lines (an open file works)
        images_dir: Directory used to build record paths
        extension: Image file extension, defaults to config.IMAGE_EXTENSION

    Returns:
        tuple: (records in input order, per-line errors)
    """
    extension = config.IMAGE_EXTENSION if extension is None else extension
    base = Path(images_dir) if images_dir is not None else None
    records: List[ImageRecord] = []
    errors: List[LineError] = []

    for line_no, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text:
            continue
        columns = text.split()
        if len(columns) < MIN_METADATA_COLUMNS:
            errors.append(LineError(line_no, "too-few-columns", text))
            continue
        try:
            counts = [int(c) for c in columns[2:12]]
        except ValueError:
            errors.append(LineError(line_no, "non-integer-vote", text))
            continue
        if any(c < 0 for c in counts):
            errors.append(LineError(line_no, "negative-vote", text))
            continue

        image_id = columns[1]
        file_name = f"{image_id}{extension}"
        path = str(base / file_name) if base is not None else file_name
        records.append(ImageRecord(id=image_id, path=path,
                                   histogram=VoteHistogram(tuple(counts)), line=line_no))

    if errors:
        logger.warning(f"{len(errors)} metadata lines skipped", first_error=str(errors[0]))
    return records, errors


def load_metadata(path: Union[str, Path], images_dir: Optional[Union[str, Path]] = None,
                  extension: Optional[str] = None) -> Tuple[List[ImageRecord], List[LineError]]:
    """Read and parse a metadata file.

    Raises:
        MetadataParseError: If the file is unreadable or no line parses
    """
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8", errors="replace") as f:
            records, errors = parse_metadata(f, images_dir=images_dir, extension=extension)
    except OSError as e:
        raise MetadataParseError(f"Cannot read metadata file {path}: {e}") from e
    if not records and errors:
        raise MetadataParseError(f"No valid line in {path}", errors=errors)
    return records, errors


# --- Labels ---

def mode_rating(histogram: VoteHistogram) -> int:
    """Rating with the most votes; ties go to the lowest rating."""
    if histogram.total == 0:
        raise EmptyHistogramError()
    # np.argmax returns the first maximum, which is the lowest rating
    return int(np.argmax(histogram.counts)) + 1


def binarize(rating: int) -> AestheticLabel:
    if isinstance(rating, bool) or int(rating) != rating or not 1 <= rating <= 10:
        raise InvalidRatingError(f"Rating must be within 1..10, got {rating}")
    if rating <= 4:
        return AestheticLabel.LOW
    if rating >= 7:
        return AestheticLabel.HIGH
    return AestheticLabel.EXCLUDED


def label_records(records: Sequence[ImageRecord]) -> Tuple[List[ImageRecord], List[LineError]]:
    """Attach binarize(mode_rating(h)) to every record; empty histograms are dropped."""
    labeled: List[ImageRecord] = []
    errors: List[LineError] = []
    for record in records:
        try:
            labeled.append(replace(record, label=binarize(mode_rating(record.histogram))))
        except EmptyHistogramError:
            errors.append(LineError(record.line, "empty-histogram", record.id))
    return labeled, errors


def summarize_by_rating(records: Sequence[ImageRecord]) -> Dict[Union[int, str], int]:
    """Count records per mode rating, plus the total."""
    summary: Dict[Union[int, str], int] = {r: 0 for r in RATINGS}
    for record in records:
        summary[mode_rating(record.histogram)] += 1
    summary[SUMMARY_TOTAL] = sum(summary[r] for r in RATINGS)
    return summary


def mean_score_by_rating(records: Sequence[ImageRecord]) -> Dict[Union[int, str], Optional[float]]:
    """Average vote-weighted mean score per mode rating, plus over all records.

    Ratings without records map to None.
    """
    scores: Dict[Union[int, str], List[float]] = {r: [] for r in (*RATINGS, SUMMARY_TOTAL)}
    for record in records:
        score = record.histogram.mean_score
        scores[mode_rating(record.histogram)].append(score)
        scores[SUMMARY_TOTAL].append(score)
    return {key: (sum(values) / len(values) if values else None) for key, values in scores.items()}


# --- Splits ---

def _split_sizes(n: int, ratios: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment of n items over the ratios."""
    exact = [round(n * r, 9) for r in ratios]
    sizes = [int(math.floor(e)) for e in exact]
    remainder = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:remainder]:
        sizes[i] += 1
    return sizes


def make_splits(records: Sequence[ImageRecord], ratios: Optional[Sequence[float]] = None,
                seed: Optional[int] = None) -> List[ImageRecord]:
    """Assign TRAIN/VAL/TEST, stratified by label and deterministic for a seed.

    EXCLUDED records keep split NONE. Output keeps the input order.

    Raises:
        InvalidInputError: If the ratios are not three positive values summing to 1
        ClassMissingError: If LOW or HIGH has no record
    """
    ratios = list(config.SPLIT_RATIOS if ratios is None else ratios)
    seed = config.SEED if seed is None else seed
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise InvalidInputError(f"Split ratios must be three positive values summing to 1, got {ratios}")

    by_class: Dict[AestheticLabel, List[int]] = {AestheticLabel.LOW: [], AestheticLabel.HIGH: []}
    for i, record in enumerate(records):
        if record.label is None:
            raise InvalidInputError(f"Record {record.id} has no label")
        if record.label in by_class:
            by_class[record.label].append(i)

    for label, members in by_class.items():
        if not members:
            raise ClassMissingError(f"No {label.value} record to split")

    assignment: Dict[int, Split] = {}
    for label, members in by_class.items():
        rng = np.random.default_rng(derive_seed(seed, "split", label.value))
        shuffled = [members[j] for j in rng.permutation(len(members))]
        n_train, n_val, _ = _split_sizes(len(members), ratios)
        for pos, index in enumerate(shuffled):
            if pos < n_train:
                assignment[index] = Split.TRAIN
            elif pos < n_train + n_val:
                assignment[index] = Split.VAL
            else:
                assignment[index] = Split.TEST

    result = [replace(r, split=assignment.get(i, Split.NONE)) for i, r in enumerate(records)]
    logger.info("Splits assigned", seed=seed, ratios=ratios,
                sizes={s.value: sum(1 for r in result if r.split is s) for s in Split})
    return result


def records_in_split(records: Sequence[ImageRecord], split: Union[Split, str]) -> List[ImageRecord]:
    split = Split(str(split.value if isinstance(split, Split) else split).upper())
    return [r for r in records if r.split is split]


# --- Manifest ---

def _manifest_line(record: ImageRecord) -> str:
    for name, value in (("id", record.id), ("path", record.path)):
        if not value or any(ch in value for ch in "\t\r\n"):
            raise ManifestError(f"Record field {name} cannot be written: {value!r}")
    if record.label is None:
        raise ManifestError(f"Record {record.id} has no label")
    if record.label is AestheticLabel.EXCLUDED and record.split is not Split.NONE:
        raise ManifestError(f"Excluded record {record.id} cannot belong to split {record.split.value}")
    fields = [record.id, record.path, *(str(c) for c in record.histogram.counts),
              record.label.value, record.split.value]
    return "\t".join(fields)


def write_manifest(records: Sequence[ImageRecord], path: Union[str, Path]) -> Path:
    """Write one tab-delimited record per line: id, path, 10 counts, label, split."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [_manifest_line(r) for r in records]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    tmp.replace(path)
    logger.info(f"Manifest written with {len(lines)} records", path=str(path))
    return path


def read_manifest(path: Union[str, Path]) -> List[ImageRecord]:
    """Read a manifest written by write_manifest.

    Raises:
        ManifestError: With the line number and reason on any corrupt line
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ManifestError(f"Cannot read manifest {path}: {e}", reason="unreadable") from e

    records: List[ImageRecord] = []
    # Only "\n" ends a record; ids and paths may hold other Unicode line separators
    for line_no, line in enumerate(text.split("\n"), start=1):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != MANIFEST_FIELDS:
            raise ManifestError(f"{path}:{line_no}: expected {MANIFEST_FIELDS} fields, got {len(fields)}",
                                line=line_no, reason="field-count")
        try:
            histogram = VoteHistogram(tuple(int(c) for c in fields[2:12]))
        except ValueError:
            raise ManifestError(f"{path}:{line_no}: bad vote counts", line=line_no, reason="bad-count") from None
        try:
            label = AestheticLabel(fields[12])
        except ValueError:
            raise ManifestError(f"{path}:{line_no}: unknown label {fields[12]!r}",
                                line=line_no, reason="bad-label") from None
        try:
            split = Split(fields[13])
        except ValueError:
            raise ManifestError(f"{path}:{line_no}: unknown split {fields[13]!r}",
                                line=line_no, reason="bad-split") from None
        if label is AestheticLabel.EXCLUDED and split is not Split.NONE:
            raise ManifestError(f"{path}:{line_no}: excluded record assigned to split {split.value}",
                                line=line_no, reason="bad-split")
        records.append(ImageRecord(id=fields[0], path=fields[1], histogram=histogram,
                                   label=label, split=split, line=line_no))
    return records


# --- Pipeline ---

def find_missing_images(records: Sequence[ImageRecord]) -> List[ImageRecord]:
    return [r for r in records if not Path(r.path).is_file()]


def ingest(metadata_path: Union[str, Path], images_dir: Optional[Union[str, Path]] = None,
           ratios: Optional[Sequence[float]] = None, seed: Optional[int] = None,
           strict: bool = False, extension: Optional[str] = None) -> IngestResult:
    """Parse, label, check images and split.

    The rating summary covers every record with votes, whether or not its image
    is present. Records with missing images are skipped, or fatal under strict.

    Raises:
        MissingImagesError: Under strict when any image file is missing
    """
    with performance_timer("ingest", threshold_ms=1000):
        records, errors = load_metadata(metadata_path, images_dir=images_dir, extension=extension)
        labeled, label_errors = label_records(records)
        errors.extend(label_errors)
        summary = summarize_by_rating(labeled)
        mean_scores = mean_score_by_rating(labeled)

        missing: List[ImageRecord] = []
        if images_dir is not None:
            missing = find_missing_images(labeled)
            if missing:
                if strict:
                    raise MissingImagesError(f"{len(missing)} image files are missing under {images_dir}",
                                             missing=len(missing))
                logger.warning(f"Skipping {len(missing)} records without an image file")
                missing_ids = {r.id for r in missing}
                labeled = [r for r in labeled if r.id not in missing_ids]

        split_records = make_splits(labeled, ratios=ratios, seed=seed)

    logger.info("Ingestion finished", records=len(split_records), errors=len(errors),
                missing=len(missing), total=summary[SUMMARY_TOTAL])
    return IngestResult(records=split_records, errors=errors, summary=summary, missing=missing,
                        mean_scores=mean_scores)
