"""FER-2013 ingestion: CSV parsing, label encoding, splitting and batching.

The expected input is the standard CSV with header ``emotion,pixels,Usage``,
one row per image: a class index 0-6, a string of 2304 space-separated
pixel values, and a usage tag. Pixels are reshaped row-major to 48x48 and
normalized to [0,1]. The dataset itself is never bundled; callers supply
the file.
"""

import csv
from dataclasses import dataclass
from typing import IO, Iterable

import numpy as np

NUM_CLASSES = 7
IMAGE_SIDE = 48
PIXELS_PER_IMAGE = IMAGE_SIDE * IMAGE_SIDE
EMOTION_NAMES = ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")
USAGE_TAGS = ("Training", "PublicTest", "PrivateTest")
HEADER = ("emotion", "pixels", "Usage")
HEADER_NO_USAGE = ("emotion", "pixels")


class DataFormatError(ValueError):
    """Malformed CSV content; the message names the offending row."""


@dataclass
class FerRecord:
    emotion: int
    pixels: np.ndarray  # 2304 uint8 values, row-major 48x48
    usage: str


@dataclass
class LabeledDataset:
    """Normalized images with integer labels and one-hot targets."""

    images: np.ndarray  # [N,1,48,48] float32 in [0,1]
    labels: np.ndarray  # [N] int64 in 0..6
    onehots: np.ndarray  # [N,7] float32

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(self.images[idx], self.labels[idx], self.onehots[idx])

    @classmethod
    def from_records(cls, records: Iterable[FerRecord]) -> "LabeledDataset":
        records = list(records)
        n = len(records)
        images = np.zeros((n, 1, IMAGE_SIDE, IMAGE_SIDE), dtype=np.float32)
        labels = np.zeros(n, dtype=np.int64)
        for i, rec in enumerate(records):
            images[i, 0] = normalize_pixels(rec.pixels).reshape(IMAGE_SIDE, IMAGE_SIDE)
            labels[i] = rec.emotion
        onehots = np.zeros((n, NUM_CLASSES), dtype=np.float32)
        if n:
            onehots[np.arange(n), labels] = 1.0
        return cls(images, labels, onehots)


def normalize_pixels(pixels: np.ndarray) -> np.ndarray:
    """Map 0..255 linearly onto [0,1]."""
    return np.asarray(pixels, dtype=np.float32) / 255.0


def denormalize_pixels(values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float32) * 255.0


def one_hot(label: int) -> np.ndarray:
    if not 0 <= label < NUM_CLASSES:
        raise ValueError(f"label {label} outside 0..{NUM_CLASSES - 1}")
    vec = np.zeros(NUM_CLASSES, dtype=np.float32)
    vec[label] = 1.0
    return vec


def parse_fer_csv(source: str | IO[str]) -> list[FerRecord]:
    """Parse a FER-2013 CSV from a path or text stream.

    Malformed rows raise DataFormatError naming the row number; nothing is
    silently skipped.
    """
    if isinstance(source, str):
        with open(source, "r", encoding="utf-8-sig", newline="") as fh:
            return _parse_rows(csv.reader(fh))
    return _parse_rows(csv.reader(source))


def _parse_rows(reader) -> list[FerRecord]:
    records = []
    try:
        header = next(reader)
    except StopIteration:
        raise DataFormatError("empty file: missing header row") from None
    header = tuple(h.strip() for h in header)
    if header == HEADER:
        has_usage = True
    elif header == HEADER_NO_USAGE:
        has_usage = False
    else:
        raise DataFormatError(f"bad header {header!r}, expected {','.join(HEADER)}")
    columns = 3 if has_usage else 2
    for row_num, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != columns:
            raise DataFormatError(f"row {row_num}: expected {columns} columns, got {len(row)}")
        emotion_s, pixel_s = row[0].strip(), row[1]
        usage = row[2].strip() if has_usage else ""
        try:
            emotion = int(emotion_s)
        except ValueError:
            raise DataFormatError(f"row {row_num}: non-integer emotion {emotion_s!r}") from None
        if not 0 <= emotion < NUM_CLASSES:
            raise DataFormatError(f"row {row_num}: emotion {emotion} outside 0..6")
        try:
            pixels = np.array(pixel_s.split(), dtype=np.int32)
        except ValueError:
            raise DataFormatError(f"row {row_num}: non-integer pixel value") from None
        if pixels.size != PIXELS_PER_IMAGE:
            raise DataFormatError(
                f"row {row_num}: {pixels.size} pixel values, expected {PIXELS_PER_IMAGE}"
            )
        if pixels.min() < 0 or pixels.max() > 255:
            raise DataFormatError(f"row {row_num}: pixel value outside 0..255")
        if has_usage and usage not in USAGE_TAGS:
            raise DataFormatError(f"row {row_num}: unknown usage tag {usage!r}")
        records.append(FerRecord(emotion, pixels.astype(np.uint8), usage))
    return records


def split_dataset(
    records: list[FerRecord], seed: int = 0
) -> tuple[LabeledDataset, LabeledDataset]:
    """Usage-tag split: Training vs PublicTest+PrivateTest.

    Reproduces the canonical 28,709 / 7,178 partition on the full file.
    Records without usage tags fall back to a seeded random 80:20 split.
    """
    if records and not all(r.usage for r in records):
        return random_split(records, 0.2, seed)
    train = [r for r in records if r.usage == "Training"]
    test = [r for r in records if r.usage != "Training"]
    return LabeledDataset.from_records(train), LabeledDataset.from_records(test)


def random_split(
    records: list[FerRecord], test_fraction: float = 0.2, seed: int = 0
) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded 80:20 fallback for files without meaningful usage tags."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_test = int(round(len(records) * test_fraction))
    test_idx = set(order[:n_test].tolist())
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return LabeledDataset.from_records(train), LabeledDataset.from_records(test)


def class_histogram(dataset: LabeledDataset) -> np.ndarray:
    """Per-class sample counts, indexed by emotion label."""
    return np.bincount(dataset.labels, minlength=NUM_CLASSES)


def histogram_csv(dataset: LabeledDataset) -> str:
    counts = class_histogram(dataset)
    lines = ["class,name,count"]
    lines += [f"{i},{EMOTION_NAMES[i]},{int(c)}" for i, c in enumerate(counts)]
    return "\n".join(lines) + "\n"


def batches(dataset: LabeledDataset, batch_size: int, seed: int = 0):
    """One epoch of (images, onehots) batches in a seeded shuffled order.

    The final short batch is included, so the epoch is a permutation of
    the dataset.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], dataset.onehots[idx]
