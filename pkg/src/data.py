from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Annotated, Any, Literal

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from src.errors import CorruptRecordError, DataError, WrongLengthError

if TYPE_CHECKING:
    from numpy.typing import NDArray

CIFAR_IMAGE_SIZE = 32
CIFAR_CHANNELS = 3
CIFAR_PIXELS = CIFAR_CHANNELS * CIFAR_IMAGE_SIZE * CIFAR_IMAGE_SIZE
MIN_CHANNEL_STD = 1e-12
SYNTHETIC_PIXEL_SCALE = 40.0

# Record layout per variant: (label bytes, index of the label used, number of classes)
CIFAR_LAYOUT: dict[int, tuple[int, int, int]] = {
    10: (1, 0, 10),
    100: (2, 1, 100),
}
CIFAR100_COARSE_CLASSES = 20

CIFAR_FILES: dict[int, dict[str, tuple[str, ...]]] = {
    10: {
        "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
        "test": ("test_batch.bin",),
    },
    100: {
        "train": ("train.bin",),
        "test": ("test.bin",),
    },
}

Split = Literal["train", "test"]


def cifar_record_length(variant: int) -> int:
    """3073 bytes for CIFAR-10, 3074 for CIFAR-100."""
    return CIFAR_LAYOUT[variant][0] + CIFAR_PIXELS


class CifarSource(BaseModel):
    """A directory of CIFAR binary files (`data_batch_*.bin`/`test_batch.bin` or `train.bin`/`test.bin`)."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["cifar"] = "cifar"
    path: Path
    variant: Literal[10, 100] = 100
    subset: int | None = Field(default=None, ge=1, description="Keep the first N samples of each class.")


class SyntheticSource(BaseModel):
    """Seeded image classification data: each class is a fixed pattern of Gaussian blobs, samples add jitter and noise.

    Train and test splits are drawn from independent streams of the same seed. The default noise keeps the classes
    learnable but leaves a small network short of perfect test accuracy, so accuracy drops and distillation gains
    have room to show.
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal["synthetic"] = "synthetic"
    classes: int = Field(default=8, ge=2)
    samples_per_class: int = Field(default=64, ge=1, description="Training samples per class.")
    test_per_class: int = Field(default=8, ge=1)
    image_size: int = Field(default=16, ge=4)
    channels: int = Field(default=3, ge=1)
    blobs: int = Field(default=3, ge=1, description="Gaussian blobs per class pattern.")
    blob_sigma: float = Field(default=2.0, gt=0.0, description="Blob radius in pixels.")
    jitter: int = Field(default=2, ge=0, description="Maximum shift of a sample in pixels.")
    noise: float = Field(default=1.2, ge=0.0, description="Per-pixel noise std relative to the blob amplitude.")
    seed: int = 7


DatasetSource = Annotated[CifarSource | SyntheticSource, Field(discriminator="kind")]


class DatasetHandle(BaseModel):
    model_config = ConfigDict(frozen=True)

    source: DatasetSource
    split: Split = "train"


class NormalizationStats(BaseModel):
    """Per-channel mean and std of the training split, in [0, 1] pixel units."""

    model_config = ConfigDict(frozen=True)

    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def from_pixels(cls, pixels: NDArray[np.uint8]) -> NormalizationStats:
        values = pixels.astype(np.float64) / 255.0
        std = values.std(axis=(0, 2, 3))
        return cls(
            mean=tuple(float(v) for v in values.mean(axis=(0, 2, 3))),
            std=tuple(float(v) if v > MIN_CHANNEL_STD else 1.0 for v in std),
        )

    def apply(self, pixels: NDArray[np.uint8], dtype: Any = np.float32) -> NDArray[Any]:  # noqa: ANN401
        mean = np.asarray(self.mean)[None, :, None, None]
        std = np.asarray(self.std)[None, :, None, None]
        return ((pixels.astype(np.float64) / 255.0 - mean) / std).astype(dtype)


@dataclass(frozen=True)
class RawSplit:
    """Undecoded pixels (NCHW bytes) and integer labels."""

    pixels: NDArray[np.uint8]
    labels: NDArray[np.int64]
    num_classes: int


@dataclass(frozen=True)
class Dataset:
    images: NDArray[Any]
    labels: NDArray[np.int64]
    num_classes: int
    normalization: NormalizationStats

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        _, c, h, w = self.images.shape
        return c, h, w

    def class_counts(self) -> dict[int, int]:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return {i: int(c) for i, c in enumerate(counts)}

    def select_classes(self, class_ids: list[int]) -> Dataset:
        keep = np.isin(self.labels, class_ids)
        return Dataset(self.images[keep], self.labels[keep], self.num_classes, self.normalization)


# CIFAR BINARY
# ============
def parse_cifar_records(data: bytes, variant: int, *, file: str = "<bytes>") -> RawSplit:
    """Parse concatenated CIFAR binary records.

    CIFAR-100 records are `coarse label | fine label | 1024 R | 1024 G | 1024 B` (planes row-major) and use the fine
    label; CIFAR-10 records have a single label byte.

    Raises:
        WrongLengthError: If the data is not a whole number of records.
        CorruptRecordError: If a record carries an out-of-range label.
    """
    label_bytes, label_index, num_classes = CIFAR_LAYOUT[variant]
    record = cifar_record_length(variant)
    if not data or len(data) % record:
        raise WrongLengthError(file, record, len(data))

    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
    labels = records[:, label_index].astype(np.int64)
    if (bad := np.flatnonzero(labels >= num_classes)).size:
        raise CorruptRecordError(int(bad[0]) * record + label_index, f"label {labels[bad[0]]} >= {num_classes}")
    if variant == 100 and (bad := np.flatnonzero(records[:, 0] >= CIFAR100_COARSE_CLASSES)).size:  # noqa: PLR2004
        raise CorruptRecordError(int(bad[0]) * record, f"coarse label {records[bad[0], 0]} >= 20")

    pixels = records[:, label_bytes:].reshape(-1, CIFAR_CHANNELS, CIFAR_IMAGE_SIZE, CIFAR_IMAGE_SIZE).copy()
    return RawSplit(pixels=pixels, labels=labels, num_classes=num_classes)


def _first_per_class(raw: RawSplit, per_class: int) -> RawSplit:
    keep = np.zeros(len(raw.labels), dtype=bool)
    for c in range(raw.num_classes):
        keep[np.flatnonzero(raw.labels == c)[:per_class]] = True
    return RawSplit(raw.pixels[keep], raw.labels[keep], raw.num_classes)


def _read_cifar(source: CifarSource, split: Split) -> RawSplit:
    parts: list[RawSplit] = []
    for name in CIFAR_FILES[source.variant][split]:
        path = source.path / name
        if not path.exists():
            msg = f"CIFAR-{source.variant} file {path} not found."
            raise FileNotFoundError(msg)
        parts.append(parse_cifar_records(path.read_bytes(), source.variant, file=str(path)))

    raw = RawSplit(
        pixels=np.concatenate([p.pixels for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        num_classes=parts[0].num_classes,
    )
    return _first_per_class(raw, source.subset) if source.subset else raw


# SYNTHETIC
# =========
def _class_patterns(source: SyntheticSource) -> NDArray[np.float64]:
    rng = np.random.default_rng([source.seed, 0])
    size = source.image_size
    yy, xx = np.mgrid[0:size, 0:size]
    patterns = np.zeros((source.classes, source.channels, size, size))
    for c in range(source.classes):
        for _ in range(source.blobs):
            cy, cx = rng.uniform(0, size, 2)
            amplitude = rng.uniform(-1.0, 1.0, source.channels)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * source.blob_sigma**2))
            patterns[c] += amplitude[:, None, None] * blob
    return patterns


def _generate_synthetic(source: SyntheticSource, split: Split) -> RawSplit:
    patterns = _class_patterns(source)
    per_class = source.samples_per_class if split == "train" else source.test_per_class
    rng = np.random.default_rng([source.seed, 1 if split == "train" else 2])

    labels = np.repeat(np.arange(source.classes, dtype=np.int64), per_class)
    images = patterns[labels]
    if source.jitter:
        shifts = rng.integers(-source.jitter, source.jitter + 1, size=(len(labels), 2))
        images = np.stack([np.roll(img, tuple(s), axis=(1, 2)) for img, s in zip(images, shifts, strict=True)])
    images = images + rng.normal(0.0, source.noise, images.shape)

    pixels = np.clip(np.rint(127.5 + SYNTHETIC_PIXEL_SCALE * images), 0, 255).astype(np.uint8)
    return RawSplit(pixels=pixels, labels=labels, num_classes=source.classes)


# LOADING
# =======
def read_split(source: CifarSource | SyntheticSource, split: Split) -> RawSplit:
    """Read one split as raw bytes and labels.

    Raises:
        FileNotFoundError: If a CIFAR file is missing.
        WrongLengthError: If a CIFAR file is not a whole number of records.
        CorruptRecordError: If a CIFAR record is malformed.
    """
    raw = _read_cifar(source, split) if isinstance(source, CifarSource) else _generate_synthetic(source, split)
    if not len(raw.labels):
        msg = f"The {split} split of {source.kind} data is empty"
        raise DataError(msg)
    return raw


def load_dataset(
    handle: DatasetHandle,
    normalization: NormalizationStats | None = None,
    dtype: Any = np.float32,  # noqa: ANN401
) -> Dataset:
    """Load one split normalized to zero-mean unit-variance channels.

    The normalization constants come from the training split of the same source unless given.
    """
    raw = read_split(handle.source, handle.split)
    if normalization is None:
        train = raw if handle.split == "train" else read_split(handle.source, "train")
        normalization = NormalizationStats.from_pixels(train.pixels)

    dataset = Dataset(
        images=normalization.apply(raw.pixels, dtype),
        labels=raw.labels,
        num_classes=raw.num_classes,
        normalization=normalization,
    )
    logger.info(f"Loaded {handle.split} split of {handle.source.kind} data: {len(dataset)} samples")
    logger.debug(f"Per-class counts: {dataset.class_counts()}")
    return dataset


def load_splits(
    source: CifarSource | SyntheticSource,
    dtype: Any = np.float32,  # noqa: ANN401
) -> tuple[Dataset, Dataset]:
    """Load the train and test splits with the training split's normalization constants."""
    train = load_dataset(DatasetHandle(source=source, split="train"), dtype=dtype)
    test = load_dataset(DatasetHandle(source=source, split="test"), train.normalization, dtype)
    return train, test
