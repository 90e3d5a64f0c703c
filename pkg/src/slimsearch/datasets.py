"""Built-in synthetic image sets and a folder adapter, all deterministic.

The default "motifs" set is built so that channel capacity is the binding
resource: each class is a fixed subset of small localized texture motifs pasted
at random positions on a noise background. Detecting motifs needs convolution
filters, counting them needs global pooling, and telling classes apart needs
enough distinct filters, so wider subnets genuinely help until the motif bank
is covered. The "blobs" set is a linearly separable sanity set: one smooth
template per class plus noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .errors import RecordError


@dataclass(frozen=True)
class DatasetSpec:
    """What to build (or load) and how big each split is."""

    kind: str = "motifs"
    num_classes: int = 10
    image_size: int = 32
    channels: int = 3
    train_size: int = 4096
    val_size: int = 2048
    calib_size: int = 1024
    seed: int = 11
    noise_std: float = 1.0
    signal_scale: float = 1.0
    motif_count: int = 16
    motifs_per_class: int = 3
    motif_size: int = 7
    root: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("motifs", "blobs", "folder"):
            raise RecordError(f"unknown dataset kind {self.kind!r}")
        if self.num_classes < 2:
            raise RecordError("need at least two classes")
        if min(self.train_size, self.val_size, self.calib_size) < 1:
            raise RecordError("every split needs at least one example")
        if self.kind == "motifs":
            if self.motif_size >= self.image_size:
                raise RecordError("motifs must be smaller than the image")
            if self.motifs_per_class > self.motif_count:
                raise RecordError("motifs_per_class cannot exceed motif_count")
        if self.kind == "folder" and not self.root:
            raise RecordError("folder datasets need a root directory")


class ArrayDataset:
    """An in-memory split with deterministic batch iteration."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor):
        if images.shape[0] != labels.shape[0]:
            raise RecordError("images and labels disagree in length")
        self.images = images
        self.labels = labels

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def batches(
        self,
        batch_size: int,
        shuffle: bool = False,
        rng: np.random.Generator | None = None,
        drop_last: bool = False,
    ) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        """Yield (inputs, labels) batches in index order, or in an rng-drawn
        permutation when shuffling; identical rng state gives identical order."""
        if shuffle:
            if rng is None:
                raise RecordError("shuffled iteration needs an rng for reproducibility")
            order = torch.from_numpy(rng.permutation(len(self)))
        else:
            order = torch.arange(len(self))
        for start in range(0, len(self), batch_size):
            index = order[start : start + batch_size]
            if drop_last and index.shape[0] < batch_size:
                break
            yield self.images[index], self.labels[index]

    def batch_list(self, batch_size: int) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Materialized unshuffled batches, for repeated evaluation passes."""
        return list(self.batches(batch_size))


@dataclass(frozen=True)
class DatasetBundle:
    train: ArrayDataset
    val: ArrayDataset
    calib: ArrayDataset


def _balanced_labels(size: int, num_classes: int) -> np.ndarray:
    # Round-robin assignment keeps splits balanced for any size.
    return np.arange(size) % num_classes


def _smooth(stack: np.ndarray) -> np.ndarray:
    # Two passes of a 3x3 box blur, edges clamped; enough to make motifs
    # low-frequency so small conv kernels can match them.
    for _ in range(2):
        padded = np.pad(stack, [(0, 0), (0, 0), (1, 1), (1, 1)], mode="edge")
        stack = sum(
            padded[:, :, dy : dy + stack.shape[2], dx : dx + stack.shape[3]]
            for dy in range(3)
            for dx in range(3)
        ) / 9.0
    return stack


def _make_motif_bank(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    bank = rng.normal(0.0, 1.0, (spec.motif_count, spec.channels, spec.motif_size, spec.motif_size))
    bank = _smooth(bank)
    norms = np.sqrt((bank ** 2).sum(axis=(1, 2, 3), keepdims=True))
    return bank / norms


def _class_subsets(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    subsets: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    while len(subsets) < spec.num_classes:
        pick = tuple(sorted(rng.choice(spec.motif_count, spec.motifs_per_class, replace=False)))
        if pick not in seen:
            seen.add(pick)
            subsets.append(pick)
    return np.array(subsets)


def _motif_split(
    spec: DatasetSpec, size: int, bank: np.ndarray, subsets: np.ndarray, rng: np.random.Generator
) -> ArrayDataset:
    side = spec.image_size
    span = side - spec.motif_size + 1
    labels = _balanced_labels(size, spec.num_classes)
    images = rng.normal(0.0, spec.noise_std, (size, spec.channels, side, side))
    # Paste each of the class's motifs at an independent random offset with a
    # small amplitude jitter; contrast is controlled by signal_scale alone.
    amplitude = spec.signal_scale * rng.uniform(0.8, 1.2, (size, subsets.shape[1]))
    offsets = rng.integers(0, span, size=(size, subsets.shape[1], 2))
    for row in range(size):
        for slot, motif_index in enumerate(subsets[labels[row]]):
            top, left = offsets[row, slot]
            images[
                row, :, top : top + spec.motif_size, left : left + spec.motif_size
            ] += amplitude[row, slot] * bank[motif_index]
    return ArrayDataset(
        torch.from_numpy(images.astype(np.float32)),
        torch.from_numpy(labels.astype(np.int64)),
    )


def _blob_split(
    spec: DatasetSpec, size: int, templates: np.ndarray, rng: np.random.Generator
) -> ArrayDataset:
    labels = _balanced_labels(size, spec.num_classes)
    noise = rng.normal(0.0, spec.noise_std, (size, spec.channels, spec.image_size, spec.image_size))
    images = templates[labels] * spec.signal_scale + noise
    return ArrayDataset(
        torch.from_numpy(images.astype(np.float32)),
        torch.from_numpy(labels.astype(np.int64)),
    )


def build_dataset(spec: DatasetSpec) -> DatasetBundle:
    """Materialize the three splits; the same spec always yields the same data."""
    if spec.kind == "folder":
        return _load_folder(spec)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "motifs":
        bank = _make_motif_bank(spec, rng)
        subsets = _class_subsets(spec, rng)
        train = _motif_split(spec, spec.train_size, bank, subsets, rng)
        val = _motif_split(spec, spec.val_size, bank, subsets, rng)
        calib = _motif_split(spec, spec.calib_size, bank, subsets, rng)
    else:
        shape = (spec.num_classes, spec.channels, spec.image_size, spec.image_size)
        templates = _smooth(rng.normal(0.0, 1.0, shape))
        norms = np.sqrt((templates ** 2).sum(axis=(1, 2, 3), keepdims=True))
        templates = templates / norms * spec.image_size
        train = _blob_split(spec, spec.train_size, templates, rng)
        val = _blob_split(spec, spec.val_size, templates, rng)
        calib = _blob_split(spec, spec.calib_size, templates, rng)
    return DatasetBundle(train=train, val=val, calib=calib)


def _load_folder(spec: DatasetSpec) -> DatasetBundle:
    """ImageNet-style layout: root/{train,val,calib}/<class>/<image files>.

    A missing calib directory borrows the first calib_size training images.
    Class names are sorted for a stable label assignment.
    """
    root = Path(spec.root)  # type: ignore[arg-type]
    train, class_names = _load_split_dir(root / "train", spec, None)
    val, _ = _load_split_dir(root / "val", spec, class_names)
    calib_dir = root / "calib"
    if calib_dir.is_dir():
        calib, _ = _load_split_dir(calib_dir, spec, class_names)
    else:
        take = min(spec.calib_size, len(train))
        calib = ArrayDataset(train.images[:take], train.labels[:take])
    return DatasetBundle(train=train, val=val, calib=calib)


def _load_split_dir(
    split_dir: Path, spec: DatasetSpec, expected_classes: list[str] | None
) -> tuple[ArrayDataset, list[str]]:
    try:
        from PIL import Image
    except ImportError as error:
        raise RecordError("folder datasets need pillow installed") from error

    if not split_dir.is_dir():
        raise RecordError(f"{split_dir}: split directory not found")
    names = sorted(entry.name for entry in split_dir.iterdir() if entry.is_dir())
    if expected_classes is not None and names != expected_classes:
        raise RecordError(f"{split_dir}: class directories differ from the train split")
    images, labels = [], []
    for label, name in enumerate(names):
        for file in sorted((split_dir / name).iterdir()):
            with Image.open(file) as img:
                array = np.asarray(
                    img.convert("RGB").resize((spec.image_size, spec.image_size)),
                    dtype=np.float32,
                )
            images.append(array.transpose(2, 0, 1) / 255.0)
            labels.append(label)
    if not images:
        raise RecordError(f"{split_dir}: no images")
    dataset = ArrayDataset(
        torch.from_numpy(np.stack(images)), torch.tensor(labels, dtype=torch.int64)
    )
    return dataset, names
