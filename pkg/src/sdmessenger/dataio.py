"""Loading corpora into tensors and assembling paired labeled/unlabeled batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .datagen import CorpusIndex, dequantize, load_manifest, read_raster
from .errors import ConfigError, ContractError, ManifestError

__all__ = ["Sample", "PairedBatch", "CorpusTensors", "load_sample", "next_pair", "augment", "load_manifest"]


@dataclass
class Sample:
    image: torch.Tensor  # [1, 1, H, W]
    label: torch.Tensor | None  # [1, L, H, W] one-hot
    domain_id: int
    sample_id: str


@dataclass
class PairedBatch:
    labeled_images: torch.Tensor  # [b, 1, H, W]
    labeled_labels: torch.Tensor  # [b, L, H, W]
    unlabeled_images: torch.Tensor  # [b, 1, H, W]

    def __post_init__(self):
        if __debug__:
            self.validate()

    @property
    def half(self) -> int:
        return self.labeled_images.shape[0]

    def validate(self):
        xl, yl, xu = self.labeled_images, self.labeled_labels, self.unlabeled_images
        if xl.dim() != 4 or yl.dim() != 4 or xu.dim() != 4:
            raise ContractError("batch tensors must be 4D")
        if not (xl.shape[0] == yl.shape[0] == xu.shape[0] >= 1):
            raise ContractError(f"labeled/unlabeled halves differ: {xl.shape[0]}, {yl.shape[0]}, {xu.shape[0]}")
        if xl.shape[-2:] != yl.shape[-2:] or xl.shape != xu.shape:
            raise ContractError("image and label spatial shapes differ")
        if not is_one_hot(yl):
            raise ContractError("labeled labels are not one-hot")


def is_one_hot(label: torch.Tensor, dim: int = 1) -> bool:
    return bool(((label == 0) | (label == 1)).all() and (label.sum(dim) == 1).all())


def load_sample(index: CorpusIndex, sample_id: str, dtype=torch.float32) -> Sample:
    try:
        row = index.rows[sample_id]
    except KeyError:
        raise ManifestError(f"unknown sample_id {sample_id!r}") from None
    h, w = index.image_size
    try:
        raw = read_raster(row.image_path)
    except OSError as exc:
        raise ManifestError(f"cannot read image for {sample_id!r}: {exc}") from None
    if raw.shape != (h, w):
        raise ManifestError(f"{sample_id}: image shape {raw.shape} != manifest {(h, w)}")
    image = torch.from_numpy(dequantize(raw)).to(dtype)[None, None]
    label = None
    if row.label_path is not None:
        try:
            classes = read_raster(row.label_path).astype(np.int64)
        except OSError as exc:
            raise ManifestError(f"cannot read label for {sample_id!r}: {exc}") from None
        if classes.shape != (h, w):
            raise ManifestError(f"{sample_id}: label shape {classes.shape} != manifest {(h, w)}")
        if classes.min() < 0 or classes.max() >= index.num_classes:
            raise ManifestError(f"{sample_id}: label is not one-hot over {index.num_classes} classes "
                                f"(values {classes.min()}..{classes.max()})")
        classes_t = torch.from_numpy(classes)
        label = torch.nn.functional.one_hot(classes_t, index.num_classes).permute(2, 0, 1)[None].to(dtype)
    return Sample(image, label, row.domain_id, sample_id)


class CorpusTensors:
    """All samples of one corpus stacked per split, loaded once."""

    def __init__(self, index: CorpusIndex, dtype=torch.float32):
        self.index = index
        self.splits: dict[str, tuple[torch.Tensor, torch.Tensor | None, list[Sample]]] = {}
        for split in ("labeled", "unlabeled", "test"):
            samples = [load_sample(index, sid, dtype) for sid in index.ids(split)]
            if not samples:
                self.splits[split] = (None, None, [])
                continue
            images = torch.cat([s.image for s in samples])
            labels = torch.cat([s.label for s in samples]) if samples[0].label is not None else None
            self.splits[split] = (images, labels, samples)

    def images(self, split: str) -> torch.Tensor | None:
        return self.splits[split][0]

    def labels(self, split: str) -> torch.Tensor | None:
        return self.splits[split][1]

    def samples(self, split: str) -> list[Sample]:
        return self.splits[split][2]


def next_pair(data: CorpusTensors, batch_size: int, rng: torch.Generator) -> PairedBatch:
    """Draw ``batch_size // 2`` labeled and as many unlabeled samples, with replacement."""
    if batch_size < 2 or batch_size % 2:
        raise ConfigError(f"batch_size must be even and >= 2, got {batch_size}")
    xl, yl = data.images("labeled"), data.labels("labeled")
    xu = data.images("unlabeled")
    if xl is None or xu is None:
        raise ConfigError("both labeled and unlabeled splits must be nonempty")
    b = batch_size // 2
    li = torch.randint(xl.shape[0], (b,), generator=rng)
    ui = torch.randint(xu.shape[0], (b,), generator=rng)
    return PairedBatch(xl[li], yl[li], xu[ui])


def random_transform(rng: torch.Generator) -> tuple[int, bool, bool]:
    """(quarter turns, flip rows, flip cols)."""
    draws = torch.randint(0, 4, (1,), generator=rng).item(), torch.randint(0, 2, (2,), generator=rng)
    return int(draws[0]), bool(draws[1][0]), bool(draws[1][1])


def apply_transform(x: torch.Tensor, transform: tuple[int, bool, bool]) -> torch.Tensor:
    k, flip_h, flip_w = transform
    if flip_h:
        x = torch.flip(x, (-2,))
    if flip_w:
        x = torch.flip(x, (-1,))
    if k and (k % 2 == 0 or x.shape[-1] == x.shape[-2]):
        # odd turns only on square rasters so the shape survives
        x = torch.rot90(x, k, (-2, -1))
    return x


def augment(batch: PairedBatch, rng: torch.Generator) -> PairedBatch:
    """Random flips and quarter turns; a labeled image and its label share one transform."""
    xl, yl, xu = [], [], []
    for j in range(batch.half):
        t = random_transform(rng)
        xl.append(apply_transform(batch.labeled_images[j], t))
        yl.append(apply_transform(batch.labeled_labels[j], t))
    for j in range(batch.half):
        xu.append(apply_transform(batch.unlabeled_images[j], random_transform(rng)))
    return PairedBatch(torch.stack(xl), torch.stack(yl), torch.stack(xu))
