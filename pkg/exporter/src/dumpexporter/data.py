"""Data sources: deterministic folder iteration and named-split adapters."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torchvision
from PIL import Image

from dumpexporter.spec import ExportError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp")


def _to_tensor(img: Image.Image, size: int, mean, std) -> torch.Tensor:
    img = img.convert("RGB").resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    t = torch.from_numpy(arr).permute(2, 0, 1)
    if mean is not None:
        t = (t - torch.tensor(mean).view(-1, 1, 1)) / torch.tensor(std).view(-1, 1, 1)
    return t


class FolderSource:
    """Images directly in a folder (unlabeled) or in class subfolders (labeled).

    Iteration order is sorted paths, so exports are reproducible.
    """

    def __init__(self, root: str | Path, image_size: int, mean=None, std=None):
        self.root = Path(root)
        if not self.root.is_dir():
            raise ExportError(f"image folder not found: {self.root}")
        self.image_size = image_size
        self.mean, self.std = mean, std

        subdirs = sorted(p for p in self.root.iterdir() if p.is_dir())
        flat = sorted(
            p for p in self.root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
        )
        if subdirs and flat:
            raise ExportError(f"{self.root}: mix of class subfolders and loose images")
        if subdirs:
            self.paths = []
            self.labels = []
            for idx, sub in enumerate(subdirs):
                imgs = sorted(p for p in sub.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
                self.paths.extend(imgs)
                self.labels.extend([idx] * len(imgs))
            self.class_names = [d.name for d in subdirs]
        else:
            self.paths = flat
            self.labels = None
            self.class_names = None
        if not self.paths:
            raise ExportError(f"no images under {self.root}")

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def __len__(self):
        return len(self.paths)

    def batches(self, batch_size: int):
        for start in range(0, len(self.paths), batch_size):
            chunk = self.paths[start : start + batch_size]
            tensors = [
                _to_tensor(Image.open(p), self.image_size, self.mean, self.std) for p in chunk
            ]
            yield torch.stack(tensors)


class NamedSplitSource:
    """Adapters for standard dataset splits ("cifar10:test" etc.), no downloads."""

    DATASETS = {
        "cifar10": torchvision.datasets.CIFAR10,
        "cifar100": torchvision.datasets.CIFAR100,
        "mnist": torchvision.datasets.MNIST,
        "svhn": torchvision.datasets.SVHN,
    }

    def __init__(self, source: str, data_root: str, image_size: int, mean=None, std=None):
        name, _, split = source.partition(":")
        if name not in self.DATASETS:
            raise ExportError(f"unknown named split {source!r}")
        split = split or "test"
        cls = self.DATASETS[name]
        try:
            if name == "svhn":
                self.ds = cls(data_root, split=split, download=False)
            else:
                self.ds = cls(data_root, train=(split == "train"), download=False)
        except RuntimeError as exc:
            raise ExportError(f"named split {source!r} not present under {data_root}: {exc}") from None
        self.image_size = image_size
        self.mean, self.std = mean, std

    @property
    def has_labels(self) -> bool:
        return True

    @property
    def labels(self):
        if hasattr(self.ds, "targets"):
            return [int(t) for t in self.ds.targets]
        return [int(t) for t in self.ds.labels]

    def __len__(self):
        return len(self.ds)

    def batches(self, batch_size: int):
        for start in range(0, len(self.ds), batch_size):
            tensors = [
                _to_tensor(self.ds[i][0], self.image_size, self.mean, self.std)
                for i in range(start, min(start + batch_size, len(self.ds)))
            ]
            yield torch.stack(tensors)


def open_source(spec) -> FolderSource | NamedSplitSource:
    if ":" in spec.source and not Path(spec.source).exists():
        return NamedSplitSource(spec.source, spec.data_root, spec.image_size, spec.mean, spec.std)
    return FolderSource(spec.source, spec.image_size, spec.mean, spec.std)
