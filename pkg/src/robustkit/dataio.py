"""CIFAR binary I/O, a procedural stand-in corpus, and mixup batching."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

Tensor = torch.Tensor

PIXELS = 3 * 32 * 32
RECORD_BYTES = {"cifar10": 1 + PIXELS, "cifar100": 2 + PIXELS}
CLASS_COUNT = {"cifar10": 10, "cifar100": 100}
SPLIT_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: Tensor  # [N,3,32,32] float32 in [0,1]
    labels: Tensor  # [N] int64
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DataFormatError(f"images must be [N,3,H,W], got {tuple(self.images.shape)}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataFormatError("labels length does not match image count")
        if len(self.labels) and int(self.labels.max()) >= self.class_count:
            raise DataFormatError(f"label {int(self.labels.max())} >= class_count {self.class_count}")
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("pixel values must lie in [0,1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, n: int | None = None, start: int = 0) -> "Dataset":
        stop = len(self) if n is None else min(len(self), start + n)
        return Dataset(self.images[start:stop], self.labels[start:stop], self.class_count)

    def take(self, indices) -> "Dataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return Dataset(self.images[idx], self.labels[idx], self.class_count)


# ---------------------------------------------------------------------------
# binary layout


def decode_records(raw: bytes, variant: str) -> Dataset:
    if variant not in RECORD_BYTES:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    rec = RECORD_BYTES[variant]
    if len(raw) % rec:
        raise DataFormatError(
            f"file length {len(raw)} bytes is not a multiple of the {rec}-byte {variant} record"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, rec - PIXELS - 1].astype(np.int64)  # cifar100: fine label sits second
    classes = CLASS_COUNT[variant]
    if labels.size and labels.max() >= classes:
        bad = int(np.argmax(labels >= classes))
        raise DataFormatError(f"record {bad} has label byte {labels[bad]} >= {classes}")
    pixels = arr[:, rec - PIXELS:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return Dataset(torch.from_numpy(pixels), torch.from_numpy(labels), classes)


def encode_records(ds: Dataset, variant: str, coarse_labels=None) -> bytes:
    if ds.images.shape[1:] != (3, 32, 32):
        raise DataFormatError("CIFAR layout requires 3x32x32 images")
    n = len(ds)
    px = torch.round(ds.images * 255.0).to(torch.uint8).reshape(n, PIXELS).numpy()
    lab = ds.labels.numpy().astype(np.uint8).reshape(n, 1)
    if variant == "cifar10":
        cols = [lab, px]
    elif variant == "cifar100":
        coarse = np.zeros((n, 1), np.uint8) if coarse_labels is None else np.asarray(coarse_labels, np.uint8).reshape(n, 1)
        cols = [coarse, lab, px]
    else:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    return np.concatenate(cols, axis=1).tobytes()


def read_cifar_file(path: str | os.PathLike, variant: str = "cifar10") -> Dataset:
    return decode_records(Path(path).read_bytes(), variant)


def write_cifar_file(ds: Dataset, path: str | os.PathLike, variant: str = "cifar10") -> None:
    Path(path).write_bytes(encode_records(ds, variant))


def load_cifar(directory: str | os.PathLike, variant: str = "cifar10", split: str = "train") -> Dataset:
    """Load the standard CIFAR binary distribution from ``directory``.

    Accepts either the extracted folder itself or its parent
    (``cifar-10-batches-bin`` / ``cifar-100-binary``).
    """
    directory = Path(directory)
    names = SPLIT_FILES.get((variant, split))
    if names is None:
        raise ValueError(f"unknown variant/split {variant}/{split}")
    for sub in ("", "cifar-10-batches-bin", "cifar-100-binary"):
        if (directory / sub / names[0]).exists():
            directory = directory / sub
            break
    else:
        raise FileNotFoundError(f"no {names[0]} under {directory}")
    parts = [read_cifar_file(directory / name, variant) for name in names]
    return Dataset(
        torch.cat([p.images for p in parts]), torch.cat([p.labels for p in parts]), CLASS_COUNT[variant]
    )


# ---------------------------------------------------------------------------
# synthetic corpus


def _pink_noise(rng: np.random.Generator, n: int, size: int = 32) -> np.ndarray:
    """Gaussian fields with power falling as 1/f^2, unit std per image."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    f = np.hypot(fx, fy)
    f[0, 0] = 1.0
    amp = 1.0 / f
    amp[0, 0] = 0.0
    white = rng.standard_normal((n, 3, size, size))
    field = np.fft.ifft2(np.fft.fft2(white) * amp).real
    field /= field.std(axis=(1, 2, 3), keepdims=True) + 1e-12
    return field


def class_templates(class_count: int, template_seed: int = 0, size: int = 32) -> np.ndarray:
    """One low-frequency colour pattern per class, shape [K,3,size,size]."""
    rng = np.random.default_rng([template_seed, class_count, 7])
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((class_count, 3, size, size))
    for k in range(class_count):
        for _ in range(3):
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(0.7, 2.5)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.cos(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
            colour = rng.normal(size=3)
            out[k] += colour[:, None, None] * wave
        out[k] /= np.abs(out[k]).max()
    return out


def synth_dataset(
    seed: int,
    n: int,
    class_count: int = 10,
    *,
    template_seed: int = 0,
    signal: float = 0.15,
    clutter: float = 0.05,
    shift: int = 3,
) -> Dataset:
    """Balanced procedural images whose class is a visible low-frequency pattern.

    Each image is mid-gray plus a randomly shifted, randomly scaled copy of
    its class template, plus 1/f^2 "natural" clutter and a little white
    noise, quantised to 8 bits so it survives the CIFAR byte layout.
    Templates depend on ``template_seed`` only, so different ``seed`` values
    give disjoint draws from the same task.
    """
    if n < class_count:
        raise ValueError(f"n={n} must be >= class_count={class_count}")
    rng = np.random.default_rng([seed, n, class_count, 11])
    templates = class_templates(class_count, template_seed)
    labels = np.arange(n) % class_count
    rng.shuffle(labels)
    imgs = np.empty((n, 3, 32, 32))
    dx = rng.integers(-shift, shift + 1, size=n)
    dy = rng.integers(-shift, shift + 1, size=n)
    amp = signal * rng.uniform(0.6, 1.4, size=n)
    for i in range(n):
        imgs[i] = np.roll(templates[labels[i]], (dy[i], dx[i]), axis=(1, 2)) * amp[i]
    imgs += clutter * _pink_noise(rng, n)
    imgs += 0.02 * rng.standard_normal(imgs.shape)
    imgs += 0.5 + 0.08 * rng.standard_normal((n, 3, 1, 1))
    q = np.clip(np.round(imgs * 255.0), 0, 255).astype(np.float32) / np.float32(255.0)
    return Dataset(torch.from_numpy(q), torch.from_numpy(labels.astype(np.int64)), class_count)


# ---------------------------------------------------------------------------
# mixup


@dataclass(frozen=True)
class MixupSchedule:
    pair_epochs: int = 20
    proportion_epochs: int = 5
    proportion_range: tuple[float, float] = (0.0, 0.5)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.proportion_range
        if not 0.0 <= lo <= hi <= 0.5:
            raise ValueError(f"proportion range must satisfy 0 <= lo <= hi <= 0.5, got {self.proportion_range}")
        if self.pair_epochs < 1 or self.proportion_epochs < 1:
            raise ValueError("pair_epochs and proportion_epochs must be >= 1")

    def pairing(self, n: int, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 1, epoch // self.pair_epochs])
        return rng.permutation(n)

    def proportions(self, n: int, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 2, epoch // self.proportion_epochs])
        lo, hi = self.proportion_range
        return rng.uniform(lo, hi, size=n)


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 3, epoch]).permutation(n)


def mixup_batches(
    dataset: Dataset, schedule: MixupSchedule, epoch: int, batch_size: int
) -> Iterator[tuple[Tensor, Tensor, Tensor, Tensor, Tensor]]:
    """Yield ``(mixed, y, y_partner, p, index)`` per batch.

    ``mixed = (1-p) X + p X'`` where the partner of every sample and its
    proportion are fixed for ``pair_epochs`` / ``proportion_epochs`` epochs.
    Train with ``(1-p) CE(y) + p CE(y_partner)``.
    """
    n = len(dataset)
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} > dataset size {n}")
    partner = torch.from_numpy(schedule.pairing(n, epoch))
    p_all = torch.from_numpy(schedule.proportions(n, epoch)).to(dataset.images.dtype)
    order = torch.from_numpy(batch_order(n, schedule.seed, epoch))
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        j = partner[idx]
        p = p_all[idx]
        x = dataset.images[idx]
        x2 = dataset.images[j]
        pb = p.view(-1, 1, 1, 1)
        mixed = (1 - pb) * x + pb * x2
        yield mixed, dataset.labels[idx], dataset.labels[j], p, idx
