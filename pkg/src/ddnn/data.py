"""Dataset handling: CIFAR binary records, augmentation, synthetic desk-scale sets.

The tool never downloads anything; CIFAR binaries are read from a configured
directory. The synthetic generator produces class-conditional low-frequency
blob patterns (plus jitter and noise) that small nets can fit quickly, for
fast end-to-end runs and directional checks.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor

CIFAR10_RECORD_LEN = 3073   # label byte + 3*32*32 pixel bytes
CIFAR100_RECORD_LEN = 3074  # coarse + fine label bytes + pixels


@dataclass
class LabeledImage:
    """Decoded image: C×H×W float pixels in [0, 1] plus a class index."""

    pixels: np.ndarray
    label: int


def parse_cifar_record(record: bytes) -> LabeledImage:
    """Decode one CIFAR binary record (3073 bytes; CIFAR-100 fine label at 3074)."""
    n = len(record)
    if n == CIFAR10_RECORD_LEN:
        label, offset, limit = record[0], 1, 10
    elif n == CIFAR100_RECORD_LEN:
        coarse, label, offset, limit = record[0], record[1], 2, 100
        if coarse >= 20:
            raise ValueError(f"coarse label byte {coarse} out of range [0, 20)")
    else:
        raise ValueError(f"CIFAR record must be {CIFAR10_RECORD_LEN} or "
                         f"{CIFAR100_RECORD_LEN} bytes, got {n}")
    if label >= limit:
        raise ValueError(f"label byte {label} out of range [0, {limit})")
    pixels = np.frombuffer(record, dtype=np.uint8, offset=offset).reshape(3, 32, 32)
    return LabeledImage(pixels.astype(np.float32) / 255.0, int(label))


def encode_cifar_record(img: LabeledImage, coarse: Optional[int] = None) -> bytes:
    """Inverse of parse_cifar_record; exact round-trip on valid records."""
    pixel_bytes = np.rint(img.pixels * 255.0).astype(np.uint8).tobytes()
    if coarse is None:
        return bytes([img.label]) + pixel_bytes
    return bytes([coarse, img.label]) + pixel_bytes


def load_cifar_file(path, record_len: int) -> list:
    data = Path(path).read_bytes()
    if len(data) % record_len:
        raise ValueError(f"{path}: size {len(data)} is not a multiple of {record_len}")
    return [parse_cifar_record(data[i:i + record_len])
            for i in range(0, len(data), record_len)]


def load_cifar_dir(directory, dataset: str = "cifar10") -> tuple:
    """Load (train, test) image lists from a CIFAR binary distribution directory."""
    directory = Path(directory)
    if dataset == "cifar10":
        train_files = [directory / f"data_batch_{i}.bin" for i in range(1, 6)]
        test_files = [directory / "test_batch.bin"]
        record_len = CIFAR10_RECORD_LEN
    elif dataset == "cifar100":
        train_files = [directory / "train.bin"]
        test_files = [directory / "test.bin"]
        record_len = CIFAR100_RECORD_LEN
    else:
        raise ValueError(f"unknown CIFAR dataset {dataset!r}")
    for f in train_files + test_files:
        if not f.exists():
            raise FileNotFoundError(f"missing dataset file: {f}")
    train = [img for f in train_files for img in load_cifar_file(f, record_len)]
    test = [img for f in test_files for img in load_cifar_file(f, record_len)]
    return train, test


def resolve_data_dir(configured: str = "") -> Optional[str]:
    """Configured path, else the DDNN_DATA_DIR environment fallback."""
    if configured:
        return configured
    return os.environ.get("DDNN_DATA_DIR") or None


# -- normalization -----------------------------------------------------------


@dataclass
class Normalization:
    """Per-channel mean/std computed once from a training split."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if np.any(self.std <= 0):
            raise ValueError(f"normalization std must be > 0 per channel, got {self.std}")

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        return (pixels - self.mean[:, None, None]) / self.std[:, None, None]

    def invert(self, pixels: np.ndarray) -> np.ndarray:
        return pixels * self.std[:, None, None] + self.mean[:, None, None]


def compute_normalization(images: Sequence[LabeledImage]) -> Normalization:
    stacked = np.stack([img.pixels for img in images]).astype(np.float64)
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    return Normalization(mean, std)


# -- augmentation -------------------------------------------------------------


def pad_crop_flip(pixels: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad each side, crop a window of the original size at a uniform
    offset, then mirror horizontally with probability 1/2."""
    c, h, w = pixels.shape
    padded = np.pad(pixels, ((0, 0), (pad, pad), (pad, pad)))
    oy = int(rng.integers(0, 2 * pad + 1))
    ox = int(rng.integers(0, 2 * pad + 1))
    out = padded[:, oy:oy + h, ox:ox + w]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_train(img: LabeledImage, rng: np.random.Generator) -> LabeledImage:
    """Standard 32×32 training augmentation: pad 4, random crop, random flip."""
    if img.pixels.shape[1:] != (32, 32):
        raise ValueError(f"augment_train expects 32×32 images, got {img.pixels.shape}")
    return LabeledImage(pad_crop_flip(img.pixels, 4, rng), img.label)


def scale_aspect_augment(img: LabeledImage, rng: np.random.Generator,
                         out_size: int = 224) -> LabeledImage:
    """ImageNet-style random scale/aspect-ratio crop. Stub: large-scale
    training is out of desk scope and this path is deliberately unimplemented."""
    raise NotImplementedError("scale/aspect augmentation is declared but out of scope")


# -- synthetic desk-scale data --------------------------------------------------


def make_synthetic_set(classes: int, per_class: int, size=(16, 16), seed: int = 0,
                       channels: int = 3, signal: float = 0.35, noise: float = 0.45,
                       max_shift: int = 2) -> list:
    """Deterministic class-conditional blob images, round-robin by class.

    Each class gets a fixed low-frequency template; samples add a random
    circular shift (up to ``max_shift``) and pixel noise. Labels are
    balanced. Call once with the full per-class budget and slice the result
    to split train/test (templates depend only on the seed).
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    h, w = int(size[0]), int(size[1])
    rng = np.random.default_rng(seed)
    templates = []
    gh, gw = max(2, h // 4), max(2, w // 4)
    for _ in range(classes):
        grid = rng.normal(size=(channels, gh, gw))
        tpl = np.kron(grid, np.ones((h // gh + 1, w // gw + 1)))[:, :h, :w]
        tpl = tpl / max(tpl.std(), 1e-8)
        templates.append(tpl)

    images = []
    for _ in range(per_class):
        for c in range(classes):
            tpl = templates[c]
            if max_shift > 0:
                dy = int(rng.integers(-max_shift, max_shift + 1))
                dx = int(rng.integers(-max_shift, max_shift + 1))
                tpl = np.roll(tpl, (dy, dx), axis=(1, 2))
            pix = 0.5 + signal * tpl + noise * rng.normal(size=(channels, h, w))
            images.append(LabeledImage(np.clip(pix, 0.0, 1.0).astype(np.float32), c))
    return images


def split_per_class(images: Sequence[LabeledImage], classes: int,
                    train_per_class: int) -> tuple:
    """Split a round-robin synthetic set into balanced train/test lists."""
    cut = classes * train_per_class
    if cut > len(images):
        raise ValueError(f"cannot take {train_per_class}/class from {len(images)} images")
    return list(images[:cut]), list(images[cut:])


# -- batching -------------------------------------------------------------------


def iterate_batches(images: Sequence[LabeledImage], batch_size: int,
                    rng: Optional[np.random.Generator] = None,
                    augment: bool = False,
                    normalization: Optional[Normalization] = None,
                    dtype=DEFAULT_DTYPE) -> Iterator[tuple]:
    """Yield (Tensor N×C×H×W, int64 labels) batches.

    With ``rng`` the epoch order is a fresh permutation (each record exactly
    once) and augmentation draws come from the same stream, so a fixed seed
    reproduces the exact batch sequence.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(images)) if rng is not None else np.arange(len(images))
    if augment and rng is None:
        raise ValueError("augmentation needs an rng")
    for start in range(0, len(images), batch_size):
        chunk = order[start:start + batch_size]
        pixels = []
        labels = np.empty(len(chunk), dtype=np.int64)
        for row, idx in enumerate(chunk):
            img = images[int(idx)]
            pix = pad_crop_flip(img.pixels, 4, rng) if augment else img.pixels
            if normalization is not None:
                pix = normalization.apply(pix)
            pixels.append(pix)
            labels[row] = img.label
        yield Tensor(np.stack(pixels).astype(dtype, copy=False)), labels
