"""MNIST ingestion (IDX binary format) and stratified federated splitting.

Files may be plain or gzip-compressed; the four standard names are expected
under one directory:

    train-images-idx3-ubyte[.gz]   train-labels-idx1-ubyte[.gz]
    t10k-images-idx3-ubyte[.gz]    t10k-labels-idx1-ubyte[.gz]

Pixels are scaled to [0, 1] by division by 255. The test set is kept global:
every agent evaluates on the full 10k test images.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError

__all__ = [
    "IMAGE_MAGIC",
    "LABEL_MAGIC",
    "IdxFormatError",
    "LabeledImage",
    "FederatedSplit",
    "parse_idx_images",
    "parse_idx_labels",
    "load_idx_file",
    "load_mnist",
    "stratified_indices",
    "split_stratified",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
IMAGE_ROWS = 28
IMAGE_COLS = 28
N_CLASSES = 10

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


class IdxFormatError(ValueError):
    """Malformed IDX payload (bad magic, truncation, wrong dimensions)."""


@dataclass(frozen=True)
class LabeledImage:
    """One 28x28 image as 784 pixels in [0, 1] plus its digit label."""

    pixels: np.ndarray
    label: int

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.shape != (IMAGE_ROWS * IMAGE_COLS,):
            raise DomainError(f"expected {IMAGE_ROWS * IMAGE_COLS} pixels, got {pixels.shape}")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise DomainError("pixels must lie in [0, 1]")
        if not 0 <= self.label < N_CLASSES:
            raise DomainError(f"label {self.label} out of range")
        object.__setattr__(self, "pixels", pixels)


def parse_idx_images(data: bytes) -> np.ndarray:
    """Decode an IDX image payload into a ``(count, 784)`` float array in [0, 1]."""
    if len(data) < 16:
        raise IdxFormatError("image payload shorter than its 16-byte header")
    magic, count, rows, cols = struct.unpack_from(">iiii", data, 0)
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")
    if (rows, cols) != (IMAGE_ROWS, IMAGE_COLS):
        raise IdxFormatError(f"expected {IMAGE_ROWS}x{IMAGE_COLS} images, got {rows}x{cols}")
    expected = 16 + count * rows * cols
    if len(data) != expected:
        raise IdxFormatError(f"image payload is {len(data)} bytes, expected {expected}")
    raw = np.frombuffer(data, dtype=np.uint8, offset=16)
    return raw.reshape(count, rows * cols).astype(np.float64) / 255.0


def parse_idx_labels(data: bytes) -> np.ndarray:
    """Decode an IDX label payload into a ``(count,)`` int array of digits 0-9."""
    if len(data) < 8:
        raise IdxFormatError("label payload shorter than its 8-byte header")
    magic, count = struct.unpack_from(">ii", data, 0)
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")
    if len(data) != 8 + count:
        raise IdxFormatError(f"label payload is {len(data)} bytes, expected {8 + count}")
    labels = np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() >= N_CLASSES:
        raise IdxFormatError(f"label {labels.max()} out of range 0-{N_CLASSES - 1}")
    return labels


def load_idx_file(path: str | Path) -> bytes:
    """Read an IDX file, transparently decompressing gzip."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _find(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / (stem + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem}[.gz] not found under {directory}")


def load_mnist(directory: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Load (train_images, train_labels, test_images, test_labels) from a directory."""
    directory = Path(directory)
    train_x = parse_idx_images(load_idx_file(_find(directory, TRAIN_IMAGES)))
    train_y = parse_idx_labels(load_idx_file(_find(directory, TRAIN_LABELS)))
    test_x = parse_idx_images(load_idx_file(_find(directory, TEST_IMAGES)))
    test_y = parse_idx_labels(load_idx_file(_find(directory, TEST_LABELS)))
    if len(train_x) != len(train_y) or len(test_x) != len(test_y):
        raise IdxFormatError("image/label counts disagree")
    return train_x, train_y, test_x, test_y


@dataclass
class FederatedSplit:
    """Per-agent training shards plus the shared (global) test view.

    Shards are disjoint index sets covering the whole training set; sizes
    differ by at most one, and each shard's per-class counts differ from an
    exact proportional share by at most one item.
    """

    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    shard_indices: list = field(default_factory=list)

    @property
    def n_agents(self) -> int:
        return len(self.shard_indices)

    def shard_sizes(self) -> list[int]:
        return [len(ix) for ix in self.shard_indices]

    def shard(self, agent: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.shard_indices[agent]
        return self.train_images[idx], self.train_labels[idx]


def stratified_indices(labels: np.ndarray, n_agents: int, seed: int) -> list[np.ndarray]:
    """Deal indices into ``n_agents`` label-stratified shards.

    Within each class the (seeded) shuffled items are dealt round-robin; the
    dealing pointer carries over between classes so total shard sizes also
    stay within one of each other. Deterministic given the seed.
    """
    labels = np.asarray(labels)
    n = labels.size
    if not 1 <= n_agents <= n:
        raise DomainError(f"agent count {n_agents} out of range 1..{n}")
    rng = np.random.default_rng(seed)
    shards: list[list[int]] = [[] for _ in range(n_agents)]
    pointer = 0
    for cls in range(N_CLASSES):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.size)]
        for k, idx in enumerate(members):
            shards[(pointer + k) % n_agents].append(int(idx))
        pointer = (pointer + members.size) % n_agents
    # Items with labels outside 0..9 cannot occur (parsers reject them).
    return [np.array(sorted(s), dtype=np.int64) for s in shards]


def split_stratified(data, n_agents: int, seed: int) -> FederatedSplit:
    """Split ``(train_x, train_y, test_x, test_y)`` into a FederatedSplit."""
    train_x, train_y, test_x, test_y = data
    return FederatedSplit(train_x, train_y, test_x, test_y,
                          stratified_indices(train_y, n_agents, seed))
