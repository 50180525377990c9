"""Dataset ingestion (IDX binary format), synthetic blobs, and client splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


class BadMagicError(DatasetError):
    """IDX file does not start with the expected magic number."""


class DimensionMismatchError(DatasetError):
    """Image and label files disagree on the sample count."""


class TruncatedFileError(DatasetError):
    """IDX file ends before the payload announced by its header."""


class TooFewSamplesError(DatasetError):
    """Dataset too small for the requested partition."""


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix in [0, 1], integer labels, and the class count."""

    features: np.ndarray   # (samples, input_dim) float64
    labels: np.ndarray     # (samples,) int64
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DatasetError("features must be a 2-D matrix")
        if len(self.features) != len(self.labels):
            raise DimensionMismatchError(
                f"{len(self.features)} feature rows vs {len(self.labels)} labels")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise DatasetError("label out of range")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ClientPartition:
    """Disjoint per-client index lists and normalized dataset weights."""

    assignments: tuple[np.ndarray, ...]
    weights: np.ndarray    # alpha_k = |D_k| / sum |D_k|

    def __post_init__(self):
        total = sum(len(a) for a in self.assignments)
        stacked = np.concatenate(self.assignments) if total else np.array([], dtype=np.int64)
        if len(np.unique(stacked)) != total:
            raise DatasetError("client index lists overlap")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise DatasetError("client weights must sum to 1")

    @property
    def num_clients(self) -> int:
        return len(self.assignments)


def _read_exact(fh, count: int, path: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"{path}: expected {count} more bytes, got {len(data)}")
    return data


def read_idx(images_path, labels_path) -> LabeledDataset:
    """Parse big-endian IDX image/label files; pixels are scaled by 1/255."""
    images_path, labels_path = str(images_path), str(labels_path)
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise BadMagicError(f"{images_path}: magic 0x{magic:08x}, "
                                f"expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(fh, count * rows * cols, images_path)
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise BadMagicError(f"{labels_path}: magic 0x{magic:08x}, "
                                f"expected 0x{IDX_LABELS_MAGIC:08x}")
        raw = _read_exact(fh, label_count, labels_path)
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if label_count != count:
        raise DimensionMismatchError(
            f"{count} images vs {label_count} labels")
    num_classes = int(labels.max()) + 1 if labels.size else 0
    return LabeledDataset(features=pixels / 255.0, labels=labels,
                          num_classes=num_classes)


def write_idx(images_path, labels_path, pixels: np.ndarray, labels: np.ndarray,
              rows: int, cols: int) -> None:
    """Write uint8 pixel rows and labels as a big-endian IDX pair."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if pixels.shape != (len(labels), rows * cols):
        raise DimensionMismatchError("pixel matrix does not match rows*cols/labels")
    with open(str(images_path), "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(labels), rows, cols))
        fh.write(pixels.tobytes())
    with open(str(labels_path), "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def _class_means(num_classes: int, input_dim: int) -> np.ndarray:
    """Deterministic, distinct cluster centers inside [0, 1]^input_dim."""
    means = np.full((num_classes, input_dim), 0.5)
    if input_dim >= num_classes:
        # scaled simplex: one coordinate pushed up per class
        for c in range(num_classes):
            means[c, c] = 0.9
            means[c, :] -= 0.3 / input_dim
            means[c, c] += 0.3 / input_dim
    else:
        # fall back to a circle in the first two coordinates
        angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
        means[:, 0] = 0.5 + 0.35 * np.cos(angles)
        if input_dim > 1:
            means[:, 1] = 0.5 + 0.35 * np.sin(angles)
    return np.clip(means, 0.0, 1.0)


def synth_blobs(num_classes: int, samples: int, input_dim: int, spread: float,
                seed: int) -> LabeledDataset:
    """Gaussian clusters with distinct means; labels assigned round-robin."""
    if num_classes < 1 or samples < 1 or input_dim < 1 or spread < 0:
        raise DatasetError("num_classes, samples, input_dim must be positive; spread >= 0")
    rng = np.random.default_rng(seed)
    means = _class_means(num_classes, input_dim)
    labels = np.arange(samples, dtype=np.int64) % num_classes
    features = means[labels] + spread * rng.standard_normal((samples, input_dim))
    return LabeledDataset(features=np.clip(features, 0.0, 1.0), labels=labels,
                          num_classes=num_classes)


def partition(ds: LabeledDataset, num_clients: int, mode: str = "shard_non_iid",
              shards_per_client: int = 2, seed: int = 0,
              samples_per_client: int | None = None) -> ClientPartition:
    """Split a dataset across clients.

    iid: shuffle and deal equal contiguous chunks.  shard_non_iid: sort by
    label, cut into num_clients*shards_per_client shards, deal
    shards_per_client shuffled shards to each client, so each client sees
    at most shards_per_client label values on well-separated data.
    samples_per_client caps each client's list after assignment (weights
    renormalize over what is kept).
    """
    if num_clients < 1:
        raise DatasetError("num_clients must be >= 1")
    if len(ds) < num_clients:
        raise TooFewSamplesError(f"{len(ds)} samples for {num_clients} clients")
    rng = np.random.default_rng(seed)
    if mode == "iid":
        order = rng.permutation(len(ds))
        chunks = np.array_split(order, num_clients)
    elif mode == "shard_non_iid":
        num_shards = num_clients * shards_per_client
        if len(ds) < num_shards:
            raise TooFewSamplesError(
                f"{len(ds)} samples cannot form {num_shards} shards")
        by_label = np.lexsort((np.arange(len(ds)), ds.labels))
        shards = np.array_split(by_label, num_shards)
        shard_order = rng.permutation(num_shards)
        chunks = [np.concatenate([shards[s] for s in
                                  shard_order[c * shards_per_client:(c + 1) * shards_per_client]])
                  for c in range(num_clients)]
    else:
        raise DatasetError(f"unknown partition mode: {mode!r}")
    if samples_per_client is not None:
        chunks = [c[:samples_per_client] for c in chunks]
    if any(len(c) == 0 for c in chunks):
        raise TooFewSamplesError("a client received no samples")
    sizes = np.array([len(c) for c in chunks], dtype=np.float64)
    return ClientPartition(assignments=tuple(np.sort(c) for c in chunks),
                           weights=sizes / sizes.sum())
