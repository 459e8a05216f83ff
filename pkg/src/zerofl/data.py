"""Synthetic datasets, Dirichlet (LDA) non-IID partitioning with equal client
sizes, client-level validation splits, and an IDX-format loader for small
real-data smoke runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file (bad magic, truncation, unsupported type)."""


@dataclass
class Dataset:
    samples: np.ndarray  # (N, ...) float32
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"samples/labels length mismatch: {self.samples.shape[0]} vs {self.labels.shape[0]}"
            )

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.samples[idx], self.labels[idx])


@dataclass
class PartitionPlan:
    """Per-client sample-index assignment under Dirichlet(alpha)."""

    alpha: float
    assignments: list[np.ndarray]  # disjoint, equal-size index arrays

    @property
    def num_clients(self) -> int:
        return len(self.assignments)


def synth_blobs(
    num_classes: int,
    samples_per_class: int,
    dims: int,
    spread: float,
    seed: int,
) -> Dataset:
    """Gaussian class clusters with class-distinct mean directions on the
    unit sphere. Fully deterministic under `seed`."""
    rng = np.random.default_rng([seed, 0xB10B5])
    means = _sphere_means(rng, num_classes, dims)
    return _sample_blobs(rng, means, samples_per_class, spread)


def make_blob_task(
    num_classes: int,
    samples_per_class: int,
    test_per_class: int,
    dims: int,
    spread: float,
    seed: int,
) -> tuple[Dataset, Dataset]:
    """Train and test blob datasets drawn around the same class means."""
    rng = np.random.default_rng([seed, 0xB10B5])
    means = _sphere_means(rng, num_classes, dims)
    train = _sample_blobs(rng, means, samples_per_class, spread)
    test = _sample_blobs(rng, means, test_per_class, spread)
    return train, test


def _sphere_means(rng: np.random.Generator, num_classes: int, dims: int) -> np.ndarray:
    means = rng.standard_normal((num_classes, dims))
    return means / np.linalg.norm(means, axis=1, keepdims=True)


def _sample_blobs(
    rng: np.random.Generator, means: np.ndarray, per_class: int, spread: float
) -> Dataset:
    num_classes, dims = means.shape
    xs, ys = [], []
    for c in range(num_classes):
        noise = rng.standard_normal((per_class, dims)) * spread
        xs.append(means[c][None, :] + noise)
        ys.append(np.full(per_class, c, dtype=np.int64))
    x = np.concatenate(xs).astype(np.float32)
    y = np.concatenate(ys)
    perm = rng.permutation(x.shape[0])
    return Dataset(x[perm], y[perm])


def lda_partition(ds: Dataset, num_clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Dirichlet non-IID partition with exactly equal client sizes.

    Each client draws class proportions from Dirichlet(alpha * 1) and then
    draws samples class-by-class without replacement. When a class pool runs
    dry the proportions are renormalised over the remaining classes. The
    dataset is truncated to num_clients * floor(len/num_clients) samples so
    equality is exact.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if num_clients < 1:
        raise ValueError(f"num_clients must be >= 1, got {num_clients}")
    per_client = len(ds) // num_clients
    if per_client < 1:
        raise ValueError(f"cannot give {num_clients} clients >= 1 sample from {len(ds)}")
    rng = np.random.default_rng([seed, 0x1DA])
    num_classes = ds.num_classes
    pools = [list(np.flatnonzero(ds.labels == c)) for c in range(num_classes)]
    for pool in pools:
        rng.shuffle(pool)
    assignments = []
    for _ in range(num_clients):
        props = rng.dirichlet(np.full(num_classes, alpha))
        taken = []
        for _ in range(per_client):
            avail = np.array([len(p) > 0 for p in pools])
            p = props * avail
            total = p.sum()
            if total == 0:  # only drained classes left in this client's draw
                raise RuntimeError("sample pools exhausted before equal sizes were met")
            c = int(rng.choice(num_classes, p=p / total))
            taken.append(pools[c].pop())
        assignments.append(np.sort(np.array(taken, dtype=np.int64)))
    return PartitionPlan(alpha=alpha, assignments=assignments)


def client_validation_split(
    indices: np.ndarray, fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Split one client's sample indices into disjoint (train, val).

    |val| = round(fraction * n) with round-half-up; a split that would leave
    the training side empty is rejected.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0,1], got {fraction}")
    idx = np.asarray(indices, dtype=np.int64)
    n = idx.size
    if n == 0:
        raise ValueError("cannot split an empty client dataset")
    n_val = int(np.floor(fraction * n + 0.5))
    if n_val >= n:
        raise ValueError(f"validation fraction {fraction} leaves no training samples (n={n})")
    perm = np.random.default_rng([seed, 0x5B111]).permutation(n)
    return np.sort(idx[perm[n_val:]]), np.sort(idx[perm[:n_val]])


def read_idx(path) -> np.ndarray:
    """Parse one IDX file (big-endian dims, u8 payload) into an ndarray."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_MAGIC_IMAGES, IDX_MAGIC_LABELS):
        raise IdxFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    payload = raw[header_end:]
    if len(payload) != count:
        raise IdxFormatError(
            f"{path}: payload has {len(payload)} bytes, dims {dims} require {count}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Load an MNIST-style IDX image/label pair.

    Pixels are scaled to [0,1] float32 and shaped (N, 1, H, W).
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected a 3-d image file, got {images.ndim} dims")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected a 1-d label file, got {labels.ndim} dims")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]}"
        )
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64))
