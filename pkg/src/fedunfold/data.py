"""Datasets: IDX (MNIST) reading/writing, synthetic blobs, client partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IDXError(ValueError):
    pass


class InfeasiblePartition(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ValueError(
                f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return self.labels.size

    @property
    def n(self) -> int:
        return self.labels.size

    def one_hot(self) -> np.ndarray:
        return np.eye(self.classes)[self.labels]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.classes)


# ---------------------------------------------------------------------------
# IDX


def _read_header(buf: bytes, expected_magic: int, path) -> tuple[int, ...]:
    if len(buf) < 4:
        raise IDXError(f"{path}: truncated file")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise IDXError(f"{path}: bad magic 0x{magic:08x} (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise IDXError(f"{path}: truncated header")
    return struct.unpack(f">{ndim}I", buf[4 : 4 + 4 * ndim])


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    dims = _read_header(buf, IMAGE_MAGIC, path)
    count = int(np.prod(dims))
    body = buf[16:]
    if len(body) < count:
        raise IDXError(f"{path}: truncated file, {len(body)} of {count} pixel bytes")
    return np.frombuffer(body, dtype=np.uint8, count=count).reshape(dims)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (count,) = _read_header(buf, LABEL_MAGIC, path)
    body = buf[8:]
    if len(body) < count:
        raise IDXError(f"{path}: truncated file, {len(body)} of {count} label bytes")
    return np.frombuffer(body, dtype=np.uint8, count=count).copy()


def load_idx(images_path, labels_path, classes: int = 10) -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IDXError(f"count mismatch: {images.shape[0]} images, {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), classes)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("image array must be (n, rows, cols)")
    header = struct.pack(">I3I", IMAGE_MAGIC, *images.shape)
    Path(path).write_bytes(header + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", LABEL_MAGIC, labels.size) + labels.tobytes())


# ---------------------------------------------------------------------------
# synthetic data


def synth_blobs(classes: int, dims: int, per_class: int, spread: float, seed) -> Dataset:
    """Isotropic Gaussian clusters, one per class, around random unit-scale centers."""
    if classes <= 0 or dims <= 0 or per_class <= 0:
        raise ValueError("classes, dims and per_class must be positive")
    if spread < 0:
        raise ValueError("spread must be nonnegative")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, dims))
    labels = np.repeat(np.arange(classes), per_class)
    X = centers[labels] + spread * rng.normal(size=(labels.size, dims))
    return Dataset(X, labels, classes)


# ---------------------------------------------------------------------------
# partitioning


@dataclass
class PartitionSpec:
    """``scheme`` is one of iid-balanced, quantity-skew, label-skew, dirichlet."""

    scheme: str
    sizes: list[int] | None = None
    clients: int | None = None
    label_sets: list[list[int]] | None = None
    alpha: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("iid-balanced", "quantity-skew", "label-skew", "dirichlet"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.sizes is not None:
            self.sizes = [int(s) for s in self.sizes]
            if any(s < 0 for s in self.sizes):
                raise ValueError("client sizes must be nonnegative")
        if self.scheme in ("quantity-skew", "label-skew") and self.sizes is None:
            raise ValueError(f"{self.scheme} needs explicit sizes")
        if self.scheme == "label-skew":
            if self.label_sets is None or len(self.label_sets) != len(self.sizes):
                raise ValueError("label-skew needs one label set per client")
            if any(len(s) == 0 for s in self.label_sets):
                raise ValueError("label sets must be nonempty")
        if self.scheme == "dirichlet":
            if self.alpha is None or self.alpha <= 0:
                raise ValueError("dirichlet needs alpha > 0")
            if self.sizes is None and not self.clients:
                raise ValueError("dirichlet needs sizes or a client count")
        if self.scheme == "iid-balanced" and self.sizes is None and not self.clients:
            raise ValueError("iid-balanced needs a client count")

    @property
    def num_clients(self) -> int:
        return len(self.sizes) if self.sizes is not None else int(self.clients)

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionSpec":
        return cls(
            scheme=d["scheme"],
            sizes=d.get("sizes"),
            clients=d.get("clients"),
            label_sets=d.get("label_sets"),
            alpha=d.get("alpha"),
            seed=int(d.get("seed", 0)),
        )


def partition_indices(dataset: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    n = dataset.n
    K = spec.num_clients
    sizes = spec.sizes if spec.sizes is not None else [n // K] * K
    if sum(sizes) > n:
        raise InfeasiblePartition(f"requested {sum(sizes)} samples from a pool of {n}")

    if spec.scheme in ("iid-balanced", "quantity-skew"):
        perm = rng.permutation(n)
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        return [np.sort(perm[bounds[k] : bounds[k + 1]]) for k in range(K)]

    if spec.scheme == "label-skew":
        taken = np.zeros(n, dtype=bool)
        out = []
        for k, (size, labels) in enumerate(zip(sizes, spec.label_sets)):
            allowed = np.flatnonzero(np.isin(dataset.labels, labels) & ~taken)
            if allowed.size < size:
                raise InfeasiblePartition(
                    f"client {k}: label set {labels} has {allowed.size} free samples, needs {size}"
                )
            pick = rng.choice(allowed, size=size, replace=False)
            taken[pick] = True
            out.append(np.sort(pick))
        return out

    # dirichlet: per-client class mix, filled from per-class shuffled queues
    c = dataset.classes
    queues = [list(rng.permutation(np.flatnonzero(dataset.labels == j))) for j in range(c)]
    out = []
    for k, size in enumerate(sizes):
        q = rng.gamma(spec.alpha, 1.0, size=c)
        q = q / q.sum() if q.sum() > 0 else np.full(c, 1.0 / c)
        want = _largest_remainder(q, size)
        pick: list[int] = []
        for j in range(c):
            m = min(want[j], len(queues[j]))
            pick.extend(queues[j][:m])
            del queues[j][:m]
        short = size - len(pick)
        for j in np.argsort(-q, kind="stable"):
            if short == 0:
                break
            m = min(short, len(queues[j]))
            pick.extend(queues[j][:m])
            del queues[j][:m]
            short -= m
        if short:
            raise InfeasiblePartition(f"client {k}: pool exhausted, {short} samples short")
        out.append(np.sort(np.asarray(pick, dtype=np.int64)))
    return out


def _largest_remainder(q: np.ndarray, total: int) -> np.ndarray:
    raw = q * total
    base = np.floor(raw).astype(np.int64)
    rest = total - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rest]] += 1
    return base


def partition(dataset: Dataset, spec: PartitionSpec) -> list[Dataset]:
    return [dataset.subset(idx) for idx in partition_indices(dataset, spec)]


def class_histogram(clients: list[Dataset], classes: int | None = None) -> np.ndarray:
    if classes is None:
        classes = max((d.classes for d in clients), default=0)
    H = np.zeros((len(clients), classes), dtype=np.int64)
    for k, d in enumerate(clients):
        if d.n:
            H[k] = np.bincount(d.labels, minlength=classes)[:classes]
    return H


def balanced_subset(dataset: Dataset, per_class: int, seed) -> Dataset:
    """Class-balanced sample (used for test sets)."""
    rng = np.random.default_rng(seed)
    idx = []
    for j in range(dataset.classes):
        pool = np.flatnonzero(dataset.labels == j)
        if pool.size < per_class:
            raise InfeasiblePartition(f"class {j} has only {pool.size} samples")
        idx.append(rng.choice(pool, size=per_class, replace=False))
    return dataset.subset(np.sort(np.concatenate(idx)))


def train_test_split(pool: Dataset, test_per_class: int, seed) -> tuple[Dataset, Dataset]:
    """Hold out a class-balanced test set; the remainder is the training pool."""
    rng = np.random.default_rng(seed)
    test_idx = []
    for j in range(pool.classes):
        members = np.flatnonzero(pool.labels == j)
        if members.size < test_per_class:
            raise InfeasiblePartition(f"class {j} has only {members.size} samples")
        test_idx.append(rng.choice(members, size=test_per_class, replace=False))
    test_idx = np.sort(np.concatenate(test_idx))
    train_mask = np.ones(pool.n, dtype=bool)
    train_mask[test_idx] = False
    return pool.subset(np.flatnonzero(train_mask)), pool.subset(test_idx)
