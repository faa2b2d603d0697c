"""Class-incremental online streams, vector augmentations and datasets.

Labels are only used to split the data into experiences and for probing;
the learner only ever sees raw minibatches.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import IntegrityError, ProtocolError

DATASET_MAGIC = b"OCDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHQQQ")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("inputs must be N x d and labels length N")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels must lie in [0, class_count)")
        if len(self) < self.class_count:
            raise ValueError("need at least one sample per class")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count)


# -- synthetic data -------------------------------------------------------------------


def synthetic_means(class_count: int, d: int, cluster_sep: float, rng: np.random.Generator) -> np.ndarray:
    """Class means ``cluster_sep / sqrt(2)`` along orthonormal directions, so every pair is ``cluster_sep`` apart."""
    if class_count > d:
        raise ValueError("orthonormal class means need class_count <= d")
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    return (cluster_sep / np.sqrt(2.0)) * q[:, :class_count].T


def make_synthetic(class_count: int = 20, per_class: int = 100, d: int = 32,
                   cluster_sep: float = 6.0, seed: int = 0) -> Dataset:
    """Unit-variance Gaussian clusters around :func:`synthetic_means`."""
    rng = np.random.default_rng(seed)
    means = synthetic_means(class_count, d, cluster_sep, rng)
    labels = np.repeat(np.arange(class_count), per_class)
    inputs = means[labels] + rng.standard_normal((labels.size, d))
    return Dataset(inputs, labels, class_count)


def stratified_split(dataset: Dataset, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices ``(kept, held_out)`` holding out ``round(fraction * n_c)`` samples of every class."""
    rng = np.random.default_rng(seed)
    kept, held = [], []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        held.append(idx[:k])
        kept.append(idx[k:])
    return np.sort(np.concatenate(kept)), np.sort(np.concatenate(held))


def make_synthetic_benchmark(class_count: int = 20, per_class: int = 100, d: int = 32,
                             cluster_sep: float = 6.0, seed: int = 0,
                             test_per_class: int = 50) -> tuple[Dataset, Dataset]:
    """Training set of ``per_class`` samples per class plus a test set drawn from the same clusters."""
    full = make_synthetic(class_count, per_class + test_per_class, d, cluster_sep, seed)
    train_idx, test_idx = stratified_split(full, test_per_class / (per_class + test_per_class), seed + 7919)
    return full.subset(train_idx), full.subset(test_idx)


# -- stream plan --------------------------------------------------------------------------


class EndOfStream(StopIteration):
    """Raised by :func:`next_minibatch` once every experience has been consumed."""


@dataclass
class StreamPlan:
    """Ordered class-incremental experiences over the training split.

    ``experiences[t]`` holds dataset indices in stream order, ``classes[t]``
    the label set of experience ``t``. ``validation`` holds the stratified
    held-out indices, which never enter the stream.
    """

    dataset: Dataset
    experiences: list[np.ndarray]
    classes: list[np.ndarray]
    validation: np.ndarray
    b_s: int = 10
    n_p: int = 1
    boundaries_visible: bool = False
    seed: int = 0

    @property
    def N(self) -> int:
        return int(sum(e.size for e in self.experiences))

    @property
    def T(self) -> int:
        return len(self.experiences)

    def train_indices(self) -> np.ndarray:
        return np.sort(np.concatenate(self.experiences))

    def boundary_info(self) -> list[int]:
        """Number of stream minibatches in each experience (boundary-visible streams only)."""
        if not self.boundaries_visible:
            raise ProtocolError("task boundaries are hidden on this stream")
        return [int(np.ceil(e.size / self.b_s)) for e in self.experiences]

    def minibatches(self) -> Iterator[tuple[np.ndarray, int]]:
        cursor = StreamCursor()
        while True:
            try:
                yield next_minibatch(self, cursor)
            except EndOfStream:
                return

    def short_minibatches(self) -> int:
        """Experiences whose last minibatch has fewer than ``b_s`` rows."""
        return sum(1 for e in self.experiences if e.size % self.b_s)

    def n_minibatches(self) -> int:
        return sum(int(np.ceil(e.size / self.b_s)) for e in self.experiences)


@dataclass
class StreamCursor:
    experience: int = 0
    offset: int = 0


def split_class_incremental(dataset: Dataset, T: int, seed: int = 0, *, b_s: int = 10, n_p: int = 1,
                            boundaries_visible: bool = False, val_fraction: float = 0.1) -> StreamPlan:
    """Partition classes into ``T`` disjoint groups and shuffle each experience once."""
    if T < 1 or dataset.class_count < T:
        raise ValueError(f"cannot split {dataset.class_count} classes into {T} experiences")
    if b_s < 1 or n_p < 1:
        raise ValueError("b_s and n_p must be positive")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = stratified_split(dataset, val_fraction, seed)
    groups = np.array_split(rng.permutation(dataset.class_count), T)
    train_labels = dataset.labels[train_idx]
    experiences = []
    for g in groups:
        idx = train_idx[np.isin(train_labels, g)]
        experiences.append(idx[rng.permutation(idx.size)])
    return StreamPlan(dataset, experiences, [np.sort(g) for g in groups], val_idx,
                      b_s, n_p, boundaries_visible, seed)


def next_minibatch(plan: StreamPlan, cursor: StreamCursor) -> tuple[np.ndarray, int]:
    """Next stream minibatch and the (hidden) experience it came from; advances ``cursor``."""
    while cursor.experience < plan.T and cursor.offset >= plan.experiences[cursor.experience].size:
        cursor.experience += 1
        cursor.offset = 0
    if cursor.experience >= plan.T:
        raise EndOfStream
    exp = cursor.experience
    idx = plan.experiences[exp][cursor.offset:cursor.offset + plan.b_s]
    cursor.offset += plan.b_s
    return plan.dataset.inputs[idx], exp


# -- augmentation -----------------------------------------------------------------------------


@dataclass
class AugmentationPolicy:
    """Per-sample scale jitter, then random masking, then additive Gaussian noise."""

    noise_sigma: float = 0.5
    mask_fraction: float = 0.2
    scale_jitter: tuple[float, float] = (0.8, 1.2)

    def to_dict(self) -> dict:
        return {"noise_sigma": self.noise_sigma, "mask_fraction": self.mask_fraction,
                "scale_jitter": list(self.scale_jitter)}


IDENTITY_POLICY = AugmentationPolicy(0.0, 0.0, (1.0, 1.0))


def _augment(x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    lo, hi = policy.scale_jitter
    out = x * rng.uniform(lo, hi, size=(x.shape[0], 1))
    keep = rng.random(x.shape) >= policy.mask_fraction
    out = np.where(keep, out, 0.0)
    return out + policy.noise_sigma * rng.standard_normal(x.shape)


def make_views(x, policy: AugmentationPolicy, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views of the rows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    return _augment(x, policy, rng), _augment(x, policy, rng)


# -- i.i.d. schedule -----------------------------------------------------------------------------


def iid_schedule(inputs: np.ndarray, b: int, n_epochs: int | None, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Reshuffled full-data minibatches of exactly ``b`` rows; the incomplete tail of each epoch is dropped.

    ``n_epochs=None`` iterates forever.
    """
    n = inputs.shape[0]
    if b < 1 or b > n:
        raise ValueError(f"batch size {b} must lie in [1, {n}]")
    epoch = 0
    while n_epochs is None or epoch < n_epochs:
        order = rng.permutation(n)
        for start in range(0, n - b + 1, b):
            yield inputs[order[start:start + b]]
        epoch += 1


# -- dataset file format ----------------------------------------------------------------------------


def dataset_bytes(dataset: Dataset) -> bytes:
    n, d = dataset.inputs.shape
    body = (_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, d, dataset.class_count)
            + dataset.inputs.astype("<f8").tobytes()
            + dataset.labels.astype("<i8").tobytes())
    return body + struct.pack("<I", zlib.crc32(body))


def save_dataset(dataset: Dataset, path):
    """Write the binary dataset format.

    Layout: magic ``OCDS``, u16 version, u64 N, u64 d, u64 class_count,
    N*d float64 inputs, N int64 labels (all little-endian), u32 CRC-32 of
    everything before it.
    """
    Path(path).write_bytes(dataset_bytes(dataset))


def parse_dataset_bytes(blob: bytes) -> Dataset:
    if len(blob) < _HEADER.size + 4:
        raise IntegrityError("dataset file too short")
    magic, version, n, d, k = _HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise IntegrityError(f"bad dataset magic {magic!r}")
    if version != DATASET_VERSION:
        raise IntegrityError(f"unsupported dataset version {version}")
    expected = _HEADER.size + 8 * n * d + 8 * n + 4
    if len(blob) != expected:
        raise IntegrityError(f"dataset file has {len(blob)} bytes, header implies {expected}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError("dataset checksum mismatch")
    off = _HEADER.size
    inputs = np.frombuffer(blob, "<f8", n * d, off).reshape(n, d).astype(np.float64)
    labels = np.frombuffer(blob, "<i8", n, off + 8 * n * d).astype(np.int64)
    try:
        return Dataset(inputs, labels, int(k))
    except ValueError as exc:
        raise IntegrityError(str(exc)) from exc


def load_dataset(path) -> Dataset:
    return parse_dataset_bytes(Path(path).read_bytes())


@dataclass
class SyntheticDescriptor:
    classes: int = 20
    per_class: int = 100
    d: int = 32
    sep: float = 6.0
    seed: int = 0
    test_per_class: int = 50
    extra: dict = field(default_factory=dict)


def parse_descriptor(text: str) -> SyntheticDescriptor:
    """Parse ``synthetic:classes=20,per_class=100,d=32,sep=6,seed=0``."""
    if not text.startswith("synthetic"):
        raise ValueError(f"not a synthetic descriptor: {text!r}")
    _, _, rest = text.partition(":")
    desc = SyntheticDescriptor()
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, sep, value = item.partition("=")
        if not sep or not hasattr(desc, key) or key == "extra":
            raise ValueError(f"bad synthetic descriptor field {item!r}")
        setattr(desc, key, type(getattr(desc, key))(float(value) if key == "sep" else int(value)))
    return desc
