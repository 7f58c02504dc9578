"""Datasets: CIFAR-10 binary batches, synthetic Gaussian blobs, splits and batching."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
PFDS_MAGIC = b"PFDS"


class DatasetError(ValueError):
    pass


class LabeledExample(NamedTuple):
    input: np.ndarray
    label: int


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, *input_shape) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> LabeledExample:
        return LabeledExample(self.inputs[i], int(self.labels[i]))

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


# ---------------------------------------------------------------- CIFAR-10

def parse_cifar_records(raw: bytes, source: str = "<bytes>") -> Dataset:
    """Parse concatenated 3073-byte CIFAR-10 records (label, R, G, B planes)."""
    if len(raw) % CIFAR_RECORD:
        off = len(raw) - len(raw) % CIFAR_RECORD
        raise DatasetError(f"{source}: truncated record at byte offset {off}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DatasetError(f"{source}: label byte {labels[bad[0]]} > 9 at byte offset {bad[0] * CIFAR_RECORD}")
    inputs = arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(inputs, labels, 10)


def encode_cifar_records(ds: Dataset) -> bytes:
    """Inverse of :func:`parse_cifar_records` for inputs on the k/255 grid."""
    pix = np.rint(np.asarray(ds.inputs).reshape(len(ds), -1) * 255.0)
    if pix.shape[1] != CIFAR_RECORD - 1 or pix.min(initial=0) < 0 or pix.max(initial=0) > 255:
        raise DatasetError("inputs are not 3x32x32 images in [0, 1]")
    out = np.empty((len(ds), CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = ds.labels
    out[:, 1:] = pix.astype(np.uint8)
    return out.tobytes()


def _read(path: Path) -> bytes:
    if not path.is_file():
        raise FileNotFoundError(f"missing CIFAR-10 file: {path}")
    return path.read_bytes()


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Load the five training batches and the test batch from ``directory``."""
    d = Path(directory)
    train = [parse_cifar_records(_read(d / f), str(d / f)) for f in CIFAR_TRAIN_FILES]
    test = parse_cifar_records(_read(d / CIFAR_TEST_FILE), str(d / CIFAR_TEST_FILE))
    train_ds = Dataset(np.concatenate([t.inputs for t in train]),
                       np.concatenate([t.labels for t in train]), 10)
    return train_ds, test


# ---------------------------------------------------------------- blobs

def class_directions(num_classes: int, dim: int) -> np.ndarray:
    """Fixed unit vectors: orthonormal basis vectors when C <= dim, else
    points evenly spaced on the circle in the first two coordinates."""
    u = np.zeros((num_classes, dim))
    if num_classes <= dim:
        u[np.arange(num_classes), np.arange(num_classes)] = 1.0
    else:
        if dim < 2:
            raise ValueError("need dim >= 2 when classes exceed dim")
        ang = 2 * np.pi * np.arange(num_classes) / num_classes
        u[:, 0], u[:, 1] = np.cos(ang), np.sin(ang)
    return u


def synth_blobs(num_classes: int, per_class: int, dim: int, separation: float, seed: int) -> Dataset:
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    centers = separation * class_directions(num_classes, dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    inputs = centers[labels] + rng.standard_normal((len(labels), dim))
    perm = rng.permutation(len(labels))
    return Dataset(inputs[perm], labels[perm].astype(np.int64), num_classes)


def rescale_unit_box(ds: Dataset) -> Dataset:
    """Min-max map every feature into [0, 1] (using the dataset's own range)."""
    lo, hi = ds.inputs.min(axis=0), ds.inputs.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return Dataset((ds.inputs - lo) / span, ds.labels, ds.num_classes)


# ---------------------------------------------------------------- PFDS files

def dump_pfds(ds: Dataset, path) -> None:
    """Header: b"PFDS", u32 count, u32 dim, u32 classes; records: u32 label, dim x f64 (LE)."""
    flat = np.ascontiguousarray(ds.inputs.reshape(len(ds), -1), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(PFDS_MAGIC + struct.pack("<III", len(ds), flat.shape[1], ds.num_classes))
        rec = np.zeros(len(ds), dtype=[("label", "<u4"), ("x", "<f8", (flat.shape[1],))])
        rec["label"] = ds.labels
        rec["x"] = flat
        fh.write(rec.tobytes())


def load_pfds(path, input_shape: tuple[int, ...] | None = None) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != PFDS_MAGIC or len(raw) < 16:
        raise DatasetError(f"{path}: not a PFDS file")
    count, dim, classes = struct.unpack("<III", raw[4:16])
    rec_size = 4 + 8 * dim
    if len(raw) != 16 + count * rec_size:
        raise DatasetError(f"{path}: expected {16 + count * rec_size} bytes, got {len(raw)}")
    rec = np.frombuffer(raw[16:], dtype=[("label", "<u4"), ("x", "<f8", (dim,))], count=count)
    inputs = rec["x"].astype(np.float64)
    if input_shape is not None:
        inputs = inputs.reshape((count, *input_shape))
    return Dataset(inputs, rec["label"].astype(np.int64), classes)


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.0
    aux: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.val, self.test, self.aux)
        if any(f < 0 for f in fr) or sum(fr) > 1 + 1e-12:
            raise ValueError(f"invalid split fractions {fr}")


def partition(ds: Dataset, spec: SplitSpec) -> dict[str, Dataset]:
    """Seeded disjoint split into train/val/test/aux."""
    return {k: ds.subset(idx) for k, idx in split_indices(len(ds), spec).items()}


def split_indices(n: int, spec: SplitSpec) -> dict[str, np.ndarray]:
    """Sizes are floor(fraction * N); the rounding remainder goes to train."""
    perm = np.random.default_rng(spec.seed).permutation(n)
    sizes = {k: math.floor(getattr(spec, k) * n + 1e-9) for k in ("val", "test", "aux")}
    used = math.floor(min(1.0, spec.train + spec.val + spec.test + spec.aux) * n + 1e-9)
    sizes["train"] = used - sum(sizes.values())
    out, pos = {}, 0
    for key in ("train", "val", "test", "aux"):
        out[key] = perm[pos:pos + sizes[key]]
        pos += sizes[key]
    return out


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch: a permutation of range(n) cut into chunks; the last short chunk is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def batch_iterator(split: Dataset, batch_size: int, seed) -> Iterator[Dataset]:
    rng = np.random.default_rng(seed)
    for idx in epoch_batches(len(split), batch_size, rng):
        yield split.subset(idx)


class BatchStream:
    """Endless batch source that reshuffles at each pass (used for the attacker's auxiliary draws)."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._queue: list[np.ndarray] = []

    def next(self) -> np.ndarray:
        if not self._queue:
            self._queue = epoch_batches(self.n, self.batch_size, self.rng)[::-1]
        return self._queue.pop()
