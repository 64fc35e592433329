"""Core domain types and their on-disk representation.

Tensor file format (bit-exact round-trip):

    magic   4 bytes  b"ALFT"
    version 1 byte   0x01
    dtype   1 byte   0x02 = IEEE-754 binary64, little-endian
    rank    1 byte   1 or 2
    dims    rank x u32, little-endian
    payload row-major binary64 values

Banks and datasets are stored as one UTF-8 JSON manifest plus one tensor
file per array; tensor file names are recorded in the manifest relative to
it. All writes go through a temp-file-and-rename so readers never observe a
partial file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    IntegrityError,
    NumericError,
    ShapeError,
)

MAGIC = b"ALFT"
FORMAT_VERSION = 0x01
DTYPE_F64 = 0x02

MANY, MEDIUM, FEW = "many", "medium", "few"
SPLIT_NAMES = (MANY, MEDIUM, FEW)

TRAIN, VAL, TEST = "train", "val", "test"
PARTITION_CODES = {TRAIN: 0, VAL: 1, TEST: 2}

_F64_LE = np.dtype("<f8")


# ---------------------------------------------------------------------------
# Split assignment


@dataclass(frozen=True)
class SplitSpec:
    """Per-class split labels plus the train counts they were derived from.

    `base` is the union of the many and medium splits; its classifiers are
    the strong ones. N = B + F always holds by construction.
    """

    labels: tuple[str, ...]
    train_counts: tuple[int, ...]

    def __post_init__(self):
        if len(self.labels) != len(self.train_counts):
            raise IntegrityError(
                f"split labels ({len(self.labels)}) and counts "
                f"({len(self.train_counts)}) disagree"
            )
        for lab in self.labels:
            if lab not in SPLIT_NAMES:
                raise IntegrityError(f"unknown split label {lab!r}")

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    @property
    def few_ids(self) -> tuple[int, ...]:
        return tuple(i for i, lab in enumerate(self.labels) if lab == FEW)

    @property
    def base_ids(self) -> tuple[int, ...]:
        return tuple(i for i, lab in enumerate(self.labels) if lab != FEW)

    @property
    def n_few(self) -> int:
        return len(self.few_ids)

    @property
    def n_base(self) -> int:
        return len(self.base_ids)

    def ids_of(self, split_name: str) -> tuple[int, ...]:
        if split_name not in SPLIT_NAMES:
            raise ConfigError(f"unknown split name {split_name!r}")
        return tuple(i for i, lab in enumerate(self.labels) if lab == split_name)


def assign_splits(
    train_counts, many_gt: int = 100, few_lt: int = 20
) -> SplitSpec:
    """Label classes by train-set size: many > `many_gt`, few < `few_lt`,
    medium in between (inclusive). Thresholds default to the standard
    long-tailed benchmark values and may be scaled for small datasets.
    """
    counts = [int(c) for c in np.asarray(train_counts).ravel()]
    if not counts:
        raise ConfigError("assign_splits: empty class list")
    if any(c < 1 for c in counts):
        raise ConfigError(f"assign_splits: every class needs >= 1 sample, got {counts}")
    if few_lt > many_gt:
        raise ConfigError(f"assign_splits: few_lt {few_lt} exceeds many_gt {many_gt}")
    labels = []
    for c in counts:
        if c > many_gt:
            labels.append(MANY)
        elif c < few_lt:
            labels.append(FEW)
        else:
            labels.append(MEDIUM)
    return SplitSpec(labels=tuple(labels), train_counts=tuple(counts))


# ---------------------------------------------------------------------------
# Classifier banks and feature datasets


@dataclass
class ClassifierBank:
    """Per-class weight vectors and biases of a frozen linear classifier layer.

    Row j of `weights` scores class j: score = x . weights[j] + biases[j].
    """

    weights: np.ndarray
    biases: np.ndarray
    split: SplitSpec
    provenance: str = ""

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.biases = np.ascontiguousarray(self.biases, dtype=np.float64)
        n = self.split.n_classes
        if self.weights.ndim != 2 or self.weights.shape[0] != n:
            raise IntegrityError(
                f"bank weights shape {self.weights.shape} inconsistent with {n} classes"
            )
        if self.biases.shape != (n,):
            raise IntegrityError(
                f"bank biases shape {self.biases.shape} inconsistent with {n} classes"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise NumericError("bank contains non-finite entries")

    @property
    def n_classes(self) -> int:
        return self.split.n_classes

    @property
    def feature_dim(self) -> int:
        return int(self.weights.shape[1])

    def scores(self, features: np.ndarray) -> np.ndarray:
        """Score a batch: out[i, j] = features[i] . weights[j] + biases[j]."""
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.feature_dim:
            raise ShapeError(
                f"features {features.shape} incompatible with bank dim {self.feature_dim}"
            )
        return features @ self.weights.T + self.biases


#: A composed bank has the same shape as its source bank: few-class rows hold
#: the newly composed classifiers, base-class rows are copied verbatim.
ComposedBank = ClassifierBank


@dataclass
class FeatureDataset:
    """Labeled feature vectors partitioned into train/val/test.

    Raw inputs never appear here; samples enter the pipeline as the feature
    vectors a frozen backbone would produce.
    """

    features: np.ndarray
    labels: np.ndarray
    partitions: np.ndarray  # uint8 codes per PARTITION_CODES
    n_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.partitions = np.ascontiguousarray(self.partitions, dtype=np.uint8)
        n = self.features.shape[0] if self.features.ndim == 2 else -1
        if self.features.ndim != 2:
            raise IntegrityError(f"features must be 2-D, got {self.features.shape}")
        if self.labels.shape != (n,) or self.partitions.shape != (n,):
            raise IntegrityError(
                f"features {self.features.shape}, labels {self.labels.shape}, "
                f"partitions {self.partitions.shape} disagree"
            )
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise IntegrityError(
                f"labels outside [0, {self.n_classes}): "
                f"min {self.labels.min()}, max {self.labels.max()}"
            )
        if n and self.partitions.max() > 2:
            raise IntegrityError("partition codes must be 0 (train), 1 (val) or 2 (test)")
        if not np.all(np.isfinite(self.features)):
            raise NumericError("dataset features contain non-finite entries")

    @property
    def n_samples(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def indices(self, partition: str) -> np.ndarray:
        try:
            code = PARTITION_CODES[partition]
        except KeyError:
            raise ConfigError(f"unknown partition {partition!r}") from None
        return np.flatnonzero(self.partitions == code)

    def partition_arrays(self, partition: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(partition)
        return self.features[idx], self.labels[idx]

    def train_counts(self) -> np.ndarray:
        """Per-class sample counts over the train partition."""
        idx = self.indices(TRAIN)
        return np.bincount(self.labels[idx], minlength=self.n_classes)


# ---------------------------------------------------------------------------
# Tensor file I/O


def _atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, t: np.ndarray) -> None:
    """Write a 1-D or 2-D float64 array in the ALFT format (atomically)."""
    t = np.ascontiguousarray(t, dtype=_F64_LE)
    if t.ndim not in (1, 2):
        raise ShapeError(f"write_tensor: rank must be 1 or 2, got shape {t.shape}")
    header = MAGIC + bytes([FORMAT_VERSION, DTYPE_F64, t.ndim])
    header += b"".join(struct.pack("<I", d) for d in t.shape)
    _atomic_write_bytes(path, header + t.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read an ALFT tensor file; inverse of `write_tensor`, bit-exact."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError("truncated header: missing magic", len(data))
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    if len(data) < 7:
        raise FormatError("truncated header", len(data))
    if data[4] != FORMAT_VERSION:
        raise FormatError(f"unsupported version 0x{data[4]:02x}", 4)
    if data[5] != DTYPE_F64:
        raise FormatError(f"unsupported dtype 0x{data[5]:02x}", 5)
    rank = data[6]
    if rank not in (1, 2):
        raise FormatError(f"rank must be 1 or 2, got {rank}", 6)
    dims_end = 7 + 4 * rank
    if len(data) < dims_end:
        raise FormatError("truncated dimension list", len(data))
    dims = tuple(
        struct.unpack_from("<I", data, 7 + 4 * i)[0] for i in range(rank)
    )
    count = int(np.prod(dims, dtype=np.int64)) if dims else 0
    expected_end = dims_end + 8 * count
    if len(data) < expected_end:
        raise FormatError(
            f"truncated payload: expected {expected_end - dims_end} bytes", len(data)
        )
    if len(data) > expected_end:
        raise FormatError("trailing bytes after payload", expected_end)
    flat = np.frombuffer(data, dtype=_F64_LE, count=count, offset=dims_end)
    return flat.reshape(dims).astype(np.float64, copy=True)


# ---------------------------------------------------------------------------
# Manifest-based containers


def _write_manifest(path, manifest: dict) -> None:
    text = json.dumps(manifest, ensure_ascii=False, indent=2, sort_keys=True)
    _atomic_write_bytes(path, text.encode("utf-8") + b"\n")


def _read_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"manifest {path} is not valid JSON: {exc}") from exc


def _tensor_name(manifest_path: Path, key: str) -> str:
    stem = manifest_path.name
    if stem.endswith(".json"):
        stem = stem[: -len(".json")]
    return f"{stem}_{key}.alft"


def save_bank(path, bank: ClassifierBank) -> None:
    """Write a bank as `<path>` (JSON manifest) plus tensor files alongside."""
    path = Path(path)
    tensors = {"weights": bank.weights, "biases": bank.biases}
    tensor_files = {}
    for key, arr in tensors.items():
        name = _tensor_name(path, key)
        write_tensor(path.parent / name, arr)
        tensor_files[key] = name
    _write_manifest(
        path,
        {
            "n_classes": bank.n_classes,
            "feature_dim": bank.feature_dim,
            "splits": list(bank.split.labels),
            "counts": list(bank.split.train_counts),
            "provenance": bank.provenance,
            "tensor_files": tensor_files,
        },
    )


def load_bank(path) -> ClassifierBank:
    path = Path(path)
    m = _read_manifest(path)
    try:
        split = SplitSpec(labels=tuple(m["splits"]), train_counts=tuple(m["counts"]))
        weights = read_tensor(path.parent / m["tensor_files"]["weights"])
        biases = read_tensor(path.parent / m["tensor_files"]["biases"])
        n, d = int(m["n_classes"]), int(m["feature_dim"])
    except KeyError as exc:
        raise IntegrityError(f"bank manifest {path} missing field {exc}") from exc
    if split.n_classes != n:
        raise IntegrityError(f"manifest n_classes {n} vs {split.n_classes} split labels")
    if weights.shape != (n, d):
        raise IntegrityError(
            f"manifest says {n}x{d} weights but tensor has shape {weights.shape}"
        )
    if biases.shape != (n,):
        raise IntegrityError(
            f"manifest says {n} biases but tensor has shape {biases.shape}"
        )
    try:
        return ClassifierBank(
            weights=weights, biases=biases, split=split, provenance=m.get("provenance", "")
        )
    except NumericError as exc:
        raise IntegrityError(f"bank {path}: {exc}") from exc


def save_dataset(path, ds: FeatureDataset) -> None:
    """Write a dataset as `<path>` (JSON manifest) plus tensor files alongside.

    Labels and partition codes are stored as binary64 tensors; integer values
    of this size round-trip exactly.
    """
    path = Path(path)
    tensors = {
        "features": ds.features,
        "labels": ds.labels.astype(np.float64),
        "partitions": ds.partitions.astype(np.float64),
    }
    tensor_files = {}
    for key, arr in tensors.items():
        name = _tensor_name(path, key)
        write_tensor(path.parent / name, arr)
        tensor_files[key] = name
    _write_manifest(
        path,
        {
            "n_samples": ds.n_samples,
            "n_classes": ds.n_classes,
            "feature_dim": ds.feature_dim,
            "tensor_files": tensor_files,
        },
    )


def load_dataset(path) -> FeatureDataset:
    path = Path(path)
    m = _read_manifest(path)
    try:
        features = read_tensor(path.parent / m["tensor_files"]["features"])
        labels = read_tensor(path.parent / m["tensor_files"]["labels"])
        partitions = read_tensor(path.parent / m["tensor_files"]["partitions"])
        n, d, n_classes = int(m["n_samples"]), int(m["feature_dim"]), int(m["n_classes"])
    except KeyError as exc:
        raise IntegrityError(f"dataset manifest {path} missing field {exc}") from exc
    if features.shape != (n, d):
        raise IntegrityError(
            f"manifest says {n}x{d} features but tensor has shape {features.shape}"
        )
    for name, arr in (("labels", labels), ("partitions", partitions)):
        if arr.shape != (n,):
            raise IntegrityError(
                f"manifest says {n} samples but {name} tensor has shape {arr.shape}"
            )
        if not np.all(arr == np.round(arr)):
            raise IntegrityError(f"{name} tensor holds non-integer values")
    try:
        return FeatureDataset(
            features=features,
            labels=labels.astype(np.int64),
            partitions=partitions.astype(np.uint8),
            n_classes=n_classes,
        )
    except NumericError as exc:
        raise IntegrityError(f"dataset {path}: {exc}") from exc


def class_train_indices(ds: FeatureDataset, class_id: int) -> np.ndarray:
    """Train-partition sample indices of one class."""
    idx = ds.indices(TRAIN)
    return idx[ds.labels[idx] == class_id]


def require_nonempty_train(ds: FeatureDataset) -> None:
    counts = ds.train_counts()
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DataError(f"class {int(empty[0])} has no train samples")
