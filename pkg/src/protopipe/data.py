"""Datasets: synthetic multi-domain generator, domain shifts, IDX loader.

Synthetic domains place class means uniformly on a sphere of radius
`class_sep` and add isotropic Gaussian noise, which makes difficulty a
single knob (class_sep / noise_sigma). Splits are class-disjoint in the
usual 64:16:20 ratio so episode protocols transfer unchanged.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    """Dataset construction or parsing failed."""


class IdxFormatError(DataError):
    pass


class IdxCountError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


@dataclass
class Dataset:
    """Immutable after construction; labels are global class ids."""

    domain_name: str
    items: np.ndarray          # [n, ...] float64, pixels scaled to [0,1]
    labels: np.ndarray         # [n] int64
    split: str                 # train | val | test
    class_index: dict = field(default_factory=dict)

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.items) != len(self.labels):
            raise DataError(
                f"{len(self.items)} items vs {len(self.labels)} labels in {self.domain_name}"
            )
        if not self.class_index:
            self.class_index = {
                int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)
            }

    @property
    def item_shape(self):
        return self.items.shape[1:]

    def classes(self):
        return sorted(self.class_index)


@dataclass(frozen=True)
class SplitDatasets:
    train: Dataset
    val: Dataset
    test: Dataset

    def __iter__(self):
        return iter((self.train, self.val, self.test))


@dataclass(frozen=True)
class SyntheticSpec:
    feature_dim: int
    num_classes: int
    items_per_class: int
    class_sep: float = 8.0
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.class_sep <= 0 or self.noise_sigma <= 0:
            raise DataError("class_sep and noise_sigma must be positive")
        if self.num_classes < 15:
            raise DataError(
                f"need at least 15 classes to form 5-way episodes in every split, "
                f"got {self.num_classes}"
            )
        if self.feature_dim < 1 or self.items_per_class < 1:
            raise DataError("feature_dim and items_per_class must be positive")


def _split_sizes(num_classes: int):
    """64:16:20 over classes, each split floored at 5 (5-way episodes)."""
    n_train = round(0.64 * num_classes)
    n_val = round(0.16 * num_classes)
    n_test = num_classes - n_train - n_val
    for bump in ("val", "test"):
        current = n_val if bump == "val" else n_test
        if current < 5:
            n_train -= 5 - current
            if bump == "val":
                n_val = 5
            else:
                n_test = 5
    return n_train, n_val, n_test


def generate_synthetic(spec: SyntheticSpec, domain_name: str = "synthetic") -> SplitDatasets:
    """Deterministic per seed: same spec twice gives bitwise-equal datasets."""
    rng = np.random.default_rng(spec.seed)
    d, c = spec.feature_dim, spec.num_classes
    raw = rng.standard_normal((c, d))
    means = spec.class_sep * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    items = np.empty((c * spec.items_per_class, d))
    labels = np.empty(c * spec.items_per_class, dtype=np.int64)
    for k in range(c):
        lo = k * spec.items_per_class
        hi = lo + spec.items_per_class
        items[lo:hi] = means[k] + spec.noise_sigma * rng.standard_normal(
            (spec.items_per_class, d)
        )
        labels[lo:hi] = k
    n_train, n_val, _ = _split_sizes(c)
    boundaries = {
        "train": range(0, n_train),
        "val": range(n_train, n_train + n_val),
        "test": range(n_train + n_val, c),
    }
    parts = {}
    for split, class_range in boundaries.items():
        mask = np.isin(labels, list(class_range))
        parts[split] = Dataset(
            domain_name=domain_name,
            items=items[mask].copy(),
            labels=labels[mask].copy(),
            split=split,
        )
    return SplitDatasets(**parts)


@dataclass(frozen=True)
class DomainShift:
    """Label-preserving transform applied to every item of a dataset."""

    kind: str                          # feature_permutation | orthogonal_rotation | sigma_rescale
    seed: int = 0
    factor: float = 1.0                # sigma_rescale only
    permutation: tuple | None = None   # explicit override for feature_permutation

    def __post_init__(self):
        if self.kind not in ("feature_permutation", "orthogonal_rotation", "sigma_rescale"):
            raise DataError(f"unknown domain shift kind {self.kind!r}")
        if self.kind == "sigma_rescale" and self.factor == 0:
            raise DataError("sigma_rescale factor must be nonzero (shift must stay invertible)")


def _rotation_matrix(d: int, seed: int) -> np.ndarray:
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))
    q *= np.sign(np.diag(r))  # fix the QR sign ambiguity so the draw is canonical
    return q


def apply_domain_shift(dataset: Dataset, shift: DomainShift) -> Dataset:
    if shift.kind != "sigma_rescale" and len(dataset.item_shape) != 1:
        raise DataError(
            f"{shift.kind} needs vector items, got item shape {dataset.item_shape}"
        )
    items = dataset.items
    if shift.kind == "feature_permutation":
        d = dataset.item_shape[0]
        if shift.permutation is not None:
            perm = np.asarray(shift.permutation, dtype=np.int64)
            if sorted(perm.tolist()) != list(range(d)):
                raise DataError(f"permutation is not a bijection on {d} coordinates")
        else:
            perm = np.random.default_rng(shift.seed).permutation(d)
        shifted = items[:, perm]
    elif shift.kind == "orthogonal_rotation":
        d = dataset.item_shape[0]
        shifted = items @ _rotation_matrix(d, shift.seed).T
    else:
        shifted = items * shift.factor
    return Dataset(
        domain_name=f"{dataset.domain_name}+{shift.kind}",
        items=shifted,
        labels=dataset.labels.copy(),
        split=dataset.split,
    )


def inverse_shift(shift: DomainShift, feature_dim: int) -> DomainShift:
    """The shift undoing `shift`; defined for permutation and rescale."""
    if shift.kind == "feature_permutation":
        perm = (
            np.asarray(shift.permutation, dtype=np.int64)
            if shift.permutation is not None
            else np.random.default_rng(shift.seed).permutation(feature_dim)
        )
        return DomainShift(kind=shift.kind, permutation=tuple(np.argsort(perm).tolist()))
    if shift.kind == "sigma_rescale":
        return DomainShift(kind=shift.kind, factor=1.0 / shift.factor)
    raise DataError(f"no explicit inverse implemented for {shift.kind}")


IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def _read_exact(fh, n, path):
    chunk = fh.read(n)
    if len(chunk) != n:
        raise IdxTruncatedError(f"{path}: expected {n} more bytes, got {len(chunk)}")
    return chunk


def load_idx(images_path, labels_path, split: str = "train",
             domain_name: str = "idx") -> Dataset:
    """Parse big-endian IDX image/label pairs; pixels scaled to [0,1]."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(f"{images_path}: bad image magic {magic:#010x}")
        pixels = np.frombuffer(
            _read_exact(fh, count * rows * cols, images_path), dtype=np.uint8
        )
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, labels_path))
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(f"{labels_path}: bad label magic {magic:#010x}")
        if label_count != count:
            raise IdxCountError(
                f"{count} images in {images_path} vs {label_count} labels in {labels_path}"
            )
        labels = np.frombuffer(_read_exact(fh, label_count, labels_path), dtype=np.uint8)
    items = pixels.astype(np.float64).reshape(count, 1, rows, cols) / 255.0
    return Dataset(domain_name=domain_name, items=items,
                   labels=labels.astype(np.int64), split=split)


def class_disjoint(*datasets) -> bool:
    seen = set()
    for ds in datasets:
        classes = set(ds.class_index)
        if seen & classes:
            return False
        seen |= classes
    return True
