import struct

import numpy as np
import pytest

from protopipe.data import (
    DataError,
    DomainShift,
    IdxCountError,
    IdxFormatError,
    IdxTruncatedError,
    SyntheticSpec,
    apply_domain_shift,
    class_disjoint,
    generate_synthetic,
    inverse_shift,
    load_idx,
)


def test_hundred_classes_split_64_16_20():
    spec = SyntheticSpec(feature_dim=4, num_classes=100, items_per_class=3, seed=0)
    splits = generate_synthetic(spec)
    assert len(splits.train.class_index) == 64
    assert len(splits.val.class_index) == 16
    assert len(splits.test.class_index) == 20


def test_splits_are_class_disjoint():
    splits = generate_synthetic(SyntheticSpec(4, 20, 3, seed=1))
    assert class_disjoint(*splits)


def test_small_class_counts_keep_five_per_split():
    splits = generate_synthetic(SyntheticSpec(4, 15, 2, seed=0))
    assert all(len(ds.class_index) == 5 for ds in splits)


def test_too_few_classes_rejected():
    with pytest.raises(DataError, match="5-way"):
        SyntheticSpec(feature_dim=4, num_classes=14, items_per_class=3)


def test_degenerate_noise_collapses_to_means():
    spec = SyntheticSpec(8, 15, 4, class_sep=3.0, noise_sigma=1e-12, seed=2)
    splits = generate_synthetic(spec)
    for ds in splits:
        for cls, rows in ds.class_index.items():
            items = ds.items[rows]
            assert np.abs(items - items[0]).max() < 1e-9


def test_same_seed_bitwise_identical():
    spec = SyntheticSpec(6, 20, 5, seed=7)
    a = generate_synthetic(spec)
    b = generate_synthetic(spec)
    for left, right in zip(a, b):
        assert left.items.tobytes() == right.items.tobytes()
        assert left.labels.tobytes() == right.labels.tobytes()


def test_empirical_means_converge():
    # ||empirical - true mean|| ~ sigma*sqrt(D/n); the 4*sigma/sqrt(n) bound
    # needs smallish D
    spec = SyntheticSpec(8, 15, 400, class_sep=5.0, noise_sigma=0.7, seed=3)
    rng = np.random.default_rng(spec.seed)
    raw = rng.standard_normal((spec.num_classes, spec.feature_dim))
    means = spec.class_sep * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    splits = generate_synthetic(spec)
    for ds in splits:
        for cls, rows in ds.class_index.items():
            err = np.linalg.norm(ds.items[rows].mean(axis=0) - means[cls])
            assert err < 4 * spec.noise_sigma / np.sqrt(len(rows))


class TestDomainShift:
    def setup_method(self):
        self.splits = generate_synthetic(SyntheticSpec(12, 15, 6, seed=4))
        self.ds = self.splits.test

    def test_identity_permutation(self):
        shift = DomainShift(kind="feature_permutation", permutation=tuple(range(12)))
        out = apply_domain_shift(self.ds, shift)
        assert out.items.tobytes() == self.ds.items.tobytes()
        assert out.domain_name.endswith("+feature_permutation")

    def test_permutation_roundtrip(self):
        shift = DomainShift(kind="feature_permutation", seed=9)
        out = apply_domain_shift(self.ds, shift)
        back = apply_domain_shift(out, inverse_shift(shift, 12))
        assert back.items.tobytes() == self.ds.items.tobytes()

    def test_permutation_not_bijection_rejected(self):
        with pytest.raises(DataError, match="bijection"):
            apply_domain_shift(self.ds, DomainShift(kind="feature_permutation",
                                                    permutation=(0,) * 12))

    def test_rotation_is_isometry(self):
        out = apply_domain_shift(self.ds, DomainShift(kind="orthogonal_rotation", seed=5))
        rng = np.random.default_rng(0)
        for _ in range(50):
            i, j = rng.integers(0, len(self.ds.items), size=2)
            before = np.linalg.norm(self.ds.items[i] - self.ds.items[j])
            after = np.linalg.norm(out.items[i] - out.items[j])
            assert abs(before - after) <= 1e-9

    def test_labels_preserved(self):
        for kind in ("feature_permutation", "orthogonal_rotation", "sigma_rescale"):
            out = apply_domain_shift(self.ds, DomainShift(kind=kind, seed=1, factor=2.0))
            assert out.labels.tobytes() == self.ds.labels.tobytes()

    def test_rescale_roundtrip(self):
        shift = DomainShift(kind="sigma_rescale", factor=2.5)
        out = apply_domain_shift(self.ds, shift)
        back = apply_domain_shift(out, inverse_shift(shift, 12))
        np.testing.assert_allclose(back.items, self.ds.items, rtol=1e-12)


def write_idx_pair(tmp_path, images, labels):
    n, h, w = images.shape
    img_path = tmp_path / "images.idx"
    lab_path = tmp_path / "labels.idx"
    img_path.write_bytes(struct.pack(">IIII", 0x803, n, h, w) + images.tobytes())
    lab_path.write_bytes(struct.pack(">II", 0x801, len(labels)) + labels.tobytes())
    return img_path, lab_path


class TestIdxLoader:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(10, 5, 4), dtype=np.uint8)
        labels = rng.integers(0, 3, size=10, dtype=np.uint8)
        img, lab = write_idx_pair(tmp_path, images, labels)
        ds = load_idx(img, lab, split="test", domain_name="digits")
        assert ds.items.shape == (10, 1, 5, 4)
        assert ds.items.min() >= 0.0 and ds.items.max() <= 1.0
        np.testing.assert_allclose(ds.items[3, 0], images[3] / 255.0)
        np.testing.assert_array_equal(ds.labels, labels)
        assert set(ds.class_index) == set(np.unique(labels).tolist())

    def test_bad_image_magic(self, tmp_path):
        img, lab = write_idx_pair(tmp_path, np.zeros((2, 3, 3), dtype=np.uint8),
                                  np.zeros(2, dtype=np.uint8))
        blob = bytearray(img.read_bytes())
        blob[3] = 0x99
        img.write_bytes(bytes(blob))
        with pytest.raises(IdxFormatError):
            load_idx(img, lab)

    def test_count_mismatch(self, tmp_path):
        img, lab = write_idx_pair(tmp_path, np.zeros((4, 3, 3), dtype=np.uint8),
                                  np.zeros(4, dtype=np.uint8))
        blob = bytearray(lab.read_bytes())
        blob[7] = 3  # claim 3 labels against 4 images
        lab.write_bytes(bytes(blob[:8 + 3]))
        with pytest.raises(IdxCountError):
            load_idx(img, lab)

    def test_truncated_payload(self, tmp_path):
        img, lab = write_idx_pair(tmp_path, np.zeros((4, 3, 3), dtype=np.uint8),
                                  np.zeros(4, dtype=np.uint8))
        blob = img.read_bytes()
        img.write_bytes(blob[:-5])
        with pytest.raises(IdxTruncatedError):
            load_idx(img, lab)
