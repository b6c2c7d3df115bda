import numpy as np
import pytest

from advhash.codes import DISSIMILAR, SIMILAR
from advhash.data import (
    ConfigurationError,
    ImageDataset,
    SplitSpec,
    assemble_batch,
    build_pair_label,
    load_image_folder,
    load_split_manifest,
    make_synthetic_dataset,
    save_image_folder,
    save_split_manifest,
    split_semi_supervised,
    split_unseen_classes,
)


def tiny_dataset(class_ids, size=16):
    n = len(class_ids)
    rng = np.random.default_rng(0)
    images = rng.uniform(-1, 1, size=(n, 3, size, size)).astype(np.float32)
    return ImageDataset(images, class_ids)


class TestPairLabel:
    def test_same_class(self):
        ds = tiny_dataset([{3}, {3}])
        assert build_pair_label(ds[0], ds[1]) == SIMILAR

    def test_disjoint(self):
        ds = tiny_dataset([{3}, {5}])
        assert build_pair_label(ds[0], ds[1]) == DISSIMILAR

    def test_multilabel_intersection(self):
        ds = tiny_dataset([{1, 4}, {4, 9}])
        assert build_pair_label(ds[0], ds[1]) == SIMILAR

    def test_unlabeled_unknown(self):
        ds = tiny_dataset([{1}, set()])
        assert build_pair_label(ds[0], ds[1]) is None

    def test_symmetry(self):
        ds = tiny_dataset([{1, 2}, {2}, set(), {5}])
        for a in range(4):
            for b in range(4):
                assert build_pair_label(ds[a], ds[b]) == build_pair_label(ds[b], ds[a])


class TestSemiSplit:
    def make(self, n_classes=10, per_class=600):
        ids = [{c} for c in range(n_classes) for _ in range(per_class)]
        return tiny_dataset(ids)

    def test_full_labeled_counts(self):
        ds = self.make()
        split = split_semi_supervised(ds, SplitSpec(500, 100, seed=1))
        assert len(split.query) == 1000
        assert len(split.database) == 5000
        assert len(split.labeled_train) == 5000
        assert len(split.unlabeled_train) == 0

    def test_partial_labeled_counts(self):
        ds = self.make()
        split = split_semi_supervised(ds, SplitSpec(50, 100, seed=1))
        assert len(split.labeled_train) == 500
        assert len(split.unlabeled_train) == 4500

    def test_determinism(self):
        ds = self.make(4, 60)
        a = split_semi_supervised(ds, SplitSpec(20, 10, seed=9))
        b = split_semi_supervised(ds, SplitSpec(20, 10, seed=9))
        np.testing.assert_array_equal(a.query, b.query)
        np.testing.assert_array_equal(a.labeled_train, b.labeled_train)

    def test_partition_properties(self):
        ds = self.make(4, 60)
        split = split_semi_supervised(ds, SplitSpec(20, 10, seed=3))
        assert not set(split.query) & set(split.database)
        assert set(split.labeled_train) | set(split.unlabeled_train) == set(split.database)
        assert not set(split.labeled_train) & set(split.unlabeled_train)

    def test_insufficient_raises(self):
        ds = self.make(2, 30)
        with pytest.raises(ConfigurationError):
            split_semi_supervised(ds, SplitSpec(25, 10, seed=0))

    def test_hidden_labels_view(self):
        ds = self.make(2, 30)
        split = split_semi_supervised(ds, SplitSpec(5, 5, seed=0))
        view = ds.hide_labels_except(split.labeled_train)
        assert view.labeled_mask.sum() == 10
        np.testing.assert_array_equal(view.images, ds.images)


class TestUnseenSplit:
    def test_class_counts_8(self):
        ds = tiny_dataset([{c} for c in range(8) for _ in range(10)])
        split = split_unseen_classes(ds, SplitSpec(0, 0, seed=2, unseen_fraction=0.25))
        assert len(split.known_classes) == 6
        assert len(split.unseen_classes) == 2

    def test_class_counts_4(self):
        ds = tiny_dataset([{c} for c in range(4) for _ in range(10)])
        split = split_unseen_classes(ds, SplitSpec(0, 0, seed=2, unseen_fraction=0.25))
        assert len(split.known_classes) == 3
        assert len(split.unseen_classes) == 1

    def test_disjoint_and_halved(self):
        ds = tiny_dataset([{c} for c in range(8) for _ in range(10)])
        split = split_unseen_classes(ds, SplitSpec(0, 0, seed=2, unseen_fraction=0.25))
        assert not split.known_classes & split.unseen_classes
        all_idx = np.concatenate([split.train75, split.test75, split.train25, split.test25])
        assert sorted(all_idx) == list(range(80))
        assert len(split.train25) == len(split.test25) == 10
        for i in split.train75:
            assert next(iter(ds.class_ids[i])) in split.known_classes
        for i in split.test25:
            assert next(iter(ds.class_ids[i])) in split.unseen_classes

    def test_determinism(self):
        ds = tiny_dataset([{c} for c in range(8) for _ in range(6)])
        spec = SplitSpec(0, 0, seed=7, unseen_fraction=0.25)
        a = split_unseen_classes(ds, spec)
        b = split_unseen_classes(ds, spec)
        assert a.known_classes == b.known_classes
        np.testing.assert_array_equal(a.train75, b.train75)

    def test_too_few_classes(self):
        ds = tiny_dataset([{c} for c in range(3) for _ in range(6)])
        with pytest.raises(ConfigurationError):
            split_unseen_classes(ds, SplitSpec(0, 0, seed=0, unseen_fraction=0.25))


class TestSyntheticDataset:
    def test_counts(self):
        ds = make_synthetic_dataset(2, 100, 28, seed=7)
        assert len(ds) == 200
        assert ds.classes == frozenset({0, 1})

    def test_determinism_bitwise(self):
        a = make_synthetic_dataset(3, 10, 28, seed=5)
        b = make_synthetic_dataset(3, 10, 28, seed=5)
        np.testing.assert_array_equal(a.images, b.images)
        assert a.class_ids == b.class_ids

    def test_per_class_counts(self):
        ds = make_synthetic_dataset(10, 50, 32, seed=123)
        for cls in range(10):
            assert sum(1 for c in ds.class_ids if cls in c) == 50

    def test_pixel_range(self):
        ds = make_synthetic_dataset(4, 5, 16, seed=0)
        assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0

    def test_size_guard(self):
        with pytest.raises(ConfigurationError):
            make_synthetic_dataset(2, 5, 8, seed=0)


class TestAssembleBatch:
    def test_all_labeled(self):
        ds = tiny_dataset([{0}, {0}, {1}, {1}])
        batch = assemble_batch([0, 1, 2, 3], ds)
        assert batch.n_pairs == 6
        assert len(batch.unlabeled_members) == 0

    def test_mixed(self):
        ds = tiny_dataset([{0}, {0}, {1}, set()])
        batch = assemble_batch([0, 1, 2, 3], ds)
        assert batch.n_pairs == 3
        np.testing.assert_array_equal(batch.unlabeled_members, [3])

    def test_no_labeled(self):
        ds = tiny_dataset([set(), set()])
        batch = assemble_batch([0, 1], ds)
        assert batch.n_pairs == 0
        assert len(batch.unlabeled_members) == 2

    def test_labels_match_classes(self):
        ds = tiny_dataset([{0}, {0}, {1}])
        batch = assemble_batch([0, 1, 2], ds)
        got = {(int(i), int(j)): s for i, j, s in
               zip(batch.pair_i, batch.pair_j, batch.pair_labels)}
        assert got == {(0, 1): 1.0, (0, 2): 0.0, (1, 2): 0.0}


class TestPersistence:
    def test_split_manifest_roundtrip(self, tmp_path):
        ds = tiny_dataset([{c} for c in range(4) for _ in range(30)])
        spec = SplitSpec(10, 5, seed=3)
        split = split_semi_supervised(ds, spec)
        p = tmp_path / "split.json"
        save_split_manifest(p, spec, split)
        spec2, split2 = load_split_manifest(p)
        assert spec2 == spec
        np.testing.assert_array_equal(split2.query, split.query)
        np.testing.assert_array_equal(split2.unlabeled_train, split.unlabeled_train)

    def test_image_folder_roundtrip(self, tmp_path):
        ds = make_synthetic_dataset(2, 4, 16, seed=1)
        ds = ds.hide_labels_except([0, 1, 2, 4, 5, 6])  # leave some unlabeled
        save_image_folder(ds, tmp_path / "imgs")
        back = load_image_folder(tmp_path / "imgs")
        assert len(back) == len(ds)
        assert back.class_ids == ds.class_ids
        # 8-bit PNG quantization bounds the roundtrip error
        assert np.max(np.abs(back.images - ds.images)) <= 1.0 / 127.5

    def test_image_folder_bad_header(self, tmp_path):
        d = tmp_path / "bad"
        d.mkdir()
        (d / "labels.csv").write_text("file,labels\na.png,1\n")
        with pytest.raises(ConfigurationError):
            load_image_folder(d)
