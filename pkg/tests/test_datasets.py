import json
import pickle

import numpy as np
import pytest
from PIL import Image

from spatial_reasoning import datasets
from spatial_reasoning.datasets import (CIFAR100_COARSE, DatasetId, SplitRole, SplitSpec, coarse_label_map,
                                        cross_domain_task, ingestion_manifest, load_dataset, load_split,
                                        task_by_name)
from spatial_reasoning.errors import ChecksumMismatch, ConfigurationError, IngestionError


def _write_cifar(path, images, labels, key=b"labels", extra=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = images.transpose(0, 3, 1, 2).reshape(len(images), -1)
    payload = {b"data": flat, key: list(labels)}
    payload.update(extra or {})
    with open(path, "wb") as fh:
        pickle.dump(payload, fh)


def _images(n, side, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (n, side, side, 3), dtype=np.uint8)


@pytest.fixture
def cifar10_root(tmp_path):
    base = tmp_path / "cifar-10-batches-py"
    for i in range(1, 6):
        _write_cifar(base / f"data_batch_{i}", _images(4, 32, i), np.arange(4) + i)
    _write_cifar(base / "test_batch", _images(3, 32, 9), [0, 1, 2])
    return tmp_path


class TestCifar:
    def test_reads_canonical_layout(self, cifar10_root):
        imgs = _images(4, 32, 1)
        with pytest.warns(UserWarning, match="checksum"):
            data = load_split("cifar10", cifar10_root, "train", verify_counts=False, allow_checksum_mismatch=True)
        assert len(data) == 20 and data.images.dtype == np.uint8
        assert np.array_equal(data.images[:4], imgs)
        assert data.labels[:4].tolist() == [1, 2, 3, 4]
        assert set(data.checksums) == {f"cifar-10-batches-py/data_batch_{i}" for i in range(1, 6)}

    def test_checksum_mismatch_is_fatal_by_default(self, cifar10_root):
        with pytest.warns(UserWarning), pytest.raises(ChecksumMismatch):
            load_split("cifar10", cifar10_root, "test", verify_counts=False)

    def test_count_verification(self, cifar10_root, monkeypatch):
        monkeypatch.setattr(datasets, "_MD5", {})
        with pytest.raises(IngestionError, match="expected 10000"):
            load_split("cifar10", cifar10_root, "test")

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(IngestionError, match="test_batch"):
            load_split("cifar10", tmp_path, "test")

    def test_truncated_file(self, cifar10_root, monkeypatch):
        monkeypatch.setattr(datasets, "_MD5", {})
        path = cifar10_root / "cifar-10-batches-py" / "test_batch"
        path.write_bytes(path.read_bytes()[:50])
        with pytest.raises(IngestionError) as info:
            load_split("cifar10", cifar10_root, "test", verify_counts=False)
        assert info.value.path == path

    def test_cifar100_coarse_labels(self, tmp_path, monkeypatch):
        monkeypatch.setattr(datasets, "_MD5", {})
        fine = np.array([0, 1, 99, 50])
        _write_cifar(tmp_path / "cifar-100-python" / "test", _images(4, 32), fine, key=b"fine_labels",
                     extra={b"coarse_labels": CIFAR100_COARSE[fine].tolist()})
        fine_set = load_split("cifar100", tmp_path, "test", verify_counts=False)
        coarse_set = load_split("cifar100_20", tmp_path, "test", verify_counts=False)
        assert fine_set.labels.tolist() == fine.tolist()
        assert coarse_set.labels.tolist() == [coarse_label_map(f) for f in fine]
        assert np.array_equal(fine_set.images, coarse_set.images)

    def test_root_from_environment(self, cifar10_root, monkeypatch):
        monkeypatch.setattr(datasets, "_MD5", {})
        monkeypatch.setenv("SR_DATA_ROOT", str(cifar10_root))
        assert len(load_split("cifar10", split="test", verify_counts=False)) == 3


class TestCoarseMap:
    def test_five_fine_classes_per_superclass(self):
        assert np.bincount([coarse_label_map(f) for f in range(100)]).tolist() == [5] * 20

    def test_known_entries(self):
        # apple -> fruit_and_vegetables, aquarium_fish -> fish, baby -> people
        assert (coarse_label_map(0), coarse_label_map(1), coarse_label_map(2)) == (4, 1, 14)

    @pytest.mark.parametrize("bad", [-1, 100])
    def test_out_of_range(self, bad):
        with pytest.raises(ValueError):
            coarse_label_map(bad)


class TestStl10:
    def test_column_major_decoding(self, tmp_path, monkeypatch):
        monkeypatch.setattr(datasets, "_MD5", {})
        imgs = _images(2, 96)
        base = tmp_path / "stl10_binary"
        base.mkdir()
        imgs.transpose(0, 3, 2, 1).tofile(base / "test_X.bin")
        np.array([1, 10], np.uint8).tofile(base / "test_y.bin")
        imgs.transpose(0, 3, 2, 1).tofile(base / "unlabeled_X.bin")
        data = load_split("stl10", tmp_path, "test", verify_counts=False)
        assert np.array_equal(np.asarray(data.images), imgs)
        assert data.labels.tolist() == [0, 9]
        assert load_split("stl10", tmp_path, "unlabeled", verify_counts=False).labels.tolist() == [-1, -1]


class TestTinyImageNet:
    def _tree(self, root):
        base = root / "tiny-imagenet-200"
        wnids = ["n02", "n01"]
        (base).mkdir(parents=True)
        (base / "wnids.txt").write_text("\n".join(wnids))
        imgs = _images(3, 64)
        for w, img in zip(wnids, imgs):
            d = base / "train" / w / "images"
            d.mkdir(parents=True)
            Image.fromarray(img).save(d / f"{w}_0.JPEG", quality=100)
        (base / "val" / "images").mkdir(parents=True)
        Image.fromarray(imgs[2]).save(base / "val" / "images" / "val_0.JPEG", quality=100)
        (base / "val" / "val_annotations.txt").write_text("val_0.JPEG\tn02\t0\t0\t64\t64\n")
        return imgs

    def test_sorted_wnids_and_val_as_test(self, tmp_path):
        self._tree(tmp_path)
        train = load_split("tiny_imagenet", tmp_path, "train", verify_counts=False)
        assert train.labels.tolist() == [0, 1]  # n01 first
        test = load_split("tiny_imagenet", tmp_path, "test", verify_counts=False)
        assert test.split == "val" and test.labels.tolist() == [1]
        assert any("validation" in n for n in test.notes)
        assert (tmp_path / "tiny-imagenet-200" / ".cache_train.npz").exists()
        again = load_split("tiny_imagenet", tmp_path, "train", verify_counts=False)
        assert np.array_equal(again.images, train.images)


class TestSynthetic:
    def test_deterministic_and_balanced_shapes(self):
        a = load_split("synthetic", split="train")
        b = load_split("synthetic", split="train")
        assert np.array_equal(a.images, b.images) and a.images.shape == (2000, 32, 32, 3)
        assert set(a.labels.tolist()) == set(range(10))

    def test_stream_yields_each_record_once(self):
        records = list(load_dataset("synthetic", split="test", seed=3))
        assert len(records) == 1000
        assert records[0].pixels.dtype == np.float32 and records[0].pixels.max() <= 1.0


class TestSplits:
    def test_limit_is_seeded_and_sorted(self):
        spec = SplitSpec(DatasetId.CIFAR10, "train", SplitRole.PRETRAIN, limit=5000, seed=0)
        a, b = spec.resolve(50_000), spec.resolve(50_000)
        assert np.array_equal(a, b) and len(a) == 5000 and np.all(np.diff(a) > 0)
        other = SplitSpec(DatasetId.CIFAR10, "train", SplitRole.PRETRAIN, limit=5000, seed=1).resolve(50_000)
        assert not np.array_equal(a, other)

    def test_probe_splits_disjoint(self):
        task = task_by_name("synthetic")
        train = task.probe_train.load()
        test = task.probe_test.load()
        train_keys = {img.tobytes() for img in train.images}
        assert not any(img.tobytes() in train_keys for img in test.images)

    def test_cross_domain(self):
        task = task_by_name("10->100")
        assert task.name == "cifar10_to_cifar100"
        assert task.pretrain.dataset is DatasetId.CIFAR10 and task.probe_test.dataset is DatasetId.CIFAR100
        assert task.num_classes == 100
        assert task_by_name("tiny_imagenet").probe_test.split == "val"
        assert task_by_name("stl10").pretrain.split == "unlabeled"

    def test_geometry_mismatch(self):
        with pytest.raises(ConfigurationError, match="geometry"):
            cross_domain_task("cifar10", "stl10")

    def test_unknown_dataset(self):
        with pytest.raises(ConfigurationError):
            task_by_name("imagenet")

    def test_ingestion_manifest(self, tmp_path):
        out = ingestion_manifest("synthetic")
        assert out["splits"]["train"]["count"] == 2000
        assert len(out["normalization"]["mean"]) == 3
        json.dumps(out)
