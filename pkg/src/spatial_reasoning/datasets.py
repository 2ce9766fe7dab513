"""Dataset ingestion for the benchmark image collections.

Every loader reads the canonical on-disk layout below ``root``:

* CIFAR-10   ``cifar-10-batches-py/{data_batch_1..5,test_batch}``
* CIFAR-100  ``cifar-100-python/{train,test}``
* STL-10     ``stl10_binary/{unlabeled_X,train_X,train_y,test_X,test_y}.bin``
* tiny-ImageNet ``tiny-imagenet-200/{wnids.txt,train/,val/}``

Images are held as ``uint8`` arrays of shape (N, H, W, 3) and only converted
to float in ``[0, 1]`` when a record is served.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import pickle
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ChecksumMismatch, ConfigurationError, IngestionError

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "SR_DATA_ROOT"


class DatasetId(str, enum.Enum):
    CIFAR10 = "cifar10"
    CIFAR100 = "cifar100"
    CIFAR100_20 = "cifar100_20"
    TINY_IMAGENET = "tiny_imagenet"
    STL10 = "stl10"
    # procedurally generated, used for smoke runs and tests only
    SYNTHETIC = "synthetic"

    @classmethod
    def parse(cls, value) -> "DatasetId":
        if isinstance(value, DatasetId):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigurationError(
                f"unknown dataset {value!r}; expected one of {[d.value for d in cls]}"
            ) from None


IMAGE_SIDE = {
    DatasetId.CIFAR10: 32,
    DatasetId.CIFAR100: 32,
    DatasetId.CIFAR100_20: 32,
    DatasetId.TINY_IMAGENET: 64,
    DatasetId.STL10: 96,
    DatasetId.SYNTHETIC: 32,
}

NUM_CLASSES = {
    DatasetId.CIFAR10: 10,
    DatasetId.CIFAR100: 100,
    DatasetId.CIFAR100_20: 20,
    DatasetId.TINY_IMAGENET: 200,
    DatasetId.STL10: 10,
    DatasetId.SYNTHETIC: 10,
}

SPLIT_SIZES = {
    DatasetId.CIFAR10: {"train": 50_000, "test": 10_000},
    DatasetId.CIFAR100: {"train": 50_000, "test": 10_000},
    DatasetId.CIFAR100_20: {"train": 50_000, "test": 10_000},
    DatasetId.TINY_IMAGENET: {"train": 100_000, "val": 10_000},
    DatasetId.STL10: {"unlabeled": 100_000, "train": 5_000, "test": 8_000},
    DatasetId.SYNTHETIC: {"train": 2_000, "test": 1_000},
}

# The split used for self-supervised pretraining of each dataset.
PRETRAIN_SPLIT = {d: "train" for d in DatasetId}
PRETRAIN_SPLIT[DatasetId.STL10] = "unlabeled"

# The split serving as probe test set. tiny-ImageNet test labels are not public.
TEST_SPLIT = {d: "test" for d in DatasetId}
TEST_SPLIT[DatasetId.TINY_IMAGENET] = "val"

_MD5 = {
    "cifar-10-batches-py/data_batch_1": "c99cafc152244af753f735de768cd75f",
    "cifar-10-batches-py/data_batch_2": "d4bba439e000b95fd0a9bffe97cbabec",
    "cifar-10-batches-py/data_batch_3": "54ebc095f3ab1f0389bbae665268c751",
    "cifar-10-batches-py/data_batch_4": "634d18415352ddfa80567beed471001a",
    "cifar-10-batches-py/data_batch_5": "482c414d41f54cd18b22e5b47cb7c3cb",
    "cifar-10-batches-py/test_batch": "40351d587109b95175f43aff81a1287e",
    "cifar-100-python/train": "16019d7e3df5f24257cddd939b257f8d",
    "cifar-100-python/test": "f0ef6b0ae62326f3e7ffdfab6717acfc",
    "stl10_binary/train_X.bin": "918c2871b30a85fa023e0c44e0bee87f",
    "stl10_binary/train_y.bin": "5a34089d4802c674881badbb80307741",
    "stl10_binary/unlabeled_X.bin": "5242ba1fed5e4be9e1e742405eb56ca4",
    "stl10_binary/test_X.bin": "7f263ba9f9e0b06b93213547f721ac82",
    "stl10_binary/test_y.bin": "36f9794fa4beb8a2c72628de14fa638e",
}

# Canonical CIFAR-100 superclass of each fine label (fine ids in alphabetical order).
CIFAR100_COARSE = np.array([
    4, 1, 14, 8, 0, 6, 7, 7, 18, 3,
    3, 14, 9, 18, 7, 11, 3, 9, 7, 11,
    6, 11, 5, 10, 7, 6, 13, 15, 3, 15,
    0, 11, 1, 10, 12, 14, 16, 9, 11, 5,
    5, 19, 8, 8, 15, 13, 14, 17, 18, 10,
    16, 4, 17, 4, 2, 0, 17, 4, 18, 17,
    10, 3, 2, 12, 12, 16, 12, 1, 9, 19,
    2, 10, 0, 1, 16, 12, 9, 13, 15, 13,
    16, 19, 2, 4, 6, 19, 5, 5, 8, 19,
    18, 1, 2, 15, 6, 0, 17, 8, 14, 13,
], dtype=np.int64)


def coarse_label_map(fine_label) -> int:
    """Map a CIFAR-100 fine label to its superclass in ``[0, 20)``."""
    fine = int(fine_label)
    if not 0 <= fine < 100:
        raise ValueError(f"CIFAR-100 fine label must lie in [0, 100), got {fine_label}")
    return int(CIFAR100_COARSE[fine])


@dataclass
class ImageRecord:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: int
    dataset_id: DatasetId


@dataclass
class ImageSet:
    """One split of a dataset held in memory (or memory-mapped)."""

    dataset_id: DatasetId
    split: str
    images: np.ndarray  # (N, H, W, 3) uint8
    labels: np.ndarray  # (N,) int64, -1 for unlabeled data
    checksums: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def side(self) -> int:
        return int(self.images.shape[1])

    def pixels(self, index) -> np.ndarray:
        return np.asarray(self.images[index], dtype=np.float32) / 255.0

    def record(self, index: int) -> ImageRecord:
        return ImageRecord(self.pixels(index), int(self.labels[index]), self.dataset_id)

    def subset(self, indices) -> "ImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        return ImageSet(self.dataset_id, self.split, np.asarray(self.images[indices]),
                        self.labels[indices], dict(self.checksums), list(self.notes))

    def iter_records(self, seed: Optional[int] = None) -> Iterator[ImageRecord]:
        """Yield every record once, in stored order or in a seeded permutation."""
        order = np.arange(len(self)) if seed is None else np.random.default_rng(seed).permutation(len(self))
        for i in order:
            yield self.record(int(i))


def _md5(path: Path, chunk=1 << 22) -> str:
    h = hashlib.md5()
    with open(path, "rb") as fh:
        while block := fh.read(chunk):
            h.update(block)
    return h.hexdigest()


def _verify(root: Path, rel: str, checksums: dict, allow_mismatch: bool):
    path = root / rel
    if not path.is_file():
        raise IngestionError("missing dataset file", path)
    digest = _md5(path)
    expected = _MD5.get(rel)
    checksums[rel] = digest
    if expected is not None and digest != expected:
        msg = f"checksum mismatch for {path}: md5 {digest}, expected {expected}"
        warnings.warn(msg)
        if not allow_mismatch:
            raise ChecksumMismatch(msg + "; set allow_checksum_mismatch to continue", path)
    return path


def _unpickle(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return pickle.load(fh, encoding="bytes")
    except Exception as exc:  # truncated or foreign file
        raise IngestionError(f"cannot read CIFAR batch: {exc}", path) from exc


def _cifar_images(flat: np.ndarray, path: Path) -> np.ndarray:
    flat = np.asarray(flat, dtype=np.uint8)
    if flat.ndim != 2 or flat.shape[1] != 3072:
        raise IngestionError(f"unexpected CIFAR array shape {flat.shape}", path)
    return flat.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).copy()


def _load_cifar10(root: Path, split: str, checksums, allow_mismatch):
    names = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    images, labels = [], []
    for name in names:
        path = _verify(root, f"cifar-10-batches-py/{name}", checksums, allow_mismatch)
        batch = _unpickle(path)
        images.append(_cifar_images(batch[b"data"], path))
        labels.append(np.asarray(batch[b"labels"], dtype=np.int64))
    return np.concatenate(images), np.concatenate(labels)


def _load_cifar100(root: Path, split: str, checksums, allow_mismatch, coarse: bool):
    path = _verify(root, f"cifar-100-python/{split}", checksums, allow_mismatch)
    batch = _unpickle(path)
    images = _cifar_images(batch[b"data"], path)
    fine = np.asarray(batch[b"fine_labels"], dtype=np.int64)
    if not coarse:
        return images, fine
    labels = CIFAR100_COARSE[fine]
    stored = batch.get(b"coarse_labels")
    if stored is not None and not np.array_equal(np.asarray(stored), labels):
        warnings.warn(f"{path}: stored coarse labels disagree with the superclass table")
    return images, labels


def _load_stl10(root: Path, split: str, checksums, allow_mismatch):
    xpath = _verify(root, f"stl10_binary/{split}_X.bin", checksums, allow_mismatch)
    raw = np.memmap(xpath, dtype=np.uint8, mode="r")
    if raw.size % (3 * 96 * 96):
        raise IngestionError("STL-10 image file size is not a multiple of 96x96x3", xpath)
    # column-major storage: (N, C, W, H)
    images = raw.reshape(-1, 3, 96, 96).transpose(0, 3, 2, 1)
    if split == "unlabeled":
        labels = np.full(len(images), -1, dtype=np.int64)
    else:
        ypath = _verify(root, f"stl10_binary/{split}_y.bin", checksums, allow_mismatch)
        labels = np.fromfile(ypath, dtype=np.uint8).astype(np.int64) - 1
        if len(labels) != len(images):
            raise IngestionError("STL-10 label/image count mismatch", ypath)
    return images, labels


def _load_tiny_imagenet(root: Path, split: str, checksums):
    from PIL import Image

    base = root / "tiny-imagenet-200"
    wnids_path = base / "wnids.txt"
    if not wnids_path.is_file():
        raise IngestionError("missing dataset file", wnids_path)
    cache = base / f".cache_{split}.npz"
    if cache.is_file():
        with np.load(cache) as z:
            return z["images"], z["labels"]
    wnids = sorted(wnids_path.read_text().split())
    index = {w: i for i, w in enumerate(wnids)}
    files = []
    if split == "train":
        for w in wnids:
            files += [(p, index[w]) for p in sorted((base / "train" / w / "images").glob("*.JPEG"))]
    elif split == "val":
        ann = base / "val" / "val_annotations.txt"
        if not ann.is_file():
            raise IngestionError("missing dataset file", ann)
        for line in ann.read_text().splitlines():
            parts = line.split("\t")
            files.append((base / "val" / "images" / parts[0], index[parts[1]]))
    else:
        raise ConfigurationError(f"tiny-ImageNet split {split!r} unsupported; use train or val")
    images = np.empty((len(files), 64, 64, 3), dtype=np.uint8)
    for i, (p, _) in enumerate(files):
        try:
            with Image.open(p) as im:
                images[i] = np.asarray(im.convert("RGB"))
        except Exception as exc:
            raise IngestionError(f"cannot decode image: {exc}", p) from exc
    labels = np.array([lab for _, lab in files], dtype=np.int64)
    checksums["tiny-imagenet-200/wnids.txt"] = _md5(wnids_path)
    np.savez(cache, images=images, labels=labels)
    return images, labels


def make_synthetic(n: int, seed: int, side: int = 32, num_classes: int = 10):
    """Procedural images whose class is defined by the spatial layout of two parts.

    Each class fixes two part colours and the direction from the first part to
    the second; absolute placement, part size, background and noise vary per
    image.
    """
    rng = np.random.default_rng(seed)
    class_rng = np.random.default_rng(12345)
    palette = class_rng.uniform(0.1, 0.95, size=(num_classes, 2, 3))
    angles = np.linspace(0, 2 * np.pi, num_classes, endpoint=False)
    labels = rng.integers(0, num_classes, size=n)
    images = np.empty((n, side, side, 3), dtype=np.uint8)
    yy, xx = np.mgrid[0:side, 0:side]
    for i, c in enumerate(labels):
        bg = rng.uniform(0.0, 0.4, size=3)
        img = np.broadcast_to(bg, (side, side, 3)).copy()
        img += rng.normal(0, 0.04, size=img.shape)
        r = rng.uniform(0.12, 0.18) * side
        dist = rng.uniform(0.3, 0.4) * side
        cx = rng.uniform(r, side - r)
        cy = rng.uniform(r, side - r)
        dx, dy = dist * np.cos(angles[c]), dist * np.sin(angles[c])
        # keep both parts inside the canvas
        cx = float(np.clip(cx, r - min(dx, 0), side - r - max(dx, 0)))
        cy = float(np.clip(cy, r - min(dy, 0), side - r - max(dy, 0)))
        for part, (px, py) in enumerate([(cx, cy), (cx + dx, cy + dy)]):
            mask = (xx - px) ** 2 + (yy - py) ** 2 <= r * r
            img[mask] = palette[c, part] + rng.normal(0, 0.03, size=3)
        images[i] = np.clip(img * 255.0 + 0.5, 0, 255).astype(np.uint8)
    return images, labels.astype(np.int64)


def load_split(dataset_id, root=None, split: str = "train", *, verify_counts: bool = True,
               allow_checksum_mismatch: bool = False) -> ImageSet:
    """Load one split of a dataset into an :class:`ImageSet`.

    Args:
        dataset_id: a :class:`DatasetId` or its string value.
        root: directory holding the extracted archives; defaults to ``$SR_DATA_ROOT``.
        split: split name, see ``SPLIT_SIZES``. ``"test"`` on tiny-ImageNet is
            served by the labelled validation split.
        verify_counts: raise if the record count differs from the canonical size.
        allow_checksum_mismatch: downgrade md5 mismatches to warnings.
    """
    dataset_id = DatasetId.parse(dataset_id)
    notes = []
    if dataset_id is DatasetId.TINY_IMAGENET and split == "test":
        split = "val"
        notes.append("tiny-ImageNet probe test set served by the validation split")
    if split not in SPLIT_SIZES[dataset_id]:
        raise ConfigurationError(
            f"{dataset_id.value} has no split {split!r}; choose from {sorted(SPLIT_SIZES[dataset_id])}")
    checksums: dict = {}
    if dataset_id is DatasetId.SYNTHETIC:
        seed = 0 if split == "train" else 1
        images, labels = make_synthetic(SPLIT_SIZES[dataset_id][split], seed=seed)
    else:
        root = resolve_root(root)
        if dataset_id is DatasetId.CIFAR10:
            images, labels = _load_cifar10(root, split, checksums, allow_checksum_mismatch)
        elif dataset_id in (DatasetId.CIFAR100, DatasetId.CIFAR100_20):
            images, labels = _load_cifar100(root, split, checksums, allow_checksum_mismatch,
                                            coarse=dataset_id is DatasetId.CIFAR100_20)
        elif dataset_id is DatasetId.STL10:
            images, labels = _load_stl10(root, split, checksums, allow_checksum_mismatch)
        else:
            images, labels = _load_tiny_imagenet(root, split, checksums)
    side = IMAGE_SIDE[dataset_id]
    if images.shape[1:] != (side, side, 3):
        raise IngestionError(f"{dataset_id.value}/{split}: image shape {images.shape[1:]} != {(side, side, 3)}")
    expected = SPLIT_SIZES[dataset_id][split]
    if verify_counts and len(labels) != expected:
        raise IngestionError(f"{dataset_id.value}/{split}: {len(labels)} records, expected {expected}")
    labelled = labels[labels >= 0]
    if labelled.size and (labelled.min() < 0 or labelled.max() >= NUM_CLASSES[dataset_id]):
        raise IngestionError(f"{dataset_id.value}/{split}: label outside [0, {NUM_CLASSES[dataset_id]})")
    return ImageSet(dataset_id, split, images, labels, checksums, notes)


def load_dataset(dataset_id, root=None, split: str = "train", seed: Optional[int] = None,
                 **kwargs) -> Iterator[ImageRecord]:
    """Stream the records of a split, each exactly once."""
    yield from load_split(dataset_id, root, split, **kwargs).iter_records(seed)


def resolve_root(root=None) -> Path:
    root = root if root is not None else os.environ.get(DATA_ROOT_ENV)
    if root is None:
        raise IngestionError(f"no dataset root given and ${DATA_ROOT_ENV} is unset")
    return Path(root)


def channel_stats(images: np.ndarray, chunk: int = 10_000):
    """Per-channel mean and standard deviation of uint8 images, in [0, 1] units."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for start in range(0, len(images), chunk):
        block = np.asarray(images[start:start + chunk], dtype=np.float64) / 255.0
        total += block.sum(axis=(0, 1, 2))
        total_sq += (block ** 2).sum(axis=(0, 1, 2))
        count += block.shape[0] * block.shape[1] * block.shape[2]
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean ** 2, 1e-12))
    return mean.astype(np.float32), std.astype(np.float32)


class SplitRole(str, enum.Enum):
    PRETRAIN = "pretrain"
    PROBE_TRAIN = "probe_train"
    PROBE_TEST = "probe_test"


@dataclass(frozen=True)
class SplitSpec:
    """Selects records of a dataset split: all, a seeded random fraction, a seeded
    random count, or an explicit index list."""

    dataset: DatasetId
    split: str
    role: SplitRole
    fraction: Optional[float] = None
    limit: Optional[int] = None
    indices: Optional[tuple] = None
    seed: int = 0

    def resolve(self, n_total: int) -> np.ndarray:
        if self.indices is not None:
            idx = np.asarray(self.indices, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= n_total):
                raise ConfigurationError("split indices out of range")
            return idx
        if self.fraction is None and self.limit is None:
            return np.arange(n_total)
        count = n_total if self.limit is None else min(int(self.limit), n_total)
        if self.fraction is not None:
            count = min(count, int(round(self.fraction * n_total)))
        perm = np.random.default_rng(self.seed).permutation(n_total)
        return np.sort(perm[:count])

    def load(self, root=None, **kwargs) -> ImageSet:
        data = load_split(self.dataset, root, self.split, **kwargs)
        idx = self.resolve(len(data))
        return data if len(idx) == len(data) and self.indices is None else data.subset(idx)


@dataclass(frozen=True)
class EvalTaskSpec:
    name: str
    pretrain: SplitSpec
    probe_train: SplitSpec
    probe_test: SplitSpec

    @property
    def num_classes(self) -> int:
        return NUM_CLASSES[self.probe_train.dataset]

    def with_limits(self, pretrain_limit=None, probe_train_limit=None, probe_test_limit=None,
                    seed: int = 0) -> "EvalTaskSpec":
        return replace(
            self,
            pretrain=replace(self.pretrain, limit=pretrain_limit, seed=seed),
            probe_train=replace(self.probe_train, limit=probe_train_limit, seed=seed + 1),
            probe_test=replace(self.probe_test, limit=probe_test_limit, seed=seed + 2),
        )


def cross_domain_task(train_ds, test_ds) -> EvalTaskSpec:
    """Pretrain on ``train_ds``; fit and test the linear probe on ``test_ds``."""
    train_ds, test_ds = DatasetId.parse(train_ds), DatasetId.parse(test_ds)
    if IMAGE_SIDE[train_ds] != IMAGE_SIDE[test_ds]:
        raise ConfigurationError(
            f"geometry mismatch: {train_ds.value} is {IMAGE_SIDE[train_ds]}px, "
            f"{test_ds.value} is {IMAGE_SIDE[test_ds]}px")
    name = train_ds.value if train_ds is test_ds else f"{train_ds.value}_to_{test_ds.value}"
    return EvalTaskSpec(
        name=name,
        pretrain=SplitSpec(train_ds, PRETRAIN_SPLIT[train_ds], SplitRole.PRETRAIN),
        probe_train=SplitSpec(test_ds, "train", SplitRole.PROBE_TRAIN),
        probe_test=SplitSpec(test_ds, TEST_SPLIT[test_ds], SplitRole.PROBE_TEST),
    )


_TASK_ALIASES = {
    "cifar10_to_cifar100": ("cifar10", "cifar100"),
    "10->100": ("cifar10", "cifar100"),
    "cifar100_to_cifar10": ("cifar100", "cifar10"),
    "100->10": ("cifar100", "cifar10"),
}


def task_by_name(name: str) -> EvalTaskSpec:
    if name in _TASK_ALIASES:
        return cross_domain_task(*_TASK_ALIASES[name])
    # CIFAR-100-20 pretrains on the CIFAR-100 images; only the probe labels differ
    ds = DatasetId.parse(name)
    return cross_domain_task(ds, ds)


def ingestion_manifest(dataset_id, root=None, splits: Optional[Sequence[str]] = None,
                       **kwargs) -> dict:
    """Counts, checksums and normalisation statistics for a dataset."""
    dataset_id = DatasetId.parse(dataset_id)
    splits = list(splits or SPLIT_SIZES[dataset_id])
    out = {"dataset": dataset_id.value, "splits": {}, "checksums": {}, "notes": []}
    for split in splits:
        data = load_split(dataset_id, root, split, **kwargs)
        out["splits"][split] = {"count": len(data), "side": data.side}
        out["checksums"].update(data.checksums)
        out["notes"] += data.notes
        if split == PRETRAIN_SPLIT[dataset_id]:
            mean, std = channel_stats(data.images)
            out["normalization"] = {"mean": mean.tolist(), "std": std.tolist(), "split": split}
    if dataset_id is DatasetId.TINY_IMAGENET:
        out["notes"].append("probe test split: val (test labels are not published)")
    return out


def write_ingestion_manifest(path, dataset_id, root=None, **kwargs) -> dict:
    manifest = ingestion_manifest(dataset_id, root, **kwargs)
    Path(path).write_text(json.dumps(manifest, indent=2))
    return manifest
