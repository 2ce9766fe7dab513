"""Self-supervised pretraining with the spatial reasoning objective."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import yaml

from . import patching
from .aggregation import (PairKind, aggregate, build_provenance, representation_count,
                          total_pair_count)
from .datasets import IMAGE_SIDE, PRETRAIN_SPLIT, DatasetId, ImageSet, SplitRole, SplitSpec, channel_stats, load_split
from .errors import ConfigurationError, TrainingAborted
from .model import (Architecture, Checkpoint, EncoderConfig, build_model, load_checkpoint, loss,
                    save_checkpoint)
from .patching import AugmentConfig, PatchMode

log = logging.getLogger(__name__)

# Keys that change where or how fast a run executes but not what it computes.
OPERATIONAL_KEYS = ("output_dir", "resume_from", "checkpoint_every", "num_workers", "device", "data_root",
                    "allow_checksum_mismatch")


@dataclass
class RunConfig:
    dataset: str = "cifar10"
    architecture: Optional[str] = None  # default: resnet34 for STL-10, resnet32_cifar otherwise
    M: int = 64  # gives 960 pairs at K=4, N=3
    K: int = 4
    N: int = 2
    patch_size_px: int = 13
    patch_mode: str = "rescaled"
    epochs: int = 200
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    schedule: str = "constant"
    seed: int = 0
    pretrain_limit: Optional[int] = None
    relation_hidden: int = 256
    rejection_max_attempts: int = 100
    crop_scale_min: float = 0.08
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2
    output_dir: str = "runs/default"
    checkpoint_every: int = 1
    resume_from: Optional[str] = None
    num_workers: int = 0
    device: str = "auto"
    data_root: Optional[str] = None
    allow_checksum_mismatch: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        ds = DatasetId.parse(self.dataset)
        if self.K < 2:
            raise ConfigurationError(f"K={self.K}: at least two augmentations per image are required")
        if self.M < 2:
            raise ConfigurationError(f"M={self.M}: negatives wrap to the next image, so M must be >= 2")
        if self.N < 0:
            raise ConfigurationError(f"N={self.N} must be >= 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        PatchMode(self.patch_mode)
        Architecture(self.resolved_architecture)
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        side = IMAGE_SIDE[ds]
        if self.N >= 1 and not 1 <= self.patch_size_px < side:
            raise ConfigurationError(f"patch_size_px={self.patch_size_px} must lie in [1, {side})")
        if self.N >= 2 and 2 * self.patch_size_px > side:
            raise ConfigurationError(
                f"patch_size_px={self.patch_size_px} leaves no non-overlapping placement on a "
                f"{side}px image; maximum feasible size is {patching.max_feasible_patch_size(side)}px")

    @property
    def resolved_architecture(self) -> str:
        if self.architecture:
            return self.architecture
        return "resnet34" if DatasetId.parse(self.dataset) is DatasetId.STL10 else "resnet32_cifar"

    @property
    def image_side(self) -> int:
        return IMAGE_SIDE[DatasetId.parse(self.dataset)]

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(crop_scale=(self.crop_scale_min, 1.0), flip_p=self.flip_p, jitter_p=self.jitter_p,
                             brightness=self.brightness, contrast=self.contrast, saturation=self.saturation,
                             hue=self.hue, grayscale_p=self.grayscale_p)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Stable digest of every field that influences the computation."""
        content = {k: v for k, v in self.to_dict().items() if k not in OPERATIONAL_KEYS}
        content["architecture"] = self.resolved_architecture
        return hashlib.sha256(json.dumps(content, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown run config keys: {unknown}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: config must be a flat mapping")
        return cls.from_dict(data)


@dataclass
class ViewBatch:
    views: torch.Tensor  # (P, 3, S, S) in [0, 1]
    provenance: list
    M: int
    K: int
    N: int
    image_ids: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.views.shape[0]


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    global_step: int
    l_bce: float
    l_mse_x: float
    l_mse_y: float
    l_total: float
    pairs: dict
    n_pairs: int
    wall_clock: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


def build_training_batch(images, config: RunConfig, rng: np.random.Generator) -> ViewBatch:
    """Assemble ``K*M`` augmented views followed by ``M*N`` patch views.

    ``images`` is a sequence of ``M`` (H, W, 3) arrays in ``[0, 1]``.
    """
    M, K, N = len(images), config.K, config.N
    side = config.image_side
    aug = config.augment_config()
    tensors = [patching.as_tensor(im) for im in images]
    views = [patching.full_image_augment(tensors[m], rng, aug, side) for k in range(K) for m in range(M)]
    specs = []
    if N > 0:
        mode = PatchMode(config.patch_mode)
        for m in range(M):
            image_specs = patching.sample_patch_positions(side, N, config.patch_size_px, rng, image_index=m,
                                                          max_attempts=config.rejection_max_attempts)
            specs.append(image_specs)
            views += [patching.extract_patch_view(tensors[m], s, mode, rng, aug, side).pixels for s in image_specs]
    provenance = build_provenance(M, K, N, specs if N > 0 else None)
    assert len(views) == representation_count(M, K, N)
    return ViewBatch(torch.stack(views), provenance, M, K, N)


class _BatchAssembler(torch.utils.data.Dataset):
    """Map-style dataset over the steps of one epoch; each item is a whole ViewBatch.

    Step ``s`` always uses generator ``[seed, epoch, s]``, so the stream is
    identical for any number of loader workers.
    """

    def __init__(self, data: ImageSet, order: np.ndarray, config: RunConfig, epoch: int):
        self.data, self.order, self.config, self.epoch = data, order, config, epoch
        self.steps = len(order) // config.M

    def __len__(self):
        return self.steps

    def __getitem__(self, step):
        M = self.config.M
        idx = self.order[step * M:(step + 1) * M]
        rng = np.random.default_rng([self.config.seed, self.epoch, step])
        batch = build_training_batch([self.data.pixels(int(i)) for i in idx], self.config, rng)
        batch.image_ids = idx
        return batch


def _identity(x):
    return x


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def _make_optimizer(config: RunConfig, params):
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    return torch.optim.SGD(params, lr=config.lr, momentum=0.9, weight_decay=config.weight_decay)


def _lr_at(config: RunConfig, epoch: int) -> float:
    if config.schedule == "cosine":
        return 0.5 * config.lr * (1 + math.cos(math.pi * epoch / config.epochs))
    return config.lr


def load_pretrain_data(config: RunConfig):
    """Pretraining images plus normalisation statistics of the full pretraining split."""
    ds = DatasetId.parse(config.dataset)
    split = PRETRAIN_SPLIT[ds]
    full = load_split(ds, config.data_root, split, allow_checksum_mismatch=config.allow_checksum_mismatch)
    mean, std = channel_stats(full.images)
    spec = SplitSpec(ds, split, SplitRole.PRETRAIN, limit=config.pretrain_limit, seed=config.seed)
    idx = spec.resolve(len(full))
    data = full if len(idx) == len(full) else full.subset(idx)
    return data, mean, std


@dataclass
class PretrainResult:
    checkpoint_path: Path
    log: List[TrainLogRecord] = field(default_factory=list)
    config: Optional[RunConfig] = None

    def losses(self) -> List[float]:
        return [r.l_total for r in self.log]


def _configure_determinism():
    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False


def checkpoint_name(epoch: int) -> str:
    return f"ckpt_{epoch:04d}.pt"


def pretrain(config: RunConfig, data: Optional[ImageSet] = None, norm=None,
             manifest_hash: Optional[str] = None) -> PretrainResult:
    """Run (or resume) pretraining and return the final checkpoint path and the step log.

    ``data``/``norm`` may be supplied to bypass dataset ingestion (tests, sweeps
    sharing one loaded split).
    """
    _configure_determinism()
    device = resolve_device(config.device)
    if data is None:
        data, mean, std = load_pretrain_data(config)
    else:
        mean, std = norm if norm is not None else channel_stats(data.images)
    if len(data) < config.M:
        raise ConfigurationError(f"{len(data)} pretraining images cannot fill one mini-batch of M={config.M}")
    out = Path(config.output_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))

    enc_cfg = EncoderConfig(Architecture(config.resolved_architecture), config.image_side)
    model = build_model(enc_cfg, mean, std, config.seed, hidden=config.relation_hidden)
    model.to(device)
    optimizer = _make_optimizer(config, model.parameters())
    start_epoch = 0
    records: List[TrainLogRecord] = []
    log_path = out / "train_log.jsonl"

    if config.resume_from:
        ckpt = load_checkpoint(config.resume_from)
        if ckpt.config_hash != config.hash():
            raise ConfigurationError(
                f"cannot resume: checkpoint config hash {ckpt.config_hash} != run config hash {config.hash()}")
        model.load_state_dict(ckpt.model_state)
        optimizer.load_state_dict(ckpt.optimizer_state)
        start_epoch = ckpt.epoch
        if log_path.exists():
            records = [TrainLogRecord(**json.loads(line)) for line in log_path.read_text().splitlines() if line]
            records = [r for r in records if r.epoch < start_epoch]
    log_path.write_text("".join(r.to_json() + "\n" for r in records))

    expected_pairs = total_pair_count(config.M, config.K, config.N)
    global_step = sum(1 for _ in records)
    ckpt_path = None
    t0 = time.time()
    for epoch in range(start_epoch, config.epochs):
        for group in optimizer.param_groups:
            group["lr"] = _lr_at(config, epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(data))
        loader = torch.utils.data.DataLoader(_BatchAssembler(data, order, config, epoch), batch_size=None,
                                             shuffle=False, num_workers=config.num_workers,
                                             collate_fn=_identity)
        model.train()
        with log_path.open("a") as log_fh:
            for step, batch in enumerate(loader):
                reps = model.encode(batch.views.to(device), batch.provenance)
                pairs = aggregate(reps, batch.M, batch.K, batch.N)
                if len(pairs) != expected_pairs:
                    raise TrainingAborted(f"pair count {len(pairs)} != {expected_pairs}")
                lb = loss(model.relate_pairs(reps, pairs), pairs)
                if not lb.is_finite():
                    raise TrainingAborted("non-finite loss", {"epoch": epoch, "step": step, **lb.as_floats(),
                                                              "image_ids": batch.image_ids.tolist()})
                optimizer.zero_grad(set_to_none=True)
                lb.l_total.backward()
                optimizer.step()
                rec = TrainLogRecord(epoch, step, global_step, **lb.as_floats(), pairs=pairs.counts(),
                                     n_pairs=len(pairs), wall_clock=time.time() - t0)
                records.append(rec)
                log_fh.write(rec.to_json() + "\n")
                global_step += 1
        log.info("epoch %d: l_total %.4f", epoch, records[-1].l_total if records else float("nan"))
        done = epoch + 1
        if done % max(1, config.checkpoint_every) == 0 or done == config.epochs:
            ckpt_path = out / "checkpoints" / checkpoint_name(done)
            save_checkpoint(ckpt_path, Checkpoint(
                architecture=enc_cfg.architecture, input_size=enc_cfg.input_size,
                feature_dim=model.encoder.feature_dim, patch_mode=config.patch_mode,
                model_state={k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
                mean=np.asarray(mean).tolist(), std=np.asarray(std).tolist(), config=config.to_dict(),
                config_hash=config.hash(), epoch=done, step=global_step,
                optimizer_state=optimizer.state_dict(), manifest_hash=manifest_hash))
    if ckpt_path is None:
        ckpt_path = out / "checkpoints" / checkpoint_name(config.epochs)
    return PretrainResult(ckpt_path, records, config)


def pair_kind_counts(M: int, K: int, N: int) -> dict:
    return {PairKind.IMAGE_POS.name: M * (K * K - K) // 2, PairKind.IMAGE_NEG.name: M * (K * K - K) // 2,
            PairKind.PATCH.name: M * (N * N - N) // 2}
