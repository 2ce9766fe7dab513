"""Frozen-backbone linear evaluation."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torchvision.transforms.functional as TF

from .datasets import IMAGE_SIDE, EvalTaskSpec, ImageSet
from .errors import ConfigurationError
from .model import Architecture, Checkpoint, Encoder, EncoderConfig, load_checkpoint, seed_everything, state_hash
from .patching import PatchMode
from .representation import compose_representation, make_grid

log = logging.getLogger(__name__)


@dataclass
class ProbeConfig:
    n_patches: int = 9
    patch_size_px: Optional[int] = None  # default: the checkpoint's training patch size
    probe_epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 128
    weight_decay: float = 0.0
    affine_augment: bool = False
    # affine ranges for the optional augmented probe; no flips, no crops
    affine_degrees: float = 10.0
    affine_translate: float = 0.1
    affine_scale_min: float = 0.9
    affine_scale_max: float = 1.1
    affine_shear: float = 5.0
    probe_train_limit: Optional[int] = None
    probe_test_limit: Optional[int] = None
    grid_seed: int = 0
    seed: int = 0
    feature_batch_size: int = 256
    device: str = "auto"

    @classmethod
    def from_dict(cls, data: dict) -> "ProbeConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown probe config keys: {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EvalResult:
    test_accuracy: float
    train_accuracy: float
    per_seed: List[dict] = field(default_factory=list)
    mean: float = float("nan")
    std: float = float("nan")
    complete: bool = True
    errors: List[str] = field(default_factory=list)
    backbone_hash_before: Optional[str] = None
    backbone_hash_after: Optional[str] = None
    encoder_passes_per_image: Optional[float] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    """Percentage of rows whose argmax equals the label."""
    if len(labels) == 0:
        return float("nan")
    return 100.0 * (logits.argmax(dim=1) == labels).double().mean().item()


def random_affine(images: torch.Tensor, rng: np.random.Generator, cfg: ProbeConfig) -> torch.Tensor:
    out = torch.empty_like(images)
    side = images.shape[-1]
    for i in range(images.shape[0]):
        t = cfg.affine_translate * side
        out[i] = TF.affine(
            images[i],
            angle=float(rng.uniform(-cfg.affine_degrees, cfg.affine_degrees)),
            translate=[int(round(rng.uniform(-t, t))), int(round(rng.uniform(-t, t)))],
            scale=float(rng.uniform(cfg.affine_scale_min, cfg.affine_scale_max)),
            shear=[float(rng.uniform(-cfg.affine_shear, cfg.affine_shear))],
            interpolation=TF.InterpolationMode.BILINEAR,
        )
    return out


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2))).float() / 255.0


def _device(name):
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def random_encoder(architecture: Union[str, Architecture], input_size: int, mean, std, seed: int) -> Encoder:
    """Untrained encoder: the lower-bound baseline for linear evaluation."""
    seed_everything(seed)
    return Encoder(EncoderConfig(Architecture(architecture), input_size), mean, std).eval()


def linear_probe(source: Union[Checkpoint, Encoder, str, Path], task: EvalTaskSpec, probe: ProbeConfig,
                 train_set: Optional[ImageSet] = None, test_set: Optional[ImageSet] = None,
                 data_root=None) -> EvalResult:
    """Fit a single linear layer on frozen features and report train/test accuracy.

    ``source`` is a checkpoint (object or path) or a bare encoder (treated as a
    rescaled-patch model). Backbone weights are never updated.
    """
    if isinstance(source, (str, Path)):
        source = load_checkpoint(source)
    if isinstance(source, Checkpoint):
        encoder, mode = source.build_encoder(), source.patch_mode
        train_patch = source.config.get("patch_size_px")
    else:
        encoder, mode, train_patch = source, PatchMode.RESCALED.value, None
    if mode == PatchMode.ADDITIVE.value and probe.n_patches != 0:
        raise ConfigurationError("additive-patch checkpoints are evaluated with n_patches=0 (single pass)")
    side = IMAGE_SIDE[task.probe_train.dataset]
    if encoder.config.input_size != side:
        raise ConfigurationError(
            f"geometry mismatch: encoder expects {encoder.config.input_size}px, task {task.name} is {side}px")
    if train_set is None:
        train_set = dataclasses.replace(task.probe_train, limit=probe.probe_train_limit,
                                        seed=probe.seed).load(data_root)
    if test_set is None:
        test_set = dataclasses.replace(task.probe_test, limit=probe.probe_test_limit,
                                       seed=probe.seed).load(data_root)
    patch_size = probe.patch_size_px or train_patch
    if probe.n_patches and not patch_size:
        raise ConfigurationError("probe needs patch_size_px when the source carries no training patch size")
    grid = make_grid(side, patch_size or 1, probe.n_patches, seed=probe.grid_seed) if probe.n_patches else None

    device = _device(probe.device)
    encoder.to(device).eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    hash_before = state_hash(encoder)

    def features(x: torch.Tensor) -> torch.Tensor:
        return compose_representation(x, encoder, grid, probe.feature_batch_size, device)

    x_train = _to_tensor(train_set.images)
    x_test = _to_tensor(test_set.images)
    y_train = torch.as_tensor(train_set.labels)
    y_test = torch.as_tensor(test_set.labels)
    if (y_train < 0).any() or (y_test < 0).any():
        raise ConfigurationError("linear probe needs labelled splits")
    encoder.reset_count()
    f_train = features(x_train)
    passes = encoder.pass_count / max(1, len(x_train))
    f_test = features(x_test)

    torch.manual_seed(probe.seed)
    n_classes = task.num_classes
    clf = nn.Linear(f_train.shape[1], n_classes).to(device)
    opt = torch.optim.Adam(clf.parameters(), lr=probe.lr, weight_decay=probe.weight_decay)
    ce = nn.CrossEntropyLoss()
    n = len(y_train)
    for epoch in range(probe.probe_epochs):
        rng = np.random.default_rng([probe.seed, epoch])
        feats = f_train
        if probe.affine_augment:
            feats = features(random_affine(x_train, rng, probe))
        order = rng.permutation(n)
        for start in range(0, n, probe.batch_size):
            idx = torch.as_tensor(order[start:start + probe.batch_size])
            logits = clf(feats[idx].to(device))
            batch_loss = ce(logits, y_train[idx].to(device))
            opt.zero_grad(set_to_none=True)
            batch_loss.backward()
            opt.step()
    clf.eval()
    with torch.no_grad():
        train_acc = accuracy(clf(f_train.to(device)).cpu(), y_train)
        test_acc = accuracy(clf(f_test.to(device)).cpu(), y_test)
    hash_after = state_hash(encoder)
    if hash_after != hash_before:
        raise RuntimeError("backbone parameters changed during linear evaluation")
    result = EvalResult(test_acc, train_acc, [{"seed": probe.seed, "test_accuracy": test_acc,
                                               "train_accuracy": train_acc}],
                        mean=test_acc, std=0.0, backbone_hash_before=hash_before,
                        backbone_hash_after=hash_after, encoder_passes_per_image=passes)
    return result


def summarize(values: Sequence[float]):
    """Mean and sample standard deviation (``ddof=1``; 0 for a single value)."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        return float("nan"), float("nan")
    std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return float(vals.mean()), std


def seed_sweep(run_fn: Callable[[int], Union[float, EvalResult]], seeds: Sequence[int]) -> EvalResult:
    """Run ``run_fn`` once per seed and aggregate test accuracy.

    A failing seed is recorded and the result is flagged incomplete instead of
    aborting the sweep.
    """
    if len(seeds) < 2:
        raise ConfigurationError("a seed sweep needs at least two seeds")
    per_seed, errors = [], []
    for seed in seeds:
        try:
            out = run_fn(seed)
        except Exception as exc:  # one bad seed must not lose the others
            log.exception("seed %s failed", seed)
            errors.append(f"seed {seed}: {type(exc).__name__}: {exc}")
            continue
        if isinstance(out, EvalResult):
            per_seed.append({"seed": seed, "test_accuracy": out.test_accuracy, "train_accuracy": out.train_accuracy})
        else:
            per_seed.append({"seed": seed, "test_accuracy": float(out), "train_accuracy": float("nan")})
    tests = [r["test_accuracy"] for r in per_seed]
    trains = [r["train_accuracy"] for r in per_seed]
    mean, std = summarize(tests)
    train_mean = float(np.mean(trains)) if trains else float("nan")
    return EvalResult(mean, train_mean, per_seed, mean, std, complete=not errors, errors=errors)
