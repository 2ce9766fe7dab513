"""Encoder backbones, the relation head and the composite pretraining loss."""

from __future__ import annotations

import enum
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .aggregation import PairBatch, RepresentationBatch
from .errors import ConfigurationError, TrainingAborted

CHECKPOINT_FORMAT = 1
BCE_EPS = 1e-7


class Architecture(str, enum.Enum):
    RESNET32_CIFAR = "resnet32_cifar"
    RESNET34 = "resnet34"


FEATURE_DIM = {Architecture.RESNET32_CIFAR: 64, Architecture.RESNET34: 512}


@dataclass(frozen=True)
class EncoderConfig:
    architecture: Architecture = Architecture.RESNET32_CIFAR
    input_size: int = 32

    @property
    def feature_dim(self) -> int:
        return FEATURE_DIM[Architecture(self.architecture)]


class _ShortcutA(nn.Module):
    """Parameter-free shortcut: stride-2 subsampling plus zero channel padding."""

    def __init__(self, pad: int):
        super().__init__()
        self.pad = pad

    def forward(self, x):
        return F.pad(x[:, :, ::2, ::2], (0, 0, 0, 0, self.pad, self.pad))


class BasicBlock(nn.Module):
    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        if stride != 1 or in_planes != planes:
            self.shortcut = _ShortcutA((planes - in_planes) // 2)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class CifarResNet(nn.Module):
    """ResNet-(6n+2) for small images: three stages of widths 16/32/64."""

    def __init__(self, blocks_per_stage: int = 5):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(16)
        layers, in_planes = [], 16
        for planes, stride in ((16, 1), (32, 2), (64, 2)):
            for b in range(blocks_per_stage):
                layers.append(BasicBlock(in_planes, planes, stride if b == 0 else 1))
                in_planes = planes
        self.layers = nn.Sequential(*layers)
        self.feature_dim = 64
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        out = self.layers(F.relu(self.bn1(self.conv1(x))))
        return F.adaptive_avg_pool2d(out, 1).flatten(1)


def _resnet34():
    import torchvision

    net = torchvision.models.resnet34(weights=None)
    net.fc = nn.Identity()
    net.feature_dim = 512
    return net


class Encoder(nn.Module):
    """Backbone with the dataset's per-channel input normalisation folded in.

    Inputs are raw views in ``[0, 1]``; ``pass_count`` counts images pushed
    through the network since the last :meth:`reset_count`.
    """

    def __init__(self, config: EncoderConfig = EncoderConfig(), mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25)):
        super().__init__()
        self.config = EncoderConfig(Architecture(config.architecture), config.input_size)
        if self.config.architecture is Architecture.RESNET32_CIFAR:
            self.backbone = CifarResNet(5)
        else:
            self.backbone = _resnet34()
        self.register_buffer("mean", torch.as_tensor(np.asarray(mean, np.float32)).view(1, 3, 1, 1))
        self.register_buffer("std", torch.as_tensor(np.asarray(std, np.float32)).view(1, 3, 1, 1))
        self.pass_count = 0

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    def reset_count(self):
        self.pass_count = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.pass_count += x.shape[0]
        return self.backbone((x - self.mean) / self.std)


class RelationHead(nn.Module):
    """Two trainable layers on a concatenated pair: class logit, dx, dy."""

    def __init__(self, feature_dim: int = 64, hidden: int = 256):
        super().__init__()
        self.fc1 = nn.Linear(2 * feature_dim, hidden)
        self.bn = nn.BatchNorm1d(hidden)
        self.fc2 = nn.Linear(hidden, 3)

    def forward(self, left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.bn(self.fc1(torch.cat([left, right], dim=1))))
        return self.fc2(h)


@dataclass
class RelationOutput:
    class_prob: torch.Tensor  # (n,) in (0, 1)
    dx: torch.Tensor
    dy: torch.Tensor

    def stacked(self) -> torch.Tensor:
        return torch.stack([self.class_prob, self.dx, self.dy], dim=1)


def relate(head: RelationHead, left: torch.Tensor, right: torch.Tensor) -> RelationOutput:
    raw = head(left, right)
    return RelationOutput(torch.sigmoid(raw[:, 0]), raw[:, 1], raw[:, 2])


@dataclass
class LossBreakdown:
    l_bce: torch.Tensor
    l_mse_x: torch.Tensor
    l_mse_y: torch.Tensor
    l_total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("l_bce", "l_mse_x", "l_mse_y", "l_total")}

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(getattr(self, k)).all())
                   for k in ("l_bce", "l_mse_x", "l_mse_y", "l_total"))


def loss(outputs: RelationOutput, targets: PairBatch) -> LossBreakdown:
    """Unweighted sum of BCE on the class neuron and MSE on both distance neurons.

    Every row contributes to every term; image pairs regress onto their
    (0, 0) / (1, 1) pseudo-targets.
    """
    p = outputs.class_prob
    t_cls = targets.class_tensor(p.device, p.dtype)
    t_dist = targets.distance_tensor(p.device, p.dtype)
    p = p.clamp(BCE_EPS, 1 - BCE_EPS)
    l_bce = -(t_cls * torch.log(p) + (1 - t_cls) * torch.log1p(-p)).mean()
    l_mse_x = ((outputs.dx - t_dist[:, 0]) ** 2).mean()
    l_mse_y = ((outputs.dy - t_dist[:, 1]) ** 2).mean()
    return LossBreakdown(l_bce, l_mse_x, l_mse_y, l_bce + l_mse_x + l_mse_y)


class SpatialReasoningModel(nn.Module):
    """Shared encoder for images and patches plus the relation head."""

    def __init__(self, encoder: Encoder, hidden: int = 256):
        super().__init__()
        self.encoder = encoder
        self.head = RelationHead(encoder.feature_dim, hidden)

    def encode(self, views: torch.Tensor, provenance=None, check_finite: bool = True) -> RepresentationBatch:
        feats = self.encoder(views)
        if check_finite and not torch.isfinite(feats).all():
            bad = (~torch.isfinite(feats)).any(dim=1).nonzero().flatten().tolist()
            raise TrainingAborted("non-finite encoder activations",
                                  {"rows": bad[:32], "n_bad": len(bad), "n_rows": feats.shape[0]})
        return RepresentationBatch(feats, list(provenance) if provenance is not None else [])

    def relate_pairs(self, reps: RepresentationBatch, pairs: PairBatch) -> RelationOutput:
        v = reps.vectors
        left = v[torch.as_tensor(pairs.left, device=v.device)]
        right = v[torch.as_tensor(pairs.right, device=v.device)]
        return relate(self.head, left, right)


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def build_model(config: EncoderConfig, mean, std, seed: int, hidden: int = 256) -> SpatialReasoningModel:
    seed_everything(seed)
    return SpatialReasoningModel(Encoder(config, mean, std), hidden)


def state_hash(module: nn.Module) -> str:
    """Digest of all parameters and buffers, for detecting any weight change."""
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    architecture: Architecture
    input_size: int
    feature_dim: int
    patch_mode: str
    model_state: dict
    mean: list
    std: list
    config: dict
    config_hash: str
    epoch: int
    step: int = 0
    optimizer_state: Optional[dict] = None
    manifest_hash: Optional[str] = None
    format_version: int = CHECKPOINT_FORMAT
    extra: dict = field(default_factory=dict)

    def build_model(self) -> SpatialReasoningModel:
        hidden = self.model_state["head.fc1.weight"].shape[0]
        model = SpatialReasoningModel(Encoder(EncoderConfig(self.architecture, self.input_size), self.mean, self.std),
                                      hidden)
        model.load_state_dict(self.model_state)
        return model.eval()

    def build_encoder(self) -> Encoder:
        return self.build_model().encoder.eval()


def save_checkpoint(path, ckpt: Checkpoint):
    """Write atomically: the previous file at ``path`` survives any failure."""
    path = Path(path)
    payload = dict(ckpt.__dict__)
    payload["architecture"] = Architecture(ckpt.architecture).value
    fd, tmp = tempfile.mkstemp(prefix=f"{path.stem}_", suffix=".part", dir=path.parent)
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except (OSError, RuntimeError) as exc:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise TrainingAborted(f"checkpoint write failed: {exc}", {"path": str(path)}) from exc


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise ConfigurationError(
            f"{path}: checkpoint format {version!r} is not supported (expected {CHECKPOINT_FORMAT})")
    payload["architecture"] = Architecture(payload["architecture"])
    return Checkpoint(**payload)
