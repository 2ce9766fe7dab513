"""Inference-time representations: whole image plus a grid of patch embeddings.

Composite layout (``LAYOUT_VERSION`` 1): the full-image vector first, then one
vector per grid patch in slot order

    center, left, right, mid-top, mid-bottom, corners...

so a prefix of ``n`` slots is always a valid ``n``-patch grid. Seven-patch
grids add two corners chosen with a seeded generator; nine-patch grids use
all four corners (top-left, top-right, bottom-left, bottom-right).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import torch

from .errors import ConfigurationError
from .model import Checkpoint, Encoder
from .patching import PatchMode, PatchSpec, resize

LAYOUT_VERSION = 1
GRID_SIZES = (0, 1, 3, 5, 7, 9)

# (column, row) on the 3x3 anchor grid
_CENTER_FIRST = [(1, 1), (0, 1), (2, 1), (1, 0), (1, 2)]
_CORNERS = [(0, 0), (2, 0), (0, 2), (2, 2)]
SLOT_NAMES = {(1, 1): "center", (0, 1): "left", (2, 1): "right", (1, 0): "mid-top", (1, 2): "mid-bottom",
              (0, 0): "top-left", (2, 0): "top-right", (0, 2): "bottom-left", (2, 2): "bottom-right"}


@dataclass(frozen=True)
class GridSpec:
    n_patches: int
    patch_size_px: int
    specs: tuple
    slots: tuple

    def names(self) -> List[str]:
        return [SLOT_NAMES[s] for s in self.slots]


def anchor_offsets(side: int, patch_size_px: int) -> List[int]:
    """Three per-axis offsets ``round(i * (side - s) / 2)``, rounding halves up."""
    span = side - patch_size_px
    return [int(np.floor(i * span / 2 + 0.5)) for i in range(3)]


def make_grid(image_geometry, patch_size_px: int, n_patches: int, seed: int = 0) -> GridSpec:
    if isinstance(image_geometry, int):
        h = w = image_geometry
    else:
        h, w = image_geometry[:2]
    if n_patches not in GRID_SIZES:
        raise ConfigurationError(f"n_patches must be one of {GRID_SIZES}, got {n_patches}")
    if n_patches and not 1 <= patch_size_px <= min(h, w):
        raise ConfigurationError(f"patch of {patch_size_px}px does not fit a {w}x{h} image")
    if n_patches <= 5:
        slots = _CENTER_FIRST[:n_patches]
    elif n_patches == 7:
        pick = np.sort(np.random.default_rng(seed).choice(4, size=2, replace=False))
        slots = _CENTER_FIRST + [_CORNERS[i] for i in pick]
    else:
        slots = _CENTER_FIRST + _CORNERS
    ox, oy = anchor_offsets(w, patch_size_px), anchor_offsets(h, patch_size_px)
    specs = tuple(PatchSpec.from_pixels(ox[c], oy[r], patch_size_px, w, h) for c, r in slots)
    return GridSpec(n_patches, patch_size_px, specs, tuple(slots))


def _as_batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        x = images.float()
        return x.unsqueeze(0) if x.dim() == 3 else x
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    return x.float() / 255.0 if arr.dtype == np.uint8 else x.float()


def _resolve_encoder(source: Union[Checkpoint, Encoder], allow_additive: bool) -> Encoder:
    if isinstance(source, Checkpoint):
        if source.patch_mode == PatchMode.ADDITIVE.value and not allow_additive:
            raise ConfigurationError(
                "checkpoint was trained with additive patches; use single_pass_representation instead")
        return source.build_encoder()
    return source


@torch.no_grad()
def compose_representation(images, source: Union[Checkpoint, Encoder], grid: Optional[GridSpec],
                           batch_size: int = 256, device=None) -> torch.Tensor:
    """Concatenate the full-image embedding with one embedding per grid patch.

    ``images`` is a (B, H, W, 3) uint8/float array or a (B, 3, H, W) tensor in
    ``[0, 1]``. Returns a (B, (1 + n) * D) float tensor; the encoder sees each
    image ``1 + n`` times.
    """
    n = grid.n_patches if grid is not None else 0
    encoder = _resolve_encoder(source, allow_additive=n == 0)
    encoder.eval()
    device = device or next(encoder.parameters()).device
    x_all = _as_batch(images)
    size = encoder.config.input_size
    out = []
    for start in range(0, x_all.shape[0], batch_size):
        x = x_all[start:start + batch_size].to(device)
        parts = [encoder(resize(x, size))]
        for spec in (grid.specs if grid is not None else ()):
            patch = x[:, :, spec.y_px:spec.y_px + spec.size_px, spec.x_px:spec.x_px + spec.size_px]
            parts.append(encoder(resize(patch, size)))
        out.append(torch.cat(parts, dim=1).cpu())
    return torch.cat(out) if out else torch.zeros(0, (1 + n) * encoder.feature_dim)


@torch.no_grad()
def single_pass_representation(images, source: Union[Checkpoint, Encoder], batch_size: int = 256,
                               device=None) -> torch.Tensor:
    """One encoder pass on the unmodified image; intended for additive-patch checkpoints."""
    encoder = source.build_encoder() if isinstance(source, Checkpoint) else source
    return compose_representation(images, encoder, None, batch_size, device)


_HEADER = struct.Struct("<8sIIIII")
_MAGIC = b"SRREPR\x00\x01"


def write_embeddings(path, vectors, feature_dim: int, n_patches: int, labels=None):
    """Header (magic, layout version, D, n, rows, has_labels) then float32 rows, then int64 labels."""
    vectors = np.ascontiguousarray(np.asarray(vectors, dtype=np.float32))
    if vectors.ndim != 2 or vectors.shape[1] != (1 + n_patches) * feature_dim:
        raise ValueError(f"vectors of shape {vectors.shape} do not match D={feature_dim}, n={n_patches}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, LAYOUT_VERSION, feature_dim, n_patches, vectors.shape[0],
                              int(labels is not None)))
        fh.write(vectors.tobytes(order="C"))
        if labels is not None:
            fh.write(np.ascontiguousarray(np.asarray(labels, dtype=np.int64)).tobytes())


def read_embeddings(path):
    """Inverse of :func:`write_embeddings`: ``(vectors, labels_or_None, header_dict)``."""
    data = Path(path).read_bytes()
    magic, version, d, n, rows, has_labels = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not an embedding file")
    if version != LAYOUT_VERSION:
        raise ValueError(f"{path}: layout version {version} unsupported")
    width = (1 + n) * d
    off = _HEADER.size
    vectors = np.frombuffer(data, dtype=np.float32, count=rows * width, offset=off).reshape(rows, width)
    labels = None
    if has_labels:
        labels = np.frombuffer(data, dtype=np.int64, count=rows, offset=off + rows * width * 4)
    return vectors.copy(), None if labels is None else labels.copy(), {
        "layout_version": version, "feature_dim": d, "n_patches": n, "rows": rows}
