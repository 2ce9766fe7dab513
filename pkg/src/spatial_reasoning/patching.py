"""Patch sampling, patch views and image augmentation.

Positions are normalised top-left corners: ``x`` grows to the right, ``y``
downwards, both in units of the image side. Sampled positions always sit on
the integer pixel grid, so targets are exact multiples of ``1/W``.

All randomness is drawn from an explicit ``numpy.random.Generator`` so that
every function is pure given its generator state.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .errors import ConfigurationError


class PatchMode(str, enum.Enum):
    RESCALED = "rescaled"
    ADDITIVE = "additive"


@dataclass(frozen=True)
class PatchSpec:
    x: float
    y: float
    size_px: int
    image_index: int = 0
    width: int = 32
    height: int = 32

    @classmethod
    def from_pixels(cls, x_px: int, y_px: int, size_px: int, width: int, height: int,
                    image_index: int = 0) -> "PatchSpec":
        return cls(x_px / width, y_px / height, int(size_px), image_index, width, height)

    @property
    def x_px(self) -> int:
        return int(round(self.x * self.width))

    @property
    def y_px(self) -> int:
        return int(round(self.y * self.height))

    def in_bounds(self) -> bool:
        s = self.size_px
        eps = 1e-9
        return (0 <= self.x <= 1 - s / self.width + eps and 0 <= self.y <= 1 - s / self.height + eps
                and s < self.width)


@dataclass
class PatchView:
    pixels: torch.Tensor  # (3, S, S), values in [0, 1]
    spec: PatchSpec
    mode: PatchMode


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation strengths. Defaults follow the Relational Reasoning CIFAR pipeline."""

    crop_p: float = 1.0
    crop_scale: Tuple[float, float] = (0.08, 1.0)
    crop_ratio: Tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(crop_p=0.0, flip_p=0.0, jitter_p=0.0, grayscale_p=0.0)


def _geometry(image_geometry) -> Tuple[int, int]:
    if isinstance(image_geometry, int):
        return image_geometry, image_geometry
    h, w = image_geometry[:2]
    return int(h), int(w)


def overlaps(a: PatchSpec, b: PatchSpec) -> bool:
    """True iff the two square patches share at least one pixel.

    Touching edges (separation of exactly ``size_px`` on an axis) do not overlap.
    """
    eps = 1e-9
    dx = abs(a.x - b.x) * a.width
    dy = abs(a.y - b.y) * a.height
    return dx < a.size_px - eps and dy < a.size_px - eps


def relative_distance(a: PatchSpec, b: PatchSpec) -> Tuple[float, float]:
    """Signed position of ``a`` relative to ``b``, ``(a.x - b.x, a.y - b.y)``."""
    return a.x - b.x, a.y - b.y


def max_feasible_patch_size(image_geometry) -> int:
    """Largest patch side for which two non-overlapping patches fit in the image."""
    h, w = _geometry(image_geometry)
    return max(h, w) // 2


def sample_patch_positions(image_geometry, n: int, size_px: int, rng: np.random.Generator,
                           image_index: int = 0, max_attempts: int = 100) -> List[PatchSpec]:
    """Sample ``n`` in-bounds square patches; the first two never overlap.

    The second patch is rejection-sampled up to ``max_attempts`` times. When
    that budget runs out it is placed on the image corner farthest (Chebyshev)
    from the first; if even that corner overlaps, the first patch is moved to
    its nearest corner and the second to the opposite one. Patches after the
    second are unconstrained.
    """
    h, w = _geometry(image_geometry)
    s = int(size_px)
    if s < 1 or s >= min(h, w):
        raise ConfigurationError(f"patch size {s}px must lie in [1, {min(h, w)}) for a {w}x{h} image")
    if n >= 2 and 2 * s > max(h, w):
        raise ConfigurationError(
            f"no non-overlapping placement of two {s}px patches in a {w}x{h} image; "
            f"maximum feasible patch size is {max_feasible_patch_size((h, w))}px")
    span_x, span_y = w - s, h - s

    def spec(xp, yp):
        return PatchSpec.from_pixels(int(xp), int(yp), s, w, h, image_index)

    def draw():
        return spec(rng.integers(0, span_x + 1), rng.integers(0, span_y + 1))

    specs: List[PatchSpec] = []
    if n <= 0:
        return specs
    first = draw()
    specs.append(first)
    if n >= 2:
        second = None
        for _ in range(max_attempts):
            candidate = draw()
            if not overlaps(first, candidate):
                second = candidate
                break
        if second is None:
            first, second = _fallback_pair(first, span_x, span_y, spec)
            specs[0] = first
        specs.append(second)
    specs.extend(draw() for _ in range(n - len(specs)))
    return specs


def _fallback_pair(first: PatchSpec, span_x: int, span_y: int, spec):
    corners = [(0, 0), (span_x, 0), (0, span_y), (span_x, span_y)]
    fx, fy = first.x_px, first.y_px
    cheb = [max(abs(cx - fx), abs(cy - fy)) for cx, cy in corners]
    far = corners[int(np.argmax(cheb))]
    second = spec(*far)
    if not overlaps(first, second):
        return first, second
    near = corners[int(np.argmin([abs(cx - fx) + abs(cy - fy) for cx, cy in corners]))]
    return spec(*near), spec(span_x - near[0], span_y - near[1])


def as_tensor(image: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    """(H, W, 3) array in [0, 1] -> (3, H, W) float tensor. Tensors pass through."""
    if isinstance(image, torch.Tensor):
        return image
    return torch.from_numpy(np.ascontiguousarray(np.asarray(image, dtype=np.float32).transpose(2, 0, 1)))


def color_jitter(img: torch.Tensor, rng: np.random.Generator, cfg: AugmentConfig) -> torch.Tensor:
    """Random colour jitter (applied with ``jitter_p``) followed by random grayscale."""
    if cfg.jitter_p > 0 and rng.random() < cfg.jitter_p:
        factors = [
            rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness),
            rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast),
            rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation),
            rng.uniform(-cfg.hue, cfg.hue),
        ]
        for op in rng.permutation(4):
            if op == 0:
                img = TF.adjust_brightness(img, float(factors[0]))
            elif op == 1:
                img = TF.adjust_contrast(img, float(factors[1]))
            elif op == 2:
                img = TF.adjust_saturation(img, float(factors[2]))
            elif cfg.hue > 0:
                img = TF.adjust_hue(img, float(factors[3]))
    if cfg.grayscale_p > 0 and rng.random() < cfg.grayscale_p:
        img = TF.rgb_to_grayscale(img, num_output_channels=3)
    return img


def _crop_params(h: int, w: int, rng: np.random.Generator, scale, ratio):
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            return int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw
    # central crop at the clamped aspect ratio
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def resize(img: torch.Tensor, size: int) -> torch.Tensor:
    if img.shape[-1] == size and img.shape[-2] == size:
        return img
    return TF.resize(img, [size, size], interpolation=TF.InterpolationMode.BILINEAR, antialias=True)


def full_image_augment(image, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
                       output_size: Optional[int] = None) -> torch.Tensor:
    """Random resized crop, horizontal flip, colour jitter and grayscale of a full image."""
    img = as_tensor(image)
    h, w = img.shape[-2:]
    size = output_size or w
    if cfg.crop_p > 0 and rng.random() < cfg.crop_p:
        top, left, ch, cw = _crop_params(h, w, rng, cfg.crop_scale, cfg.crop_ratio)
        img = TF.resized_crop(img, top, left, ch, cw, [size, size],
                              interpolation=TF.InterpolationMode.BILINEAR, antialias=True)
    else:
        img = resize(img, size)
    if cfg.flip_p > 0 and rng.random() < cfg.flip_p:
        img = TF.hflip(img)
    img = color_jitter(img, rng, cfg)
    return img.clamp(0.0, 1.0)


def crop(image, spec: PatchSpec) -> torch.Tensor:
    img = as_tensor(image)
    x, y, s = spec.x_px, spec.y_px, spec.size_px
    return img[:, y:y + s, x:x + s]


def extract_patch_view(image, spec: PatchSpec, mode: PatchMode, rng: Optional[np.random.Generator],
                       cfg: AugmentConfig = AugmentConfig(), output_size: Optional[int] = None) -> PatchView:
    """Cut out a patch and turn it into an encoder input.

    Only colour jitter and random grayscale are applied to patches; they are
    never cropped or flipped. ``rng=None`` disables augmentation.

    RESCALED views are the patch bilinearly resized to ``output_size``
    (default: the image side). ADDITIVE views are a zero canvas of the image
    size with the patch pasted at its original pixel location.
    """
    mode = PatchMode(mode)
    img = as_tensor(image)
    patch = crop(img, spec)
    if mode is PatchMode.RESCALED:
        out = resize(patch, output_size or img.shape[-1])
        if rng is not None:
            out = color_jitter(out, rng, cfg)
    else:
        if rng is not None:
            patch = color_jitter(patch, rng, cfg)
        out = torch.zeros_like(img)
        x, y, s = spec.x_px, spec.y_px, spec.size_px
        out[:, y:y + s, x:x + s] = patch
        if output_size and output_size != out.shape[-1]:
            out = resize(out, output_size)
    return PatchView(out.clamp(0.0, 1.0), spec, mode)
