"""Pair aggregation over a batch of encoder representations.

A batch of ``M`` images yields ``P = K*M + M*N`` representation rows: first
the ``K*M`` augmented image views ordered augmentation-major (row ``k*M + m``
is view ``k`` of image ``m``), then the ``M*N`` patch rows grouped by image
(row ``K*M + m*N + p``).

Pairs are index pairs into that row layout; vectors are only gathered when
the loss is computed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
import torch

from .errors import ConfigurationError
from .patching import PatchSpec, relative_distance


class PairKind(enum.IntEnum):
    IMAGE_POS = 0
    IMAGE_NEG = 1
    PATCH = 2


@dataclass(frozen=True)
class ImageViewTag:
    image_index: int
    aug_index: int


@dataclass(frozen=True)
class PatchTag:
    image_index: int
    patch_index: int
    spec: Optional[PatchSpec] = None


Tag = Union[ImageViewTag, PatchTag]


@dataclass
class RepresentationBatch:
    vectors: Optional[torch.Tensor]  # (P, D); None when only the layout matters
    provenance: List[Tag]

    def __len__(self) -> int:
        return len(self.provenance)


def build_provenance(M: int, K: int, N: int, patch_specs: Optional[Sequence[Sequence[PatchSpec]]] = None):
    """Provenance tags in canonical row order. ``patch_specs[m][p]`` is optional."""
    tags: List[Tag] = [ImageViewTag(m, k) for k in range(K) for m in range(M)]
    for m in range(M):
        for p in range(N):
            spec = patch_specs[m][p] if patch_specs is not None else None
            tags.append(PatchTag(m, p, spec))
    return tags


def representation_count(M: int, K: int, N: int) -> int:
    return K * M + M * N


def total_pair_count(M: int, K: int, N: int) -> int:
    """Image pairs ``M(K^2-K)`` plus unique same-image patch pairs ``M(N^2-N)/2``."""
    return M * (K * K - K) + M * (N * N - N) // 2


@dataclass
class PairBatch:
    left: np.ndarray
    right: np.ndarray
    class_target: np.ndarray  # float32, 1 positive / 0 negative
    distance_target: np.ndarray  # (n, 2) float32
    kind: np.ndarray  # PairKind codes

    def __len__(self) -> int:
        return len(self.left)

    @classmethod
    def empty(cls) -> "PairBatch":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.float32),
                   np.zeros((0, 2), np.float32), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, parts: Sequence["PairBatch"]) -> "PairBatch":
        parts = [p for p in parts if len(p)] or [cls.empty()]
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("left", "right", "class_target", "distance_target", "kind")))

    def counts(self) -> dict:
        return {k.name: int((self.kind == k).sum()) for k in PairKind}

    def class_tensor(self, device=None, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.class_target, dtype=dtype, device=device)

    def distance_tensor(self, device=None, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.distance_target, dtype=dtype, device=device)

    def rows(self):
        """Iterate ``(left, right, kind, class, dx, dy)`` tuples; used for CSV dumps."""
        for i in range(len(self)):
            yield (int(self.left[i]), int(self.right[i]), PairKind(int(self.kind[i])).name,
                   float(self.class_target[i]), float(self.distance_target[i, 0]),
                   float(self.distance_target[i, 1]))


def _check_layout(batch: RepresentationBatch, M: int, K: int, N: Optional[int]):
    tags = batch.provenance
    n_img = K * M
    if len(tags) < n_img:
        raise ValueError(f"batch has {len(tags)} rows, fewer than K*M = {n_img}")
    for r in range(n_img):
        tag = tags[r]
        if not isinstance(tag, ImageViewTag) or tag.aug_index != r // M or tag.image_index != r % M:
            raise ValueError(f"row {r} breaks the augmentation-major image layout: {tag}")
    if N is not None:
        if len(tags) != n_img + M * N:
            raise ValueError(f"batch has {len(tags)} rows, expected K*M + M*N = {n_img + M * N}")
        for r in range(n_img, len(tags)):
            tag = tags[r]
            m, p = divmod(r - n_img, N)
            if not isinstance(tag, PatchTag) or tag.image_index != m or tag.patch_index != p:
                raise ValueError(f"row {r} breaks the per-image patch layout: {tag}")


def aggregate_image_pairs(batch: RepresentationBatch, M: int, K: int) -> PairBatch:
    """Positive and negative pairs of augmented image views.

    For every augmentation pair ``k1 < k2`` and image ``m`` the positive row
    pairs view ``k1`` of ``m`` with view ``k2`` of ``m``; the matching negative
    pairs it with view ``k2`` of the next image ``(m + 1) mod M``.
    Distance pseudo-targets are ``(0, 0)`` for positives and ``(1, 1)`` for negatives.
    """
    if K < 2:
        raise ConfigurationError(f"K={K}: at least two augmentations are needed for positive pairs")
    _check_layout(batch, M, K, None)
    m = np.arange(M)
    left, right, kinds = [], [], []
    for k1 in range(K):
        for k2 in range(k1 + 1, K):
            left += [k1 * M + m, k1 * M + m]
            right += [k2 * M + m, k2 * M + (m + 1) % M]
            kinds += [np.full(M, PairKind.IMAGE_POS), np.full(M, PairKind.IMAGE_NEG)]
    if not left:
        return PairBatch.empty()
    kind = np.concatenate(kinds).astype(np.int64)
    positive = kind == PairKind.IMAGE_POS
    dist = np.where(positive[:, None], 0.0, 1.0).astype(np.float32) * np.ones((1, 2), np.float32)
    return PairBatch(np.concatenate(left).astype(np.int64), np.concatenate(right).astype(np.int64),
                     positive.astype(np.float32), dist, kind)


def aggregate_patch_pairs(batch: RepresentationBatch, M: int, N: int, K: Optional[int] = None) -> PairBatch:
    """All unordered pairs ``i < j`` of patches of the same image, positive only.

    The distance target of pair ``(i, j)`` is ``relative_distance(spec_i, spec_j)``.
    """
    if N < 2:
        return PairBatch.empty()
    if K is None:
        K = (len(batch) - M * N) // M
    _check_layout(batch, M, K, N)
    base = K * M
    left, right, dist = [], [], []
    for m in range(M):
        for i in range(N):
            for j in range(i + 1, N):
                a, b = base + m * N + i, base + m * N + j
                sa, sb = batch.provenance[a].spec, batch.provenance[b].spec
                if sa is None or sb is None:
                    raise ValueError(f"patch rows {a}, {b} carry no PatchSpec")
                left.append(a)
                right.append(b)
                dist.append(relative_distance(sa, sb))
    n = len(left)
    return PairBatch(np.asarray(left, np.int64), np.asarray(right, np.int64), np.ones(n, np.float32),
                     np.asarray(dist, np.float32).reshape(n, 2), np.full(n, PairKind.PATCH, np.int64))


def aggregate(batch: RepresentationBatch, M: int, K: int, N: int) -> PairBatch:
    """Image pairs followed by patch pairs; ``len`` equals ``total_pair_count(M, K, N)``."""
    return PairBatch.concat([aggregate_image_pairs(batch, M, K), aggregate_patch_pairs(batch, M, N, K)])


def brute_force_pairs(provenance: Sequence[Tag], M: int) -> set:
    """Reference pair set by exhaustive search over all ordered row pairs.

    Classifies each ``(r1, r2)`` purely from provenance tags, independently of
    the constructive aggregation above. Returns ``{(r1, r2, PairKind)}``.
    """
    found = set()
    for r1, a in enumerate(provenance):
        for r2, b in enumerate(provenance):
            if isinstance(a, ImageViewTag) and isinstance(b, ImageViewTag):
                if a.aug_index >= b.aug_index:
                    continue
                if a.image_index == b.image_index:
                    found.add((r1, r2, PairKind.IMAGE_POS))
                if b.image_index == (a.image_index + 1) % M:
                    found.add((r1, r2, PairKind.IMAGE_NEG))
            elif isinstance(a, PatchTag) and isinstance(b, PatchTag):
                if a.image_index == b.image_index and a.patch_index < b.patch_index:
                    found.add((r1, r2, PairKind.PATCH))
    return found


def pair_set(pairs: PairBatch) -> set:
    return {(int(l), int(r), PairKind(int(k))) for l, r, k in zip(pairs.left, pairs.right, pairs.kind)}


def brute_force_count(M: int, K: int, N: int) -> int:
    """Number of pairs found by the exhaustive enumerator, counting each (row, row, kind) once.

    For ``M = 1`` positives and negatives coincide on the same rows, so they are
    counted per kind rather than per row pair.
    """
    return len(brute_force_pairs(build_provenance(M, K, N), M))
