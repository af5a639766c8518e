"""Masked features and multi-level 4D cosine-correlation pyramids.

Correlation tensors are plain float32 arrays: the learnable network sits
downstream of them and no gradient ever flows into a correlation, so this
module stays outside the autograd tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureStack
from .tensor import bilinear_resize_array


@dataclass
class HypercorrelationPyramid:
    """P stacked correlation blocks, one per pyramid layer, finest first.

    Each block has shape (|L_p|, H_p, W_p, H_p, W_p): per-level 4D
    correlations stacked along a leading channel axis. Spatial sizes are
    non-increasing across layers (equal sizes allowed: the toy layout has
    two stride-8 groups)."""

    blocks: list[np.ndarray]

    def __post_init__(self):
        sizes = [b.shape[1] * b.shape[2] for b in self.blocks]
        if any(a < b for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"pyramid layers must be ordered fine to coarse: {sizes}")

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    def query_size(self) -> tuple[int, int]:
        return self.blocks[0].shape[1:3]


def mask_project(mask: np.ndarray, level_shape: tuple[int, int, int]) -> np.ndarray:
    """Resize a binary HxW mask to a level's spatial size and replicate it
    across that level's channels. The resized mask is kept soft."""
    c, hl, wl = level_shape
    m = bilinear_resize_array(mask.astype(np.float32), hl, wl)
    return np.broadcast_to(m, (c, hl, wl))


def masked_feature(feat: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Hadamard product of a (C,H_l,W_l) feature map with the projected mask."""
    return feat * mask_project(mask, feat.shape)


def _unit_rows(flat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    out = np.zeros_like(flat)
    nz = norms[:, 0] > 0
    out[nz] = flat[nz] / norms[nz]
    return out


def correlation_4d(fq: np.ndarray, fs_masked: np.ndarray) -> np.ndarray:
    """ReLU'd pairwise cosine similarity between every query position and
    every masked-support position. Positions whose feature vector is zero
    (fully masked) contribute similarity 0."""
    if fq.shape != fs_masked.shape:
        raise ValueError(f"level shape mismatch {fq.shape} vs {fs_masked.shape}")
    c, h, w = fq.shape
    q = _unit_rows(fq.reshape(c, h * w).T.astype(np.float32))
    s = _unit_rows(fs_masked.reshape(c, h * w).T.astype(np.float32))
    corr = q @ s.T
    np.clip(corr, 0.0, 1.0, out=corr)
    return corr.reshape(h, w, h, w)


def build_pyramid(q: FeatureStack, s: FeatureStack,
                  mask: np.ndarray) -> HypercorrelationPyramid:
    """Cross-correlation pyramid between query features and mask-filtered
    support features, one stacked block per pyramid group."""
    if q.group_shapes() != s.group_shapes() or \
            [len(g) for g in q.groups] != [len(g) for g in s.groups]:
        raise ValueError("query/support pyramid groupings do not match")
    blocks = []
    for gq, gs in zip(q.groups, s.groups):
        per_level = []
        for lq, ls in zip(gq, gs):
            fs_m = masked_feature(s.levels[ls], mask)
            per_level.append(correlation_4d(q.levels[lq], fs_m))
        blocks.append(np.stack(per_level, axis=0))
    return HypercorrelationPyramid(blocks)


def self_correlation(q: FeatureStack, init_mask: np.ndarray) -> HypercorrelationPyramid:
    """Correlation of the query with itself, support side filtered by a
    predicted (or ground-truth) query mask. Identical pipeline to
    build_pyramid with the query standing in for the support."""
    return build_pyramid(q, q, init_mask)
