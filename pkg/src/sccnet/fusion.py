"""Mask fusion with eigensegments and K-shot voting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .spectral import Eigensegment

FUSION_MODES = ("none", "e1", "ebest")


@dataclass(frozen=True)
class FusionConfig:
    """`ebest` consults the ground truth and is reported as an oracle."""

    mode: str = "none"
    kshot_tau: float = 0.4

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"fusion mode must be one of {FUSION_MODES}")
        if not 0.0 < self.kshot_tau <= 1.0:
            raise ValueError("kshot_tau must lie in (0, 1]")

    @property
    def is_oracle(self) -> bool:
        return self.mode == "ebest"


def _as_bool(mask: np.ndarray) -> np.ndarray:
    return mask > 0.5 if mask.dtype != bool else mask


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Pixel-count IoU; two empty masks count as a perfect match."""
    if pred.shape != gt.shape:
        raise ValueError(f"mask size mismatch {pred.shape} vs {gt.shape}")
    p, g = _as_bool(pred), _as_bool(gt)
    inter = np.logical_and(p, g).sum()
    union = np.logical_or(p, g).sum()
    return 1.0 if union == 0 else float(inter) / float(union)


def fuse_or(pred: np.ndarray, seg: np.ndarray) -> np.ndarray:
    """Pixelwise OR of a predicted mask with an eigensegment."""
    if pred.shape != seg.shape:
        raise ValueError(f"mask size mismatch {pred.shape} vs {seg.shape}")
    return np.logical_or(_as_bool(pred), _as_bool(seg))


def select_best_eigensegment(segs: Sequence[Eigensegment],
                             gt: np.ndarray) -> Eigensegment:
    """Oracle choice: the eigensegment with the highest IoU against the
    ground truth; ties go to the lowest index."""
    if not segs:
        raise ValueError("no eigensegments to select from")
    best = segs[0]
    best_iou = mask_iou(best.hard, gt)
    for seg in segs[1:]:
        s_iou = mask_iou(seg.hard, gt)
        if s_iou > best_iou:
            best, best_iou = seg, s_iou
    return best


def kshot_vote(preds: Sequence[np.ndarray], tau: float = 0.4) -> np.ndarray:
    """Sum the K predictions, normalize by the maximum voting score, and
    keep pixels whose normalized score strictly exceeds tau. An all-zero
    vote map yields the empty mask."""
    if not preds:
        raise ValueError("kshot_vote needs at least one prediction")
    shape = preds[0].shape
    votes = np.zeros(shape, dtype=np.float64)
    for p in preds:
        if p.shape != shape:
            raise ValueError(f"mask size mismatch {p.shape} vs {shape}")
        votes += _as_bool(p)
    peak = votes.max()
    if peak == 0:
        return np.zeros(shape, dtype=bool)
    return votes / peak > tau
