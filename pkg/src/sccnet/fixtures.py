"""Synthetic blob corpora: rectangles of class-specific colors on a gray
background, grid-aligned so the toy extractor's stride-4 semantic grid sees
clean region boundaries. Used by the test suite, `export-fixtures`, and the
toy trainer."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

BG_COLOR = (0.50, 0.50, 0.50)

CLASS_NAMES = ["blob-red", "blob-green", "blob-blue", "blob-yellow"]
CLASS_COLORS = [
    (0.85, 0.15, 0.15),
    (0.15, 0.75, 0.20),
    (0.20, 0.30, 0.85),
    (0.90, 0.80, 0.15),
]

# weak distractor for the two-blob spectral fixture: close enough to the
# background that the affinity graph ties it to the background cluster
WEAK_COLORS = [
    (0.56, 0.52, 0.46),
    (0.46, 0.54, 0.52),
    (0.52, 0.46, 0.55),
]

ALIGN = 4  # semantic-grid stride of the toy extractor


def _sample_rect(rng: np.random.Generator, size: int, min_side: int, max_side: int,
                 occupied: list[tuple[int, int, int, int]], tries: int = 80):
    """Grid-aligned rectangle (y0,x0,y1,x1) not overlapping `occupied`."""
    for _ in range(tries):
        h = ALIGN * int(rng.integers(min_side // ALIGN, max_side // ALIGN + 1))
        w = ALIGN * int(rng.integers(min_side // ALIGN, max_side // ALIGN + 1))
        y0 = ALIGN * int(rng.integers(0, (size - h) // ALIGN + 1))
        x0 = ALIGN * int(rng.integers(0, (size - w) // ALIGN + 1))
        box = (y0, x0, y0 + h, x0 + w)
        if all(box[2] <= o[0] or box[0] >= o[2] or box[3] <= o[1] or box[1] >= o[3]
               for o in occupied):
            occupied.append(box)
            return box
    return None


def _paint(img: np.ndarray, box, color, rng, tint=0.02, noise=0.01):
    y0, x0, y1, x1 = box
    c = np.asarray(color) + rng.normal(scale=tint, size=3)
    img[y0:y1, x0:x1] = c + rng.normal(scale=noise, size=(y1 - y0, x1 - x0, 3))


def make_blob_image(size: int, target_class: int, rng: np.random.Generator,
                    distractor_class: int | None = None,
                    min_side: int = 16, max_side: int = 32):
    """One image + class-indexed mask. `target_class` is 1-based."""
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = np.asarray(BG_COLOR) + rng.normal(scale=0.015, size=3)
    img += rng.normal(scale=0.008, size=img.shape)
    mask = np.zeros((size, size), dtype=np.uint8)
    occupied: list = []
    box = _sample_rect(rng, size, min_side, max_side, occupied)
    _paint(img, box, CLASS_COLORS[target_class - 1], rng)
    mask[box[0]:box[2], box[1]:box[3]] = target_class
    if distractor_class is not None:
        dbox = _sample_rect(rng, size, min_side, max_side, occupied)
        if dbox is not None:
            _paint(img, dbox, CLASS_COLORS[distractor_class - 1], rng)
            mask[dbox[0]:dbox[2], dbox[1]:dbox[3]] = distractor_class
    return (np.clip(img, 0, 1) * 255).astype(np.uint8), mask


def generate_corpus(root, n_images: int = 48, n_classes: int = 4, size: int = 64,
                    seed: int = 0, distractor_prob: float = 0.25) -> Path:
    """Write a blob corpus in the dataset layout (images/, masks/, classes.txt)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text(
        "".join(f"{name}\n" for name in CLASS_NAMES[:n_classes]))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB10B]))
    for i in range(n_images):
        target = i % n_classes + 1
        distractor = None
        if n_classes > 1 and rng.random() < distractor_prob:
            others = [c for c in range(1, n_classes + 1) if c != target]
            distractor = int(rng.choice(others))
        img, mask = make_blob_image(size, target, rng, distractor)
        Image.fromarray(img).save(root / "images" / f"img_{i:03d}.png")
        Image.fromarray(mask).save(root / "masks" / f"img_{i:03d}.png")
    return root


def make_two_blob(seed: int, size: int = 64,
                  min_side: int = 16, max_side: int = 32):
    """Spectral fixture: one salient high-contrast blob (the ground truth)
    plus one weak blob whose color stays close to the background, so the
    leading non-constant eigenvector isolates the salient one."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x2B10B]))
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = np.asarray(BG_COLOR) + rng.normal(scale=0.01, size=3)
    img += rng.normal(scale=0.006, size=img.shape)
    occupied: list = []
    salient = _sample_rect(rng, size, min_side, max_side, occupied)
    weak = _sample_rect(rng, size, min_side, max_side, occupied)
    color = CLASS_COLORS[int(rng.integers(0, len(CLASS_COLORS)))]
    _paint(img, salient, color, rng, tint=0.01, noise=0.006)
    if weak is not None:
        wcolor = WEAK_COLORS[int(rng.integers(0, len(WEAK_COLORS)))]
        _paint(img, weak, wcolor, rng, tint=0.01, noise=0.006)
    gt = np.zeros((size, size), dtype=bool)
    gt[salient[0]:salient[2], salient[1]:salient[3]] = True
    return (np.clip(img, 0, 1) * 255).astype(np.uint8), gt
