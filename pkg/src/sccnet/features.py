"""Feature stacks and the SCCF binary feature-file format.

The file layout (all integers little-endian) is:

    magic   4 bytes  b"SCCF"
    version u16      1
    level_count u16
    semantic_level u16   index into levels, 0xFFFF when absent
    group_count u16
    per level: C u32, H u32, W u32, group u16
    payload: levels in order, contiguous float32 little-endian, row-major

The payload byte length must equal 4 * sum(C*H*W). Reading back a
written file reproduces the stack bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SCCF"
VERSION = 1
_NO_SEMANTIC = 0xFFFF
_NO_GROUP = 0xFFFF  # per-level group id for levels outside the pyramid

# Toy extractor layout: (stride, channels, levels) per pyramid group,
# plus one designated semantic level. Seed 42 is part of the contract.
TOY_SEED = 42
TOY_GROUPS = ((4, 16, 2), (8, 32, 2), (8, 64, 2))
TOY_SEMANTIC = (4, 64)


class FeatureFormatError(ValueError):
    """Feature file violates the SCCF layout."""


class BadMagicError(FeatureFormatError):
    pass


class VersionMismatchError(FeatureFormatError):
    pass


class TruncatedPayloadError(FeatureFormatError):
    pass


@dataclass
class FeatureStack:
    """Per-level feature maps of one image plus their pyramid grouping."""

    image_id: str
    levels: list[np.ndarray]  # each (C,H,W) float32, ascending depth
    groups: list[list[int]] = field(default_factory=list)
    semantic_level: int | None = None

    def validate(self) -> None:
        for i, lv in enumerate(self.levels):
            if lv.ndim != 3:
                raise FeatureFormatError(f"level {i} is not CxHxW")
            if lv.dtype != np.float32:
                raise FeatureFormatError(f"level {i} is not float32")
        seen: set[int] = set()
        for g in self.groups:
            shapes = {self.levels[i].shape[1:] for i in g}
            if len(shapes) > 1:
                raise FeatureFormatError(f"group {g} mixes spatial sizes {shapes}")
            seen.update(g)
        if self.semantic_level is not None and not (
                0 <= self.semantic_level < len(self.levels)):
            raise FeatureFormatError("semantic level index out of range")

    def group_shapes(self) -> list[tuple[int, int]]:
        return [self.levels[g[0]].shape[1:] for g in self.groups]

    def semantic(self) -> np.ndarray:
        if self.semantic_level is None:
            raise FeatureFormatError(f"{self.image_id}: no semantic level declared")
        return self.levels[self.semantic_level]


def write_features(fs: FeatureStack, path) -> None:
    fs.validate()
    group_of = {}
    for gi, g in enumerate(fs.groups):
        for li in g:
            group_of[li] = gi
    sem = _NO_SEMANTIC if fs.semantic_level is None else fs.semantic_level
    parts = [MAGIC, struct.pack("<HHHH", VERSION, len(fs.levels), sem, len(fs.groups))]
    for i, lv in enumerate(fs.levels):
        c, h, w = lv.shape
        parts.append(struct.pack("<IIIH", c, h, w, group_of.get(i, _NO_GROUP)))
    for lv in fs.levels:
        parts.append(np.ascontiguousarray(lv, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_features(path) -> FeatureStack:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    if len(raw) < 12:
        raise TruncatedPayloadError(f"{path}: truncated header")
    version, n_levels, sem, n_groups = struct.unpack_from("<HHHH", raw, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    off = 12
    dims: list[tuple[int, int, int]] = []
    group_ids: list[int] = []
    for _ in range(n_levels):
        if off + 14 > len(raw):
            raise TruncatedPayloadError(f"{path}: truncated level table")
        c, h, w, g = struct.unpack_from("<IIIH", raw, off)
        off += 14
        dims.append((c, h, w))
        group_ids.append(g)
    levels: list[np.ndarray] = []
    for c, h, w in dims:
        nbytes = 4 * c * h * w
        if off + nbytes > len(raw):
            raise TruncatedPayloadError(f"{path}: truncated payload")
        arr = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=off)
        levels.append(arr.reshape(c, h, w).copy())
        off += nbytes
    if off != len(raw):
        raise TruncatedPayloadError(f"{path}: {len(raw) - off} trailing bytes")
    groups: list[list[int]] = [[] for _ in range(n_groups)]
    for li, gi in enumerate(group_ids):
        if gi == _NO_GROUP:
            continue
        if gi >= n_groups:
            raise FeatureFormatError(f"{path}: level {li} in unknown group {gi}")
        groups[gi].append(li)
    fs = FeatureStack(image_id=Path(path).stem, levels=levels, groups=groups,
                      semantic_level=None if sem == _NO_SEMANTIC else sem)
    fs.validate()
    return fs


# ---------------------------------------------------------------------------
# deterministic toy feature extractor


def _block_pool(img: np.ndarray, stride: int) -> np.ndarray:
    """Average over non-overlapping stride x stride windows; (H,W,3) float."""
    h, w, c = img.shape
    return img.reshape(h // stride, stride, w // stride, stride, c).mean(axis=(1, 3))


def _as_float_rgb(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 RGB image, got shape {image.shape}")
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32)


_toy_bank_cache: dict[tuple, list[tuple[np.ndarray, np.ndarray]]] = {}


def _toy_bank() -> list[tuple[np.ndarray, np.ndarray]]:
    """Fixed-seed random Fourier projection per level (6 pyramid + 1 semantic)."""
    key = (TOY_SEED, TOY_GROUPS, TOY_SEMANTIC)
    bank = _toy_bank_cache.get(key)
    if bank is None:
        specs = [(ch,) for (_, ch, n) in TOY_GROUPS for _ in range(n)]
        specs.append((TOY_SEMANTIC[1],))
        seeds = np.random.SeedSequence(TOY_SEED).spawn(len(specs))
        bank = []
        for (ch,), ss in zip(specs, seeds):
            rng = np.random.default_rng(ss)
            proj = rng.normal(scale=1.0, size=(3, ch)).astype(np.float32)
            phase = rng.uniform(0.0, 2 * np.pi, size=ch).astype(np.float32)
            bank.append((proj, phase))
        _toy_bank_cache[key] = bank
    return bank


def toy_extract_features(image: np.ndarray, image_id: str = "") -> FeatureStack:
    """Deterministic backbone stand-in: block-pool the RGB image per level
    and apply a fixed random-Fourier filter bank pointwise. Pure function of
    the pixels; 3 pyramid groups (strides 4/8/8, two levels each) plus a
    64-channel semantic level at stride 4."""
    img = _as_float_rgb(image)
    h, w = img.shape[:2]
    if h % 8 or w % 8:
        raise ValueError(f"image size {h}x{w} not divisible by 8")
    bank = _toy_bank()
    levels: list[np.ndarray] = []
    groups: list[list[int]] = []
    bi = 0
    for stride, ch, n in TOY_GROUPS:
        pooled = _block_pool(img, stride)
        grp = []
        for _ in range(n):
            proj, phase = bank[bi]
            bi += 1
            z = np.cos(2 * np.pi * (pooled @ proj) + phase) * np.sqrt(2.0 / ch)
            grp.append(len(levels))
            levels.append(np.ascontiguousarray(z.transpose(2, 0, 1), dtype=np.float32))
        groups.append(grp)
    stride, ch = TOY_SEMANTIC
    proj, phase = bank[bi]
    pooled = _block_pool(img, stride)
    z = np.cos(2 * np.pi * (pooled @ proj) + phase) * np.sqrt(2.0 / ch)
    sem_idx = len(levels)
    levels.append(np.ascontiguousarray(z.transpose(2, 0, 1), dtype=np.float32))
    fs = FeatureStack(image_id=image_id, levels=levels, groups=groups,
                      semantic_level=sem_idx)
    fs.validate()
    return fs
