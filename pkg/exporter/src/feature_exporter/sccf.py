"""Standalone writer for the SCCF feature-file container.

Layout (little-endian):

    magic   4 bytes  b"SCCF"
    version u16      1
    level_count u16
    semantic_level u16   index into levels, 0xFFFF when absent
    group_count u16
    per level: C u32, H u32, W u32, group u16 (0xFFFF = outside every group)
    payload: levels in order, contiguous float32, row-major

Implemented independently of the consumer so the byte layout stays an
actual contract between the two sides.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SCCF"
VERSION = 1
NO_SEMANTIC = 0xFFFF
NO_GROUP = 0xFFFF


def write_sccf(path, levels: list[np.ndarray], groups: list[list[int]],
               semantic_level: int | None) -> None:
    group_of: dict[int, int] = {}
    for gi, group in enumerate(groups):
        for li in group:
            group_of[li] = gi
    sem = NO_SEMANTIC if semantic_level is None else semantic_level
    parts = [MAGIC, struct.pack("<HHHH", VERSION, len(levels), sem, len(groups))]
    for i, arr in enumerate(levels):
        if arr.ndim != 3:
            raise ValueError(f"level {i}: expected CxHxW, got shape {arr.shape}")
        c, h, w = arr.shape
        parts.append(struct.pack("<IIIH", c, h, w, group_of.get(i, NO_GROUP)))
    for arr in levels:
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))
