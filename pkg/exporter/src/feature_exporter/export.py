"""Batch export: one SCCF file per image plus a key=value manifest."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbones import build_backbone, extract_stack
from .sccf import write_sccf

IMAGE_SIZE = 256


def load_image(path) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    if img.size != (IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"{path}: expected {IMAGE_SIZE}x{IMAGE_SIZE}, "
                         f"got {img.width}x{img.height}")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1))


def export(image_dir, backbone: str, out_dir, weights: str = "auto",
           seed: int = 0) -> Path:
    """Export every PNG/JPG in `image_dir`; returns the manifest path."""
    image_dir = Path(image_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = sorted(p for p in image_dir.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not paths:
        raise ValueError(f"{image_dir}: no images to export")
    model, weights_tag = build_backbone(backbone, weights, seed)
    manifest_lines = [
        f"backbone={backbone}",
        f"weights={weights_tag}",
        f"image_size={IMAGE_SIZE}",
        "normalization=imagenet",
    ]
    stack_meta = None
    for path in paths:
        stack = extract_stack(backbone, model, load_image(path))
        levels = [lv.numpy().astype(np.float32) for lv in stack.levels]
        write_sccf(out_dir / f"{path.stem}.feat", levels, stack.groups,
                   stack.semantic_level)
        if stack_meta is None:
            stack_meta = stack
            manifest_lines.append(f"level_count={len(levels)}")
            manifest_lines.append(f"semantic_level={stack.semantic_level}")
            manifest_lines.append(f"group_count={len(stack.groups)}")
            group_of = {li: gi for gi, g in enumerate(stack.groups) for li in g}
            for i, (name, lv) in enumerate(zip(stack.level_names, levels)):
                c, h, w = lv.shape
                grp = group_of.get(i, "none")
                manifest_lines.append(
                    f"level.{i}={name} C={c} H={h} W={w} group={grp}")
    manifest_lines.append(f"images={len(paths)}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("".join(line + "\n" for line in manifest_lines))
    return manifest
