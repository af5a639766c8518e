"""The learnable matching network.

Two branches (cross-matching and self-matching) share one architecture:
center-pivot 4D convolution blocks squeeze each hypercorrelation pyramid
layer's support dimensions, the squeezed layers are merged coarse-to-fine,
and a small 2D decoder emits a two-channel mask. A 1x1 merge head combines
the branches. Training is plain SGD with momentum, weight decay, and a
polynomial learning-rate schedule.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .correlation import HypercorrelationPyramid, build_pyramid, self_correlation
from .features import FeatureStack
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SCCP"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    """Width constants. The defaults squeeze each pyramid layer with two
    stride-2 center-pivot blocks (16 then 32 channels), pool the remaining
    support pixels to eps x eps, and finish with 2D convs 32->64->128."""

    block_channels: tuple[int, int] = (16, 32)
    tail_channels: tuple[int, int] = (64, 128)
    decoder_channels: tuple[int, int] = (64, 32)
    gn_groups: int = 4
    kernel: int = 3
    support_eps: int = 2


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 9e-4
    weight_decay: float = 5e-4
    momentum: float = 0.9
    poly_power: float = 0.9
    lambda_aux: float = 1.0


@dataclass
class MatchingModel:
    params: dict[str, Tensor]
    group_sizes: list[int]
    arch: ArchConfig
    single_branch: bool = False

    def branch(self, name: str) -> str:
        if name not in ("cross", "self"):
            raise ValueError(f"unknown branch {name!r}")
        return "cross" if self.single_branch else name

    def named(self, key: str) -> Tensor:
        return self.params[key]


@dataclass
class ForwardResult:
    """All intermediate maps of one 1-shot forward pass. Probability maps
    are (2,H,W) float32 arrays; masks are binary float32 (H,W)."""

    prob_init: np.ndarray
    mask_init: np.ndarray
    prob_self: np.ndarray
    prob_merge: np.ndarray
    mask_merge: np.ndarray


@dataclass
class TrainEpisode:
    query: FeatureStack
    query_mask: np.ndarray
    support: FeatureStack
    support_mask: np.ndarray
    image_hw: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.image_hw == (0, 0):
            self.image_hw = self.query_mask.shape


# ---------------------------------------------------------------------------
# parameter construction


def _he(rng, shape, fan_in):
    return rng.normal(scale=np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


def init_model(group_sizes: Sequence[int], seed: int = 0,
               single_branch: bool = False,
               arch: ArchConfig = ArchConfig()) -> MatchingModel:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CC]))
    k = arch.kernel
    params: dict[str, Tensor] = {}

    def add(name, arr):
        params[name] = Tensor(arr, requires_grad=True)

    branches = ("cross",) if single_branch else ("cross", "self")
    for br in branches:
        for p, in_ch in enumerate(group_sizes):
            widths = (in_ch,) + arch.block_channels
            for b in range(len(arch.block_channels)):
                cin, cout = widths[b], widths[b + 1]
                pre = f"{br}.l{p}.b{b}"
                add(f"{pre}.kq", _he(rng, (cout, cin, k, k), cin * k * k))
                add(f"{pre}.ks", _he(rng, (cout, cin, k, k), cin * k * k))
                add(f"{pre}.bias", np.zeros(cout, np.float32))
                add(f"{pre}.gamma", np.ones(cout, np.float32))
                add(f"{pre}.beta", np.zeros(cout, np.float32))
        widths = (arch.block_channels[-1],) + arch.tail_channels
        for t in range(len(arch.tail_channels)):
            cin, cout = widths[t], widths[t + 1]
            pre = f"{br}.tail{t}"
            add(f"{pre}.k", _he(rng, (cout, cin, k, k), cin * k * k))
            add(f"{pre}.bias", np.zeros(cout, np.float32))
            add(f"{pre}.gamma", np.ones(cout, np.float32))
            add(f"{pre}.beta", np.zeros(cout, np.float32))
        widths = (arch.tail_channels[-1],) + arch.decoder_channels + (2,)
        for d_ in range(len(widths) - 1):
            cin, cout = widths[d_], widths[d_ + 1]
            scale = 0.01 if d_ == len(widths) - 2 else None
            kern = _he(rng, (cout, cin, k, k), cin * k * k) if scale is None else \
                rng.normal(scale=scale, size=(cout, cin, k, k)).astype(np.float32)
            add(f"{br}.dec{d_}.k", kern)
            add(f"{br}.dec{d_}.bias", np.zeros(cout, np.float32))
    # merge starts near "average the two branches" and learns from there
    mk = rng.normal(scale=0.02, size=(2, 4, 1, 1)).astype(np.float32)
    mk[0, 0] += 0.5
    mk[0, 2] += 0.5
    mk[1, 1] += 0.5
    mk[1, 3] += 0.5
    add("merge.k", mk)
    add("merge.bias", np.zeros(2, np.float32))
    return MatchingModel(params=params, group_sizes=list(group_sizes), arch=arch,
                         single_branch=single_branch)


# ---------------------------------------------------------------------------
# center-pivot 4D convolution


def center_pivot_conv4d(x: Tensor, kq: Tensor, ks: Tensor, bias: Tensor | None = None,
                        query_stride: int = 1, support_stride: int = 1) -> Tensor:
    """Sparse 4D convolution: a 2D conv over the query dims evaluated at the
    support-center taps plus a 2D conv over the support dims evaluated at
    the query-center taps. Strides subsample the corresponding dims; with
    same-padding the center taps land exactly on the strided grid."""
    if x.data.ndim != 5:
        raise T.ShapeError(f"center_pivot_conv4d expects 5D input, got {x.shape}")
    if kq.shape[2] % 2 == 0 or kq.shape[3] % 2 == 0 or \
            ks.shape[2] % 2 == 0 or ks.shape[3] % 2 == 0:
        raise T.ShapeError("center-pivot kernels must be odd-sized")
    c, hq, wq, hs, ws = x.shape
    co = kq.shape[0]

    # path A: conv over query dims at the support-center slices
    xa = T.subsample(x, (3, 4), support_stride)
    hs2, ws2 = xa.shape[3], xa.shape[4]
    xa = T.reshape(T.permute(xa, (3, 4, 0, 1, 2)), (hs2 * ws2, c, hq, wq))
    ya = T.conv2d(xa, kq, bias, stride=query_stride)
    hq2, wq2 = ya.shape[2], ya.shape[3]
    ya = T.permute(T.reshape(ya, (hs2, ws2, co, hq2, wq2)), (2, 3, 4, 0, 1))

    # path B: conv over support dims at the query-center slices
    xb = T.subsample(x, (1, 2), query_stride)
    xb = T.reshape(T.permute(xb, (1, 2, 0, 3, 4)), (hq2 * wq2, c, hs, ws))
    yb = T.conv2d(xb, ks, stride=support_stride)
    yb = T.permute(T.reshape(yb, (hq2, wq2, co, hs2, ws2)), (2, 0, 1, 3, 4))
    return T.add(ya, yb)


def _gn4d(x: Tensor, gamma: Tensor, beta: Tensor, groups: int) -> Tensor:
    c, hq, wq, hs, ws = x.shape
    flat = T.reshape(x, (c, hq * wq, hs * ws))
    return T.reshape(T.group_norm(flat, gamma, beta, groups), (c, hq, wq, hs, ws))


def _pool_support(x: Tensor, th: int, tw: int) -> Tensor:
    """Average-pool the support dims down to (th, tw)."""
    c, hq, wq, hs, ws = x.shape
    if hs == th and ws == tw:
        return x
    if hs % th or ws % tw:
        raise T.ShapeError(f"support dims {hs}x{ws} not divisible by {th}x{tw}")
    fh, fw = hs // th, ws // tw
    x = T.reshape(x, (c, hq, wq, th, fh, tw, fw))
    return T.mean_axes(x, (4, 6))


def _resize_query(x: Tensor, out_h: int, out_w: int) -> Tensor:
    c, hq, wq, hs, ws = x.shape
    flat = T.reshape(T.permute(x, (0, 3, 4, 1, 2)), (c * hs * ws, hq, wq))
    flat = T.bilinear_resize(flat, out_h, out_w)
    return T.permute(T.reshape(flat, (c, hs, ws, out_h, out_w)), (0, 3, 4, 1, 2))


# ---------------------------------------------------------------------------
# network stages


def squeeze_encoder(pyr: HypercorrelationPyramid, model: MatchingModel,
                    branch: str = "cross") -> Tensor:
    """Squeeze the pyramid into a condensed (tail_channels[-1], H1, W1) map."""
    br = model.branch(branch)
    arch = model.arch
    if pyr.num_layers != len(model.group_sizes):
        raise T.ShapeError("pyramid layer count does not match the model")
    squeezed = []
    for p, block in enumerate(pyr.blocks):
        x = Tensor(block)
        for b in range(len(arch.block_channels)):
            pre = f"{br}.l{p}.b{b}"
            x = center_pivot_conv4d(x, model.named(f"{pre}.kq"),
                                    model.named(f"{pre}.ks"),
                                    model.named(f"{pre}.bias"),
                                    support_stride=2)
            x = _gn4d(x, model.named(f"{pre}.gamma"), model.named(f"{pre}.beta"),
                      arch.gn_groups)
            x = T.relu(x)
        squeezed.append(x)
    # coarse layers can squeeze below eps; merge at the common support size
    th = min(arch.support_eps, *(x.shape[3] for x in squeezed))
    tw = min(arch.support_eps, *(x.shape[4] for x in squeezed))
    squeezed = [_pool_support(x, th, tw) for x in squeezed]
    merged = squeezed[-1]
    for p in range(len(squeezed) - 2, -1, -1):
        target = squeezed[p]
        up = _resize_query(merged, target.shape[1], target.shape[2])
        merged = T.add(up, target)
    z = T.mean_axes(merged, (3, 4))
    for t in range(len(arch.tail_channels)):
        pre = f"{br}.tail{t}"
        z = T.conv2d(z, model.named(f"{pre}.k"), model.named(f"{pre}.bias"))
        z = T.group_norm(z, model.named(f"{pre}.gamma"), model.named(f"{pre}.beta"),
                         arch.gn_groups)
        z = T.relu(z)
    return z


def decoder_logits(z: Tensor, model: MatchingModel, branch: str,
                   out_hw: tuple[int, int]) -> Tensor:
    """2D conv / ReLU / upsample chain ending in a 2-channel logit map at
    full image resolution."""
    br = model.branch(branch)
    n_dec = len(model.arch.decoder_channels)
    x = z
    for d_ in range(n_dec):
        x = T.conv2d(x, model.named(f"{br}.dec{d_}.k"),
                     model.named(f"{br}.dec{d_}.bias"))
        x = T.relu(x)
        x = T.bilinear_resize(x, x.shape[1] * 2, x.shape[2] * 2)
    x = T.conv2d(x, model.named(f"{br}.dec{n_dec}.k"),
                 model.named(f"{br}.dec{n_dec}.bias"))
    if x.shape[1:] != tuple(out_hw):
        x = T.bilinear_resize(x, out_hw[0], out_hw[1])
    return x


def argmax_mask(probs: np.ndarray) -> np.ndarray:
    """Foreground where the channel-1 probability strictly wins; exact ties
    resolve to background."""
    return (probs[1] > probs[0]).astype(np.float32)


def merge_heads(logits_self: Tensor, logits_cross: Tensor,
                model: MatchingModel) -> Tensor:
    """Concatenate the two branches' two-channel maps (self first), reduce
    with the 1x1 merge kernel, and normalize."""
    if logits_self.shape != logits_cross.shape:
        raise T.ShapeError("merge_heads: branch map shapes differ")
    stacked = T.concat_channels([logits_self, logits_cross])
    out = T.conv2d(stacked, model.named("merge.k"), model.named("merge.bias"))
    return T.softmax_channels(out)


# ---------------------------------------------------------------------------
# losses


def bce_foreground(probs: Tensor, gt_mask: np.ndarray, clamp_at: float = 1e-7) -> Tensor:
    """Mean binary cross entropy of the foreground channel vs a binary mask."""
    gt = gt_mask.astype(probs.data.dtype)
    fg = T.clamp(T.take_channel(probs, 1), clamp_at, 1.0)
    bg = T.clamp(T.take_channel(probs, 0), clamp_at, 1.0)
    pos = T.hadamard(Tensor(gt, dtype=probs.data.dtype), T.log(fg))
    neg = T.hadamard(Tensor(1.0 - gt, dtype=probs.data.dtype), T.log(bg))
    return T.scalar_affine(T.mean_all(T.add(pos, neg)), -1.0, 0.0)


def loss_main(prob_merge: Tensor, gt_mask: np.ndarray) -> Tensor:
    return bce_foreground(prob_merge, gt_mask)


def loss_aux(query: FeatureStack, gt_mask: np.ndarray, model: MatchingModel,
             image_hw: tuple[int, int]) -> Tensor:
    """Self-branch BCE when the self pyramid is driven by the ground-truth
    mask. Training-only (requires the query annotation)."""
    pyr = self_correlation(query, gt_mask.astype(np.float32))
    z = squeeze_encoder(pyr, model, "self")
    probs = T.softmax_channels(decoder_logits(z, model, "self", image_hw))
    return bce_foreground(probs, gt_mask)


# ---------------------------------------------------------------------------
# full forward pass


def forward_full(query: FeatureStack, support: FeatureStack,
                 support_mask: np.ndarray, model: MatchingModel,
                 image_hw: tuple[int, int],
                 self_mask_override: np.ndarray | None = None):
    """1-shot pipeline: cross branch -> initial mask, self branch driven by
    the detached initial mask, merge head. Returns (ForwardResult, tensor)
    where the tensor is the merge-head output for the loss.

    `self_mask_override` freezes the self-branch input mask (gradient
    checking differentiates the loss with the detached mask held fixed,
    which is exactly the function a training step sees)."""
    pyr_cross = build_pyramid(query, support, support_mask.astype(np.float32))
    z_cross = squeeze_encoder(pyr_cross, model, "cross")
    logits_cross = decoder_logits(z_cross, model, "cross", image_hw)
    prob_init = T.softmax_channels(logits_cross)
    mask_init = argmax_mask(prob_init.data)

    # the argmax mask enters the self branch as data, never as a graph node
    self_mask = mask_init if self_mask_override is None else self_mask_override
    pyr_self = self_correlation(query, self_mask)
    z_self = squeeze_encoder(pyr_self, model, "self")
    logits_self = decoder_logits(z_self, model, "self", image_hw)
    prob_self = T.softmax_channels(logits_self)

    prob_merge = merge_heads(logits_self, logits_cross, model)
    result = ForwardResult(
        prob_init=prob_init.data.copy(),
        mask_init=mask_init,
        prob_self=prob_self.data.copy(),
        prob_merge=prob_merge.data.copy(),
        mask_merge=argmax_mask(prob_merge.data),
    )
    return result, prob_merge


def predict(query: FeatureStack, support: FeatureStack, support_mask: np.ndarray,
            model: MatchingModel, image_hw: tuple[int, int]) -> ForwardResult:
    with T.no_grad():
        result, _ = forward_full(query, support, support_mask, model, image_hw)
    return result


# ---------------------------------------------------------------------------
# training


def episode_loss(ep: TrainEpisode, model: MatchingModel,
                 lambda_aux: float = 1.0) -> Tensor:
    _, prob_merge = forward_full(ep.query, ep.support, ep.support_mask, model,
                                 ep.image_hw)
    main = loss_main(prob_merge, ep.query_mask)
    if lambda_aux == 0.0:
        return main
    aux = loss_aux(ep.query, ep.query_mask, model, ep.image_hw)
    return T.add(main, T.scalar_affine(aux, lambda_aux, 0.0))


def train_toy(episodes: Sequence[TrainEpisode], model: MatchingModel,
              cfg: TrainConfig = TrainConfig()) -> np.ndarray:
    """SGD over a fixed episode stream (one step per episode). Returns the
    per-episode loss curve; the model is updated in place. Deterministic
    given the model init and episode order."""
    velocity = {k: np.zeros_like(p.data) for k, p in model.params.items()}
    total = len(episodes)
    losses = np.zeros(total, dtype=np.float64)
    for it, ep in enumerate(episodes):
        try:
            loss = episode_loss(ep, model, cfg.lambda_aux)
            value = loss.item()
            T.backward(loss)
        except T.NumericsError as exc:
            T.clear_tape()
            raise TrainingDiverged(
                f"non-finite loss at episode {it + 1}/{total}: {exc}") from exc
        if not np.isfinite(value):
            T.clear_tape()
            raise TrainingDiverged(f"loss diverged at episode {it + 1}/{total}")
        losses[it] = value
        lr_t = cfg.lr * (1.0 - it / total) ** cfg.poly_power
        for key, p in model.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = velocity[key]
            v *= cfg.momentum
            v += g + cfg.weight_decay * p.data
            p.data = (p.data - lr_t * v).astype(np.float32)
            p.grad = None
    return losses


# ---------------------------------------------------------------------------
# checkpoints ("SCCP": named tensor table, same container discipline as SCCF)


def save_checkpoint(model: MatchingModel, path) -> None:
    names = list(model.params)
    flags = 1 if model.single_branch else 0
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<HHI", CHECKPOINT_VERSION, flags, len(names))]
    for name in names:
        enc = name.encode()
        arr = model.params[name].data
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<H", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in names:
        parts.append(np.ascontiguousarray(model.params[name].data, "<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, arch: ArchConfig = ArchConfig()) -> MatchingModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    version, flags, count = struct.unpack_from("<HHI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<H", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        entries.append((name, shape))
    params: dict[str, Tensor] = {}
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, "<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
        params[name] = Tensor(arr, requires_grad=True)
    group_sizes = []
    p = 0
    while f"cross.l{p}.b0.kq" in params:
        group_sizes.append(params[f"cross.l{p}.b0.kq"].shape[1])
        p += 1
    return MatchingModel(params=params, group_sizes=group_sizes, arch=arch,
                         single_branch=bool(flags & 1))
