"""Minimal dense tensor engine with reverse-mode gradients.

Backing store is a numpy array (float32 by default, float64 when the
finite-difference oracle re-runs a graph). Every op validates shapes,
checks its output for NaN/Inf, and appends a tape node when gradients
are being tracked. `backward` replays the tape in exact reverse
execution order and accumulates gradients additively at fan-outs.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericsError(FloatingPointError):
    """An op produced NaN or Inf, or numeric preconditions failed."""


_local = threading.local()


def _state():
    if not hasattr(_local, "tape"):
        _local.tape = []
        _local.grad_enabled = True
    return _local


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        st = _state()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state().grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise NumericsError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_affine(self, float(other), 0.0)
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __sub__(self, other):
        return add(self, scalar_affine(other, -1.0, 0.0))


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op} produced non-finite values")
    return arr


def _make(arr: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _finite(arr, op)
    out.grad = None
    st = _state()
    track = st.grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    if track:
        st.tape.append(_Node(out, tuple(inputs), vjp))
    return out


def tape_size() -> int:
    return len(_state().tape)


def clear_tape() -> None:
    _state().tape.clear()


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable
    requires_grad tensor's `.grad`. Clears the tape afterwards."""
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    st = _state()
    tape = st.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensor_of: dict[int, Tensor] = {id(loss): loss}
    try:
        for node in reversed(tape):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                    tensor_of[key] = t
        for key, g in grads.items():
            t = tensor_of[key]
            t.grad = g if t.grad is None else t.grad + g
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# elementwise ops


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    _check_same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "hadamard")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scalar_affine(x: Tensor, scale: float, shift: float) -> Tensor:
    """scale * x + shift, elementwise."""
    return _make(scale * x.data + shift, (x,), lambda g: (scale * g,), "scalar_affine")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), "relu")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise NumericsError("log of non-positive value")
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd > lo) & (xd < hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),), "permute")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0 (the channel axis of CxHxW maps)."""
    sizes = [p.shape[0] for p in parts]
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offs[i]:offs[i + 1]] for i in range(len(sizes)))

    return _make(np.concatenate([p.data for p in parts], axis=0),
                 tuple(parts), vjp, "concat_channels")


def take_channel(x: Tensor, idx: int) -> Tensor:
    """Select one leading-axis slice of a CxHxW tensor."""
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[idx] = g
        return (out,)

    return _make(x.data[idx].copy(), (x,), vjp, "take_channel")


def subsample(x: Tensor, axes: tuple[int, ...], step: int) -> Tensor:
    """Strided subsample (start 0) along the given axes."""
    if step == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "subsample")
    sl = [slice(None)] * x.data.ndim
    for ax in axes:
        sl[ax] = slice(None, None, step)
    sl = tuple(sl)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[sl] = g
        return (out,)

    return _make(x.data[sl].copy(), (x,), vjp, "subsample")


def mean_axes(x: Tensor, axes: tuple[int, ...], keepdims: bool = False) -> Tensor:
    n = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).astype(g.dtype) / n,)

    return _make(x.data.mean(axis=axes, keepdims=keepdims), (x,), vjp, "mean_axes")


def sum_all(x: Tensor) -> Tensor:
    shape, dt = x.shape, x.data.dtype

    def vjp(g):
        return (np.full(shape, g.reshape(()).item(), dtype=dt),)

    return _make(np.asarray(x.data.sum(), dtype=dt), (x,), vjp, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    return scalar_affine(sum_all(x), 1.0 / x.size, 0.0)


# ---------------------------------------------------------------------------
# bilinear resize (align-corners-false), separable matrix form

_resize_cache: dict[tuple[int, int, str], np.ndarray] = {}


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    key = (n_in, n_out, np.dtype(dtype).str)
    m = _resize_cache.get(key)
    if m is None:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        i0 = np.floor(src).astype(np.int64)
        w1 = src - i0
        i0c = np.clip(i0, 0, n_in - 1)
        i1c = np.clip(i0 + 1, 0, n_in - 1)
        m = np.zeros((n_out, n_in), dtype=np.float64)
        rows = np.arange(n_out)
        np.add.at(m, (rows, i0c), 1.0 - w1)
        np.add.at(m, (rows, i1c), w1)
        m = m.astype(dtype)
        _resize_cache[key] = m
    return m


def bilinear_resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the trailing two axes of an array (no gradient tracking)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize: target size must be positive")
    h, w = x.shape[-2], x.shape[-1]
    a = _resize_matrix(h, out_h, x.dtype)
    b = _resize_matrix(w, out_w, x.dtype)
    y = np.tensordot(x, a, axes=([x.ndim - 2], [1]))  # (..., W, out_h)
    y = np.tensordot(y, b, axes=([x.ndim - 2], [1]))  # (..., out_h, out_w)
    return np.ascontiguousarray(y)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners-false bilinear resize of the trailing two axes."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize: target size must be positive")
    h, w = x.shape[-2], x.shape[-1]
    dt = x.data.dtype
    a = _resize_matrix(h, out_h, dt)
    b = _resize_matrix(w, out_w, dt)
    nd = x.data.ndim

    def fwd(arr, ma, mb):
        y = np.tensordot(arr, ma, axes=([nd - 2], [1]))
        y = np.tensordot(y, mb, axes=([nd - 2], [1]))
        return np.ascontiguousarray(y)

    def vjp(g):
        return (fwd(g, a.T, b.T),)

    return _make(fwd(x.data, a, b), (x,), vjp, "bilinear_resize")


# ---------------------------------------------------------------------------
# convolution (cross-correlation convention)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp: padded (N, C, Hp, Wp) -> (N, C*kh*kw, ho*wo)
    n, c = xp.shape[0], xp.shape[1]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, ho, wo, kh, kw)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def _col2im(dcols: np.ndarray, xshape, kh: int, kw: int, stride: int, pad: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dc = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        ie = i + stride * ho
        for j in range(kw):
            je = j + stride * wo
            dxp[:, :, i:ie:stride, j:je:stride] += dc[:, :, i, j]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int | None = None) -> Tensor:
    """2D cross-correlation. `x` is (C,H,W) or batched (N,C,H,W);
    `kernel` is (Cout,Cin,kh,kw). Default pad keeps 'same' size at stride 1."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d: expected (N,C,H,W) input and (Co,Ci,kh,kw) kernel")
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d: channel mismatch input {c} vs kernel {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel sizes must be odd")
    if pad is None:
        pad = (kh - 1) // 2
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d: output size would be empty")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = kernel.data.reshape(co, ci * kh * kw)
    out = np.matmul(kmat, cols).reshape(n, co, ho, wo)
    if bias is not None:
        if bias.shape != (co,):
            raise ShapeError("conv2d: bias must have shape (Cout,)")
        out = out + bias.data.reshape(1, co, 1, 1)
    outd = out[0] if squeeze else out
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def vjp(g):
        gd = g[None] if squeeze else g
        gflat = gd.reshape(n, co, ho * wo)
        dk = np.einsum("nop,ncp->oc", gflat, cols).reshape(co, ci, kh, kw)
        dcols = np.matmul(kmat.T, gflat)
        dx = _col2im(dcols, (n, c, h, w), kh, kw, stride, pad, ho, wo)
        dx = dx[0] if squeeze else dx
        if bias is None:
            return (dx, dk)
        return (dx, dk, gd.sum(axis=(0, 2, 3)))

    return _make(outd, inputs, vjp, "conv2d")


# ---------------------------------------------------------------------------
# normalization / softmax


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int,
               eps: float = 1e-5) -> Tensor:
    """Group normalization over a (C,H,W) map with per-channel affine."""
    c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = x.data.reshape(groups, c // groups, h, w)
    mu = xg.mean(axis=(1, 2, 3), keepdims=True)
    var = xg.var(axis=(1, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(c, h, w)
    out = xhat * gamma.data.reshape(c, 1, 1) + beta.data.reshape(c, 1, 1)
    m = (c // groups) * h * w

    def vjp(g):
        dgamma = (g * xhat).sum(axis=(1, 2))
        dbeta = g.sum(axis=(1, 2))
        dxhat = (g * gamma.data.reshape(c, 1, 1)).reshape(groups, c // groups, h, w)
        xh = xhat.reshape(groups, c // groups, h, w)
        s1 = dxhat.sum(axis=(1, 2, 3), keepdims=True)
        s2 = (dxhat * xh).sum(axis=(1, 2, 3), keepdims=True)
        dx = inv * (dxhat - s1 / m - xh * s2 / m)
        return (dx.reshape(c, h, w), dgamma, dbeta)

    return _make(out, (x, gamma, beta), vjp, "group_norm")


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the leading channel axis of a 2xHxW map."""
    if x.data.ndim != 3 or x.shape[0] != 2:
        raise ShapeError(f"softmax_channels: expected 2xHxW, got {x.shape}")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def vjp(g):
        dot = (g * p).sum(axis=0, keepdims=True)
        return (p * (g - dot),)

    return _make(p, (x,), vjp, "softmax_channels")


# ---------------------------------------------------------------------------
# finite-difference gradient checking

def gradcheck(fn: Callable[[list[Tensor]], Tensor], arrays: Sequence[np.ndarray],
              step: float = 1e-3, rtol: float = 1e-3,
              max_coords: int | None = None, seed: int = 0) -> float:
    """Compare analytic gradients of `fn` against central finite differences.

    `fn` maps a list of parameter Tensors to a scalar loss built from the
    ops in this module. The whole check runs in float64 so the oracle is
    not limited by float32 rounding. Returns the worst relative error and
    raises NumericsError when it exceeds `rtol`.

    With `max_coords` set, only a random subset of coordinates per
    parameter is probed (needed for large parameter sets).
    """
    params = [Tensor(a.astype(np.float64), requires_grad=True, dtype=np.float64)
              for a in arrays]
    loss = fn(params)
    backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            with no_grad():
                lp = fn(params).item()
            flat[c] = orig - step
            with no_grad():
                lm = fn(params).item()
            flat[c] = orig
            num = (lp - lm) / (2 * step)
            a = an.reshape(-1)[c]
            rel = abs(a - num) / max(abs(a), abs(num), 1e-2)
            worst = max(worst, rel)
    if worst >= rtol:
        raise NumericsError(f"gradcheck failed: worst relative error {worst:.3e}")
    return worst
