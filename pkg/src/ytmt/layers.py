"""Convolution, pooling, interpolation and attention building blocks."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Parameter, Tensor, make_result


class Module:
    """Minimal container that discovers parameters from its attributes.

    Attributes holding a :class:`Parameter`, a :class:`Module` or a list of
    modules are traversed in assignment order, which fixes parameter names
    and ordering for checkpoints and optimizers.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, value in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.shape != tuple(value.shape):
                raise DimensionError(f"{name}: checkpoint shape {value.shape} != {p.shape}")
            p.data = np.array(value, dtype=p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


# -- functional primitives -------------------------------------------------
def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op} expects (N, C, H, W), got shape {x.shape}")


def _im2col(xp: np.ndarray, k: int, H: int, W: int) -> np.ndarray:
    """Gather (N, C, H+k-1, W+k-1) into (N, k*k*C, H*W) patch columns."""
    N, C = xp.shape[:2]
    cols = np.empty((N, k, k, C, H, W), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + H, j : j + W]
    return cols.reshape(N, k * k * C, H * W)


def _col2im(gcols: np.ndarray, C: int, k: int, H: int, W: int) -> np.ndarray:
    N = gcols.shape[0]
    p = k // 2
    gcols = gcols.reshape(N, k, k, C, H, W)
    gxp = np.zeros((N, C, H + 2 * p, W + 2 * p), dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + H, j : j + W] += gcols[:, i, j]
    return gxp[:, :, p : p + H, p : p + W]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 'same' cross-correlation with zero padding.

    ``weight`` is (out, in, k, k) with odd ``k``; ``bias`` is (out,).
    """
    _require_4d(x, "conv2d")
    O, C, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d needs an odd square kernel, got {weight.shape}")
    N, Cx, H, W = x.shape
    if Cx != C:
        raise DimensionError(f"conv2d: input has {Cx} channels, layer expects {C}")
    p = k // 2
    if k == 1:
        cols = x.data.reshape(N, C, H * W)
    else:
        cols = _im2col(np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))), k, H, W)
    # weight columns ordered (ki, kj, c) to match the patch layout
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(O, k * k * C)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(N, O, H, W)

    def backward(g):
        gm = g.reshape(N, O, H * W)
        gw = gb = gx = None
        if weight.requires_grad:
            acc = gm[0] @ cols[0].T
            for n in range(1, N):
                acc += gm[n] @ cols[n].T
            gw = np.ascontiguousarray(acc.reshape(O, k, k, C).transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gm)
            gx = gcols.reshape(N, C, H, W) if k == 1 else _col2im(gcols, C, k, H, W)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, backward, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first window element."""
    _require_4d(x, "maxpool2")
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2 needs even spatial extents, got {x.shape}")
    win = x.data.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((N, C, H // 2, W // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W)
        return (gx,)

    return make_result(out, (x,), backward, "maxpool2")


def avgpool2(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2.

    For even extents this coincides with bilinear down-sampling by a factor
    of two under half-pixel (align-corners-false) sampling.
    """
    _require_4d(x, "avgpool2")
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"avgpool2 needs even spatial extents, got {x.shape}")
    out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(g):
        q = (g * x.dtype.type(0.25))[:, :, :, None, :, None]
        return (np.broadcast_to(q, (N, C, H // 2, 2, W // 2, 2)).reshape(N, C, H, W),)

    return make_result(out.astype(x.dtype, copy=False), (x,), backward, "avgpool2")


def _pad_to_even(x: Tensor) -> Tensor:
    return T.pad_edge(x, x.shape[2] % 2, x.shape[3] % 2)


def downsample_max(x: Tensor) -> Tensor:
    """Max-pool by two, edge-replicating an odd last row/column first."""
    return maxpool2(_pad_to_even(x))


def downsample_bilinear(x: Tensor) -> Tensor:
    """Bilinear halving, edge-replicating an odd last row/column first."""
    return avgpool2(_pad_to_even(x))


def _up2_axis(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    left = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    right = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    even = 0.75 * a + 0.25 * left
    odd = 0.75 * a + 0.25 * right
    out = np.stack([even, odd], axis=-1).reshape(a.shape[:-1] + (2 * a.shape[-1],))
    return np.moveaxis(out, -1, axis)


def _up2_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    gx = 0.75 * (ge + go)
    gx[..., :-1] += 0.25 * ge[..., 1:]
    gx[..., 0] += 0.25 * ge[..., 0]
    gx[..., 1:] += 0.25 * go[..., :-1]
    gx[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(gx, -1, axis)


def bilinear_up2(x: Tensor) -> Tensor:
    """Double H and W with bilinear weights (align_corners=False, edge clamped)."""
    _require_4d(x, "bilinear_up2")
    dtype = x.dtype
    out = _up2_axis(_up2_axis(x.data, 2), 3).astype(dtype, copy=False)

    def backward(g):
        return (_up2_axis_adjoint(_up2_axis_adjoint(g, 3), 2).astype(dtype, copy=False),)

    return make_result(np.ascontiguousarray(out), (x,), backward, "bilinear_up2")


def upsample_to(x: Tensor, height: int, width: int) -> Tensor:
    """Bilinear doubling followed by a crop to (height, width)."""
    up = bilinear_up2(x)
    if up.shape[2] == height and up.shape[3] == width:
        return up
    return T.getitem(up, (slice(None), slice(None), slice(0, height), slice(0, width)))


def global_avg_pool(x: Tensor) -> Tensor:
    return T.mean(x, axis=(2, 3), keepdims=True)


# -- parameterised layers --------------------------------------------------
class Conv2d(Module):
    """Same-size, stride-1 convolution with Kaiming fan-in initialisation."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if in_channels < 1 or out_channels < 1:
            raise ValueError("channel counts must be positive")
        if kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {kernel}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        fan_in = in_channels * kernel * kernel
        w = rng.standard_normal((out_channels, in_channels, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        self.weight = Parameter(w.astype(dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 4 and x.shape[1] != self.in_channels:
            raise DimensionError(
                f"Conv2d: input has {x.shape[1]} channels, layer expects {self.in_channels}"
            )
        return conv2d(x, self.weight, self.bias)


class AttentionUnit(Module):
    """Channel attention followed by pixel attention.

    channel gate: global mean -> 1x1 -> ReLU -> 1x1 -> sigmoid, shape (N, C, 1, 1)
    pixel gate:   1x1 -> ReLU -> 1x1 -> sigmoid, shape (N, 1, H, W)
    """

    # The channel gate reads globally pooled features, which barely vary
    # between images, so a very narrow ReLU layer there is easily dead for
    # every input.  Its width never drops below this floor.
    min_hidden = 8

    def __init__(self, channels: int, reduction: int = 8,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = min(channels, max(self.min_hidden, channels // reduction))
        self.channels = channels
        self.ca1 = Conv2d(channels, hidden, 1, rng, dtype)
        self.ca2 = Conv2d(hidden, channels, 1, rng, dtype)
        self.pa1 = Conv2d(channels, hidden, 1, rng, dtype)
        self.pa2 = Conv2d(hidden, 1, 1, rng, dtype)

    def channel_gate(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.ca2(T.relu(self.ca1(global_avg_pool(x)))))

    def pixel_gate(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.pa2(T.relu(self.pa1(x))))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"AttentionUnit({self.channels}) got input of shape {x.shape}")
        xc = x * self.channel_gate(x)
        return xc * self.pixel_gate(xc)

