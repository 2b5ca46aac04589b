"""Layer primitives: convolutions, pooling, normalization, activations.

All convolutions use cross-correlation semantics (no kernel flip), as in the
mainstream frameworks. Forward passes lower to a batched GEMM over an
im2col buffer laid out (N, C * K, out); the input gradient is folded back
with one strided add per kernel offset, so the reduction order is fixed and
results are bit-stable.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, make_result, unbroadcast

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _triple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, (tuple, list)):
        if len(v) != n:
            raise ValueError(f"expected {n} values, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * n


@dataclass(frozen=True)
class ConvSpec:
    stride: tuple[int, int] = (1, 1)
    dilation: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "stride", _triple(self.stride, 2))
        object.__setattr__(self, "dilation", _triple(self.dilation, 2))
        object.__setattr__(self, "padding", _triple(self.padding, 2))
        if min(self.stride) < 1 or min(self.dilation) < 1:
            raise ValueError(f"stride and dilation must be positive: {self}")
        if min(self.padding) < 0:
            raise ValueError(f"padding must be non-negative: {self}")


def conv_output_size(size: int, kernel: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def same_padding(size: int, kernel: int, stride: int = 1, dilation: int = 1) -> tuple[int, int]:
    """(before, after) zero padding giving an output extent of ceil(size / stride).

    Even effective kernels need one more pixel after than before.
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + dilation * (kernel - 1) + 1 - size, 0)
    return total // 2, total - total // 2


def _convnd(x: Tensor, w: Tensor, b: Tensor | None, stride, dilation, padding, name: str) -> Tensor:
    nd = w.ndim - 2
    axes = "NC" + "DHW"[3 - nd:]
    if x.ndim != nd + 2:
        raise ValueError(f"{name}: input must have rank {nd + 2} ({axes}), got shape {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"{name}: channel mismatch on axis 1 (C): input has {x.shape[1]}, kernel expects {w.shape[1]}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"{name}: bias shape {b.shape} != ({w.shape[0]},)")
    ks = w.shape[2:]
    out_sp = []
    for i in range(nd):
        o = conv_output_size(x.shape[2 + i], ks[i], stride[i], dilation[i], padding[i])
        if o < 1:
            raise ValueError(
                f"{name}: non-positive output extent {o} on axis {2 + i} ({axes[2 + i]}): "
                f"size {x.shape[2 + i]}, kernel {ks[i]}, stride {stride[i]}, "
                f"dilation {dilation[i]}, padding {padding[i]}"
            )
        out_sp.append(o)

    N, C = x.shape[:2]
    O = w.shape[0]
    xd = x.data
    if any(padding):
        xd = np.pad(xd, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    offsets = list(itertools.product(*(range(k) for k in ks)))

    def window(off):
        return (slice(None), slice(None)) + tuple(
            slice(off[i] * dilation[i], off[i] * dilation[i] + (out_sp[i] - 1) * stride[i] + 1, stride[i])
            for i in range(nd)
        )

    # cols: (N, C, *k, *out); each kernel offset is one strided block copy
    cols = np.empty((N, C, len(offsets)) + tuple(out_sp), dtype=xd.dtype)
    for j, off in enumerate(offsets):
        cols[:, :, j] = xd[window(off)]
    P = int(np.prod(out_sp))
    cols = cols.reshape(N, -1, P)
    w2 = w.data.reshape(O, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape((N, O, *out_sp))

    xshape, padded_shape = x.shape, xd.shape

    def backward(g):
        g2 = g.reshape(N, O, P)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        db = g2.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape((N, C, len(offsets)) + tuple(out_sp))
            dxp = np.zeros(padded_shape, dtype=g.dtype)
            for j, off in enumerate(offsets):
                dxp[window(off)] += dcols[:, :, j]
            crop = (slice(None), slice(None)) + tuple(
                slice(padding[i], padding[i] + xshape[2 + i]) for i in range(nd)
            )
            dx = dxp[crop]
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, lambda g: backward(g)[: len(parents)], name)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, spec: ConvSpec | None = None, *,
           stride=None, dilation=None, padding=None) -> Tensor:
    """2-D cross-correlation. x: (N, Cin, H, W), w: (Cout, Cin, K, K), b: (Cout,)."""
    if spec is None:
        spec = ConvSpec(stride or 1, dilation or 1, padding or 0)
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 4:
        raise ValueError(f"conv2d: kernel must be (Cout, Cin, K, K), got {w.shape}")
    return _convnd(x, w, b, spec.stride, spec.dilation, spec.padding, "conv2d")


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, padding=0) -> Tensor:
    """3-D cross-correlation, stride 1. x: (N, Cin, D, H, W), w: (Cout, Cin, K1, K2, K3)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 5:
        raise ValueError(f"conv3d: kernel must be (Cout, Cin, K1, K2, K3), got {w.shape}")
    return _convnd(x, w, b, (1, 1, 1), (1, 1, 1), _triple(padding, 3), "conv3d")


def pad2d(x: Tensor, pads: tuple[int, int, int, int]) -> Tensor:
    """Zero-pad the last two axes by (top, bottom, left, right)."""
    top, bottom, left, right = pads
    if min(pads) < 0:
        raise ValueError(f"negative padding {pads}")
    if not any(pads):
        return x
    H, W = x.shape[-2:]
    width = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    return make_result(
        np.pad(x.data, width), (x,),
        lambda g: (g[..., top:top + H, left:left + W],), "pad2d",
    )


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate every pixel into a factor x factor block."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(N, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "upsample")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.

    Odd extents are padded on the right/bottom by replicating the last row or
    column. Ties resolve to the first element of the window in row-major order.
    """
    N, C, H, W = x.shape
    xd = x.data
    ph, pw = H % 2, W % 2
    if ph or pw:
        xd = np.pad(xd, [(0, 0), (0, 0), (0, ph), (0, pw)], mode="edge")
    Hp, Wp = xd.shape[2:]
    win = xd.reshape(N, C, Hp // 2, 2, Wp // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Hp // 2, Wp // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gp = gw.reshape(N, C, Hp // 2, Wp // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Hp, Wp)
        if pw:
            gp[:, :, :, W - 1] += gp[:, :, :, W]
        if ph:
            gp[:, :, H - 1, :] += gp[:, :, H, :]
        return (gp[:, :, :H, :W],)

    return make_result(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray | None = None,
                running_var: np.ndarray | None = None, training: bool = True,
                momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as in the common frameworks).
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects (N, C, H, W), got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batchnorm2d: parameter length must equal channel count {C}")
    shape = (1, C, 1, 1)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise ValueError("batchnorm2d: training mode needs more than one value per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            running_var *= 1 - momentum
            running_var += momentum * var * m / (m - 1)
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gx = g * gamma.data.reshape(shape)
        if training:
            dx = inv.reshape(shape) * (
                gx - gx.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = gx * inv.reshape(shape)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward, "batchnorm2d")


def prelu(x: Tensor, a) -> Tensor:
    """max(0, x) + a * min(0, x) with one slope per channel (axis 1)."""
    x = as_tensor(x)
    a = as_tensor(a, x.dtype)
    if x.ndim >= 2 and a.ndim == 1:
        if a.shape[0] != x.shape[1]:
            raise ValueError(f"prelu: {a.shape[0]} slopes for {x.shape[1]} channels")
        shape = (1, a.shape[0]) + (1,) * (x.ndim - 2)
    else:
        shape = a.shape
    ad = a.data.reshape(shape)
    pos = x.data > 0
    out = np.where(pos, x.data, ad * x.data)

    def backward(g):
        da = unbroadcast(np.where(pos, 0, g * x.data), shape).reshape(a.shape)
        return np.where(pos, g, g * ad), da

    return make_result(out.astype(x.dtype), (x, a), backward, "prelu")
