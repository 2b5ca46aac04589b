"""Functional building blocks beyond plain convolution: per-image generated
kernels, temporal (slice-axis) convolution and the ConvLSTM cell."""

from __future__ import annotations

import numpy as np

from .configs import TemporalConvSpec
from .ops import conv2d, conv3d, pad2d, same_padding
from .tensor import Tensor, as_tensor, concat, getitem, sigmoid, tanh


def same_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, dilation: int = 1) -> Tensor:
    """conv2d with zero padding chosen so the output extent is ceil(size / stride)."""
    k_h, k_w = w.shape[-2:]
    top, bottom = same_padding(x.shape[2], k_h, stride, dilation)
    left, right = same_padding(x.shape[3], k_w, stride, dilation)
    return conv2d(pad2d(x, (top, bottom, left, right)), w, b, stride=stride, dilation=dilation)


def generated_kernel_conv(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                          dilation: int = 1) -> Tensor:
    """Convolution whose kernel is itself a network output.

    ``w`` is either one bank (Cout, Cin, K, K) shared by the batch, or one
    bank per image (N, Cout, Cin, K, K). Both operands stay on the tape, so
    backward yields dx and dw.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim == 4:
        return same_conv2d(x, w, b, stride, dilation)
    if w.ndim != 5 or w.shape[0] != x.shape[0]:
        raise ValueError(f"per-image kernels must be (N={x.shape[0]}, Cout, Cin, K, K), got {w.shape}")
    outs = [same_conv2d(getitem(x, slice(n, n + 1)), getitem(w, n), b, stride, dilation) for n in range(x.shape[0])]
    return outs[0] if len(outs) == 1 else concat(outs, axis=0)


def temporal_conv(x: Tensor, weights: Tensor, bias: Tensor | None = None,
                  spec: TemporalConvSpec | None = None) -> Tensor:
    """3-D cross-correlation over (T, H, W) of a slice stack.

    x: (N, T, Cin, H, W). weights: (Cout, Cin, K1, K2, K3) for per-channel
    kernels, or (Cout, K1, K2, K3) to share one kernel across input
    channels. Paddings are (K - 1) / 2 per axis so T, H and W are kept.
    """
    x, weights = as_tensor(x), as_tensor(weights)
    if x.ndim != 5:
        raise ValueError(f"temporal_conv expects (N, T, Cin, H, W), got {x.shape}")
    cin = x.shape[2]
    if weights.ndim == 4:
        cout = weights.shape[0]
        one = weights.reshape(cout, 1, *weights.shape[1:])
        weights = one if cin == 1 else concat([one] * cin, axis=1)
    if weights.ndim != 5 or weights.shape[1] != cin:
        raise ValueError(f"temporal kernel {weights.shape} does not match {cin} input channels")
    kernel = weights.shape[2:]
    if any(k % 2 == 0 for k in kernel):
        raise ValueError(f"temporal kernel extents must be odd for symmetric padding, got {kernel}")
    if spec is not None and tuple(spec.kernel) != tuple(kernel):
        raise ValueError(f"weights {kernel} disagree with spec kernel {spec.kernel}")
    padding = tuple((k - 1) // 2 for k in kernel)
    y = conv3d(x.transpose(0, 2, 1, 3, 4), weights, bias, padding=padding)
    return y.transpose(0, 2, 1, 3, 4)


def conv_lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One ConvLSTM step; gates packed as i, f, o, g along the output channels.

    w: (4 Ch, Cin + Ch, k, k), b: (4 Ch,).
    """
    if x.shape[0] != h.shape[0] or x.shape[2:] != h.shape[2:]:
        raise ValueError(f"input {x.shape} and hidden state {h.shape} disagree on batch or spatial extents")
    if h.shape != c.shape:
        raise ValueError(f"hidden {h.shape} and cell {c.shape} shapes differ")
    ch = h.shape[1]
    if w.shape[0] != 4 * ch or w.shape[1] != x.shape[1] + ch:
        raise ValueError(f"gate kernel {w.shape} does not fit input {x.shape[1]} + hidden {ch} channels")
    k = w.shape[-1]
    if k % 2 == 0:
        raise ValueError(f"gate kernel size must be odd, got {k}")
    p = (k - 1) // 2
    z = conv2d(concat([x, h], axis=1), w, b, padding=p)
    i = sigmoid(z[:, 0:ch])
    f = sigmoid(z[:, ch:2 * ch])
    o = sigmoid(z[:, 2 * ch:3 * ch])
    g = tanh(z[:, 3 * ch:])
    c_new = f * c + i * g
    return o * tanh(c_new), c_new


def zero_state(x: Tensor, hidden: int) -> tuple[Tensor, Tensor]:
    shape = (x.shape[0], hidden) + x.shape[2:]
    return Tensor(np.zeros(shape, dtype=x.dtype)), Tensor(np.zeros(shape, dtype=x.dtype))
