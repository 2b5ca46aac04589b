"""Segmentation losses and the evaluation Dice metric.

Predictions and targets are laid out (N, C, ...) with classes on axis 1.
Class order everywhere: outer wall, inner wall, tumor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, clip, log, sigmoid, softmax

CLASS_NAMES = ("outer_wall", "inner_wall", "tumor")
DICE_SMOOTH = 1.0
PROB_EPS = 1e-7


@dataclass(frozen=True)
class ClassWeights:
    alpha: float = 0.1
    class_weights: tuple[float, ...] = (4.1, 1.4, 8.7)
    pos_weights: tuple[float, ...] = (25.7, 8.2, 55.0)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if len(self.class_weights) != len(self.pos_weights):
            raise ValueError("class and positive weights need the same length")
        if min(self.class_weights) <= 0 or min(self.pos_weights) <= 0:
            raise ValueError("all class weights must be positive")

    def select(self, index: int) -> "ClassWeights":
        return ClassWeights(self.alpha, (self.class_weights[index],), (self.pos_weights[index],))


def _target(y, like: Tensor) -> Tensor:
    y = as_tensor(y, like.dtype)
    if y.shape != like.shape:
        raise ValueError(f"target shape {y.shape} != prediction shape {like.shape}")
    return Tensor(y.data.astype(like.dtype))


def _item_axes(ndim: int):
    return tuple(range(2, ndim)) if ndim >= 3 else None


def dice_terms(y, p: Tensor, smooth: float = DICE_SMOOTH) -> Tensor:
    """Per-(item, class) soft Dice loss; a single value for inputs of rank < 3."""
    p = as_tensor(p)
    y = _target(y, p)
    axes = _item_axes(p.ndim)
    inter = (y * p).sum(axis=axes)
    denom = y.sum(axis=axes) + p.sum(axis=axes)
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def dice_loss(y, p: Tensor, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - (2 sum(y p) + s) / (sum(y) + sum(p) + s), averaged over items and classes."""
    return dice_terms(y, p, smooth).mean()


def _as_weights(weights, n: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(weights, ClassWeights):
        w, pw = weights.class_weights, weights.pos_weights
    else:
        w, pw = weights
    w, pw = np.asarray(w, dtype=np.float64).reshape(-1), np.asarray(pw, dtype=np.float64).reshape(-1)
    if w.size != n or pw.size != n:
        raise ValueError(f"{w.size} class weights for {n} classes")
    return w, pw


def wbce_terms(y, p: Tensor, weights, eps: float = PROB_EPS) -> Tensor:
    """Per-class -w_c * mean[p_c y log q + (1 - y) log(1 - q)], q = clamp(p)."""
    p = as_tensor(p)
    y = _target(y, p)
    if p.ndim < 2:
        raise ValueError("wbce expects (N, C, ...) inputs")
    C = p.shape[1]
    w, pw = _as_weights(weights, C)
    shape = (1, C) + (1,) * (p.ndim - 2)
    q = clip(p, eps, 1 - eps)
    pos = Tensor(pw.reshape(shape).astype(p.dtype)) * y * log(q)
    neg = (1.0 - y) * log(1.0 - q)
    axes = (0,) + tuple(range(2, p.ndim))
    per_class = (pos + neg).mean(axis=axes)
    return per_class * Tensor(-w.astype(p.dtype))


def wbce(y, p: Tensor, weights=ClassWeights(), eps: float = PROB_EPS) -> Tensor:
    """Weighted binary cross entropy, summed over classes."""
    return wbce_terms(y, p, weights, eps).sum()


def combined_loss(y, p: Tensor, weights: ClassWeights = ClassWeights(), smooth: float = DICE_SMOOTH) -> Tensor:
    a = weights.alpha
    return a * wbce(y, p, weights) + (1 - a) * dice_loss(y, p, smooth)


def a1_losses(main_pred: Tensor, y, kernels: Tensor, y_ow: np.ndarray, mode: str,
              weights: ClassWeights = ClassWeights(), channel_logits: Tensor | None = None) -> Tensor:
    """Training losses for the kernel-generating model.

    kernels: generated banks (N, M, K, K) with M kernels per image; y_ow:
    outer-wall masks resized to (N, 1, K, K). L1 is the main loss alone; L2
    adds the mean over channels of the loss between each sigmoid-squashed
    kernel and y_ow; L3 adds the loss of the sigmoid of a softmax-weighted
    channel sum.
    """
    if mode not in ("L1", "L2", "L3"):
        raise ValueError(f"unknown A1 loss mode {mode!r}")
    main = combined_loss(y, main_pred, weights)
    if mode == "L1":
        return main
    if kernels.ndim != 4:
        raise ValueError(f"expected kernel banks shaped (N, M, K, K), got {kernels.shape}")
    M = kernels.shape[1]
    y_ow = np.asarray(y_ow)
    if y_ow.shape != (kernels.shape[0], 1) + kernels.shape[2:]:
        raise ValueError(f"outer-wall target shape {y_ow.shape} does not match kernels {kernels.shape}")
    ow = weights.select(0)
    if mode == "L2":
        squashed = sigmoid(kernels)
        target = np.broadcast_to(y_ow, kernels.shape)
        # each channel is scored as its own single-class problem
        bce = wbce_terms(target, squashed, (np.full(M, ow.class_weights[0]), np.full(M, ow.pos_weights[0])))
        aux = ow.alpha * bce.mean() + (1 - ow.alpha) * dice_loss(target, squashed)
        return main + aux
    if channel_logits is None or channel_logits.shape != (M,):
        raise ValueError(f"L3 needs {M} learnable channel logits")
    c = softmax(channel_logits).reshape(1, M, 1, 1)
    combined = (kernels * c).sum(axis=1, keepdims=True)
    return main + combined_loss(y_ow, sigmoid(combined), ow)


def dice_metric(pred, y, threshold: float = 0.5) -> np.ndarray:
    """Hard Dice per class (axis 1), pooled over items and pixels; empty vs empty = 1."""
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred)
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    if pred.shape != y.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {y.shape}")
    if pred.ndim < 2:
        pred, y = pred.reshape(1, 1, -1), y.reshape(1, 1, -1)
    hard = pred >= threshold
    truth = y > 0.5
    axes = (0,) + tuple(range(2, pred.ndim))
    inter = (hard & truth).sum(axis=axes).astype(np.float64)
    total = hard.sum(axis=axes) + truth.sum(axis=axes)
    return np.where(total == 0, 1.0, 2 * inter / np.maximum(total, 1))
