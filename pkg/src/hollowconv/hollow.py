"""Hollow ("bagel") kernels: mask construction, initialization and the
shape-preserving optimizer.

A hollow mask is a K x K binary grid whose ones form a closed elliptic band.
Only band pixels of a hollow kernel are ever allowed to become non-zero: the
optimizer multiplies the raw gradient by the mask *before* it reaches the
Adam moments, so masked-out moments, updates and weights stay exactly 0.0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import ndimage

from .tensor import Tensor, default_dtype

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
# pixels exactly on a band edge count as inside; absorbs rounding in 1 - wall/min(a, b)
_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class HollowMask:
    grid: np.ndarray
    family: str = "annulus"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
            raise ValueError(f"hollow mask must be a square grid, got {grid.shape}")
        if not np.isin(grid, (0, 1)).all():
            raise ValueError("hollow mask values must be 0 or 1")
        object.__setattr__(self, "grid", grid.astype(np.uint8))
        check_enclosure(self.grid)

    @property
    def size(self) -> int:
        return self.grid.shape[0]

    def count(self) -> int:
        return int(self.grid.sum())


def enclosed_cavity(grid: np.ndarray) -> np.ndarray:
    """Zero pixels that a 4-connected flood fill from the border cannot reach."""
    zeros = np.asarray(grid) == 0
    labels, _ = ndimage.label(zeros, structure=_FOUR_CONNECTED)
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    return zeros & ~np.isin(labels, border)


def is_hollow(grid: np.ndarray) -> bool:
    grid = np.asarray(grid)
    return bool(np.isin(grid, (0, 1)).all() and grid.any() and enclosed_cavity(grid).any())


def check_enclosure(grid: np.ndarray) -> None:
    if not np.asarray(grid).any():
        raise ValueError("hollow mask is empty")
    if not enclosed_cavity(grid).any():
        raise ValueError("hollow mask band is not closed: the border flood fill reaches the cavity")


def annulus_grid(size: int, semi_axes: tuple[float, float], wall: float,
                 shape: tuple[int, int] | None = None, center=None) -> np.ndarray:
    """Elliptic band rule shared by masks and synthetic objects.

    Pixel (i, j) is set iff 1 - wall/min(a, b) <= r <= 1 with
    r = sqrt(((i - ci)/a)^2 + ((j - cj)/b)^2).
    """
    a, b = semi_axes
    h, w = shape or (size, size)
    ci, cj = center if center is not None else ((h - 1) / 2, (w - 1) / 2)
    ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)
    r = np.sqrt(((ii - ci) / a) ** 2 + ((jj - cj) / b) ** 2)
    return ((r >= 1 - wall / min(a, b) - _EDGE_TOL) & (r <= 1 + _EDGE_TOL)).astype(np.uint8)


def make_annulus_mask(size: int, semi_axes: tuple[float, float], wall: float) -> HollowMask:
    a, b = semi_axes
    if size < 3:
        raise ValueError(f"mask size must be >= 3, got {size}")
    if a > size / 2 or b > size / 2:
        raise ValueError(f"semi-axes {semi_axes} exceed half the mask size {size}")
    if not 1 <= wall < min(a, b):
        raise ValueError(f"wall width {wall} must satisfy 1 <= wall < min(a, b) = {min(a, b)}")
    grid = annulus_grid(size, (a, b), wall)
    return HollowMask(grid, "annulus", {"size": size, "semi_axes": (a, b), "wall": wall})


def _nearest_resample(grid: np.ndarray, size: int) -> np.ndarray:
    src = grid.shape[0]
    idx = np.minimum((np.arange(size) * src) // size, src - 1)
    return grid[np.ix_(idx, idx)]


def mask_from_annotation(annotation: np.ndarray, size: int) -> HollowMask:
    """Resample a binary object mask (one hollow band) to ``size`` x ``size``.

    Nearest-neighbour sampling at pixel centres, re-binarized at 0.5. When the
    band breaks during downsampling it is repaired by a 3x3 closing.
    """
    ann = np.asarray(annotation, dtype=np.float64)
    if ann.ndim != 2 or ann.shape[0] != ann.shape[1]:
        raise ValueError(f"annotation must be a square image, got {ann.shape}")
    binary = (ann > 0.5).astype(np.uint8)
    if not is_hollow(binary):
        raise ValueError("annotation does not contain a closed hollow band")
    src = binary.shape[0]
    if src == size:
        return HollowMask(binary, "annotation", {"source_size": src})
    centers = np.minimum(((np.arange(size) + 0.5) * src / size).astype(int), src - 1)
    grid = (binary[np.ix_(centers, centers)] > 0.5).astype(np.uint8)
    repaired = False
    if not is_hollow(grid):
        padded = np.pad(grid, 1)
        grid = ndimage.binary_closing(padded, structure=np.ones((3, 3)))[1:-1, 1:-1].astype(np.uint8)
        repaired = True
        if not is_hollow(grid):
            raise ValueError(f"band could not be preserved when resampling {src} -> {size}")
    return HollowMask(grid, "annotation", {"source_size": src, "repaired": repaired})


def crop_to_object(annotation: np.ndarray, margin: int = 1) -> np.ndarray:
    """Square crop around the non-zero pixels, with a zero margin."""
    ann = np.asarray(annotation)
    rows = np.flatnonzero(ann.any(axis=1))
    cols = np.flatnonzero(ann.any(axis=0))
    if rows.size == 0:
        raise ValueError("annotation is empty")
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    side = max(r1 - r0, c1 - c0) + 2 * margin
    out = np.zeros((side, side), dtype=ann.dtype)
    ro = (side - (r1 - r0)) // 2
    co = (side - (c1 - c0)) // 2
    out[ro:ro + r1 - r0, co:co + c1 - c0] = ann[r0:r1, c0:c1]
    return out


def rescale_mask(mask: HollowMask, size: int) -> HollowMask:
    if size < mask.size:
        raise ValueError(f"rescale_mask only upsamples ({mask.size} -> {size}); use mask_from_annotation")
    if size == mask.size:
        return mask
    grid = _nearest_resample(mask.grid, size)
    return HollowMask(grid, mask.family, {**mask.params, "rescaled_from": mask.size})


def fan_in_sigma(mask: HollowMask, in_channels: int) -> float:
    return 1.0 / np.sqrt(in_channels * mask.count())


def init_hollow_kernel(mask: HollowMask, channels: tuple[int, int], seed: int | np.random.Generator,
                       mu: float = 0.0, sigma: float | None = None, dtype=None) -> np.ndarray:
    """N(mu, sigma^2) samples on the band, exact +0.0 elsewhere.

    ``sigma=None`` uses 1/sqrt(fan-in), counting only band positions.
    """
    cout, cin = channels
    if sigma is None:
        sigma = fan_in_sigma(mask, cin)
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = mask.size
    samples = rng.normal(mu, sigma, size=(cout, cin, k, k))
    on = mask.grid.astype(bool)[None, None]
    return np.where(on, samples, 0.0).astype(dtype or default_dtype())


class MaskedOptimizer:
    """Adam (or plain SGD) with per-parameter binary gradient masks.

    For a masked parameter the update reads ``g <- mask * grad`` before any
    moment bookkeeping, which in SGD mode is literally
    ``w <- w - lr * mask * grad``.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, masks: dict[int, np.ndarray] | None = None,
                 mode: str = "adam", betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer mode {mode!r}")
        self.params = list(params)
        self.lr = lr
        self.mode = mode
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.masks: dict[int, np.ndarray] = {}
        for i, m in (masks or {}).items():
            self.set_mask(i, m)
        self.m = [np.zeros_like(p.data) for p in self.params] if mode == "adam" else []
        self.v = [np.zeros_like(p.data) for p in self.params] if mode == "adam" else []

    def set_mask(self, index: int, mask: np.ndarray) -> None:
        p = self.params[index]
        mask = np.asarray(mask).astype(bool)
        try:
            mask = np.broadcast_to(mask, p.shape)
        except ValueError:
            raise ValueError(f"mask shape {mask.shape} does not broadcast to parameter shape {p.shape}") from None
        self.masks[index] = mask

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            mask = self.masks.get(i)
            if mask is not None:
                g = np.where(mask, g, 0).astype(p.dtype)
            if self.mode == "sgd":
                p.data -= (self.lr * g).astype(p.dtype)
                continue
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"step": np.array([self.step_count], dtype=np.float64), "lr": np.array([self.lr])}
        for i in range(len(self.m)):
            state[f"m.{i}"] = self.m[i]
            state[f"v.{i}"] = self.v[i]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"][0])
        self.lr = float(state["lr"][0])
        for i in range(len(self.m)):
            self.m[i][...] = state[f"m.{i}"]
            self.v[i][...] = state[f"v.{i}"]
