"""Synthetic hollow objects, bladder-like phantom stacks, and the kernel-scale
boundary-highlighting study.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, signal

from . import io as lio
from .hollow import annulus_grid, make_annulus_mask

# intensity statistics of the clinical data; phantoms ship their own
CLINICAL_MEAN = 0.273
CLINICAL_STD = 0.067
SHARPNESS_EPS = 1e-9


# --------------------------------------------------------------- hollow objects
@dataclass(frozen=True)
class HollowObjectParams:
    size: int = 100
    family: str = "ring"
    semi_axes: tuple[float, float] = (20.0, 20.0)
    wall: float = 5.0
    wall_intensity: float = 1.0
    cavity_intensity: float = 0.0
    background_intensity: float = 0.0
    noise: float = 0.0
    min_contrast: float = 0.2


@dataclass
class HollowObjectImage:
    image: np.ndarray
    mask: np.ndarray
    params: HollowObjectParams


def gen_hollow_object(params: HollowObjectParams = HollowObjectParams(), seed: int = 0) -> HollowObjectImage:
    a, b = params.semi_axes
    if params.family not in ("ring", "ellipse"):
        raise ValueError(f"unknown shape family {params.family!r}")
    if params.family == "ring" and a != b:
        raise ValueError("a ring needs equal semi-axes")
    if params.wall < 1:
        raise ValueError(f"wall width must be >= 1 px, got {params.wall}")
    if params.wall >= min(a, b):
        raise ValueError("wall width must be smaller than the semi-axes")
    c = (params.size - 1) / 2
    if c - max(a, b) < 0:
        raise ValueError(f"band with semi-axes {params.semi_axes} exceeds a {params.size}px image")
    for other in (params.cavity_intensity, params.background_intensity):
        if abs(params.wall_intensity - other) < params.min_contrast:
            raise ValueError("wall intensity must differ from cavity and background by the minimum contrast")

    mask = annulus_grid(params.size, (a, b), params.wall)
    ii, jj = np.mgrid[0:params.size, 0:params.size]
    inside = ((ii - c) / a) ** 2 + ((jj - c) / b) ** 2 < 1
    image = np.full(mask.shape, params.background_intensity, dtype=np.float64)
    image[inside] = params.cavity_intensity
    image[mask.astype(bool)] = params.wall_intensity
    if params.noise > 0:
        image = image + np.random.default_rng(seed).normal(0.0, params.noise, image.shape)
    return HollowObjectImage(image, mask, params)


# ------------------------------------------------------------ phantom stacks
@dataclass(frozen=True)
class PhantomPreset:
    name: str
    outer_axes: tuple[float, float] = (16.0, 22.0)   # range of the larger semi-axis at 64 px
    aspect: tuple[float, float] = (0.7, 0.95)
    outer_wall: tuple[float, float] = (3.5, 5.0)
    inner_wall: tuple[float, float] = (2.5, 3.5)
    tumor_radius: tuple[float, float] = (3.5, 5.5)
    tumor_overlap: bool = False
    background: float = 0.30
    outer_intensity: float = 0.55
    inner_intensity: float = 0.78
    lumen_intensity: float = 0.08
    tumor_intensity: float = 1.0
    tumor_texture: float = 0.04
    texture: float = 0.05
    noise: float = 0.02
    blur: float = 0.0
    deformation: float = 0.12
    fractions: dict = field(default_factory=dict)


PRESETS = {
    "easy": PhantomPreset(
        "easy",
        fractions={"outer_wall": (0.03, 0.20), "inner_wall": (0.02, 0.15), "tumor": (0.002, 0.05)},
    ),
    "blurred-wall": PhantomPreset(
        "blurred-wall", outer_intensity=0.45, background=0.34, noise=0.04, blur=1.2,
        fractions={"outer_wall": (0.03, 0.20), "inner_wall": (0.02, 0.15), "tumor": (0.002, 0.05)},
    ),
    "attached-tumor": PhantomPreset(
        "attached-tumor", tumor_radius=(5.5, 8.5), tumor_overlap=True, tumor_intensity=0.92,
        tumor_texture=0.10, noise=0.03,
        fractions={"outer_wall": (0.03, 0.20), "inner_wall": (0.01, 0.15), "tumor": (0.005, 0.09)},
    ),
}


@dataclass
class SyntheticStack:
    images: np.ndarray          # (T, 1, H, W) float32
    masks: np.ndarray           # (T, 3, H, W) uint8: outer wall, inner wall, tumor
    seed: int
    preset: str
    deformation: float


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.normal(size=shape), sigma)
    return field_ / (field_.std() + 1e-12)


def gen_phantom_stack(seed: int, T: int = 12, size: int = 64, preset: str = "easy",
                      deformation: float | None = None) -> SyntheticStack:
    """One stack of T slices through a deformed hollow organ with a wall-attached tumor.

    Geometry parameters drift smoothly with the slice index (relative axis
    change per slice stays below 10%); ``deformation=0`` freezes the drift so
    every slice is identical.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[preset]
    scale = size / 64.0
    if size < 32:
        raise ValueError(f"slice size {size} is too small to contain the wall bands (need >= 32)")
    amp = p.deformation if deformation is None else deformation
    if not 0 <= amp <= 0.3:
        raise ValueError("deformation amplitude must lie in [0, 0.3]")
    rng = np.random.default_rng(seed)

    major = rng.uniform(*p.outer_axes) * scale
    minor = major * rng.uniform(*p.aspect)
    axes0 = np.array([major, minor])
    theta0 = rng.uniform(0, math.pi)
    w_out = rng.uniform(*p.outer_wall) * scale
    w_in = rng.uniform(*p.inner_wall) * scale
    center0 = (size - 1) / 2 + rng.uniform(-2, 2, size=2) * scale
    harmonics = [(k, rng.uniform(0.02, 0.05), rng.uniform(0, 2 * math.pi)) for k in (2, 3)]
    tumor_angle = rng.uniform(0, 2 * math.pi)
    tumor_r0 = rng.uniform(*p.tumor_radius) * scale
    tumor_harm = [(k, rng.uniform(0.05, 0.15), rng.uniform(0, 2 * math.pi)) for k in (2, 3, 5)]
    phases = rng.uniform(0, 2 * math.pi, size=5)
    texture = _smooth_noise(rng, (size, size), 2.0 * scale) * p.texture
    tumor_tex = _smooth_noise(rng, (size, size), 1.0 * scale) * p.tumor_texture
    noise = rng.normal(0, p.noise, size=(size, size))

    ii, jj = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.zeros((T, 1, size, size), dtype=np.float32)
    masks = np.zeros((T, 3, size, size), dtype=np.uint8)
    for t in range(T):
        phase = 2 * math.pi * t / max(T, 1)
        drift = lambda k: amp * math.sin(phase * 0.5 + phases[k])  # noqa: E731
        axes = axes0 * np.array([1 + drift(0), 1 + 0.8 * drift(1)])
        theta = theta0 + 0.3 * drift(2)
        center = center0 + 2.0 * scale * np.array([drift(3), drift(4)])
        tumor_r = tumor_r0 * (1 + drift(1))

        di, dj = ii - center[0], jj - center[1]
        u = math.cos(theta) * di + math.sin(theta) * dj
        v = -math.sin(theta) * di + math.cos(theta) * dj
        phi = np.arctan2(v, u)
        bump = 1 + sum(a * np.cos(k * phi + ph) for k, a, ph in harmonics)
        rho = np.sqrt((u / axes[0]) ** 2 + (v / axes[1]) ** 2) / bump
        m = axes.min()
        outer = (rho <= 1) & (rho >= 1 - w_out / m)
        inner = (rho < 1 - w_out / m) & (rho >= 1 - (w_out + w_in) / m)
        lumen = rho < 1 - (w_out + w_in) / m

        # tumor: irregular blob seated on the lumen side of the inner band
        r_lumen = 1 - (w_out + w_in) / m
        reach = r_lumen * (1 + sum(a * math.cos(k * tumor_angle + ph) for k, a, ph in harmonics))
        tu = math.cos(tumor_angle) * axes[0] * reach
        tv = math.sin(tumor_angle) * axes[1] * reach
        pull = 1 - 0.25 * tumor_r / math.hypot(tu, tv)
        tu, tv = tu * pull, tv * pull
        du, dv = u - tu, v - tv
        psi = np.arctan2(dv, du)
        edge = tumor_r * (1 + sum(a * np.cos(k * psi + ph) for k, a, ph in tumor_harm))
        blob = np.hypot(du, dv) <= edge
        tumor = blob & (lumen | inner) if p.tumor_overlap else blob & lumen
        if p.tumor_overlap:
            inner = inner & ~tumor

        img = np.full((size, size), p.background) + texture
        img[lumen] = p.lumen_intensity
        img[inner] = p.inner_intensity
        img[outer] = p.outer_intensity
        img[tumor] = p.tumor_intensity + tumor_tex[tumor]
        if p.blur > 0:
            img = ndimage.gaussian_filter(img, p.blur * scale)
        img = img + noise
        images[t, 0] = img
        masks[t, 0], masks[t, 1], masks[t, 2] = outer, inner, tumor
    return SyntheticStack(images, masks, seed, preset, amp)


def check_stack(stack: SyntheticStack) -> None:
    """Raise if a stack violates the disjoint-band or class-presence invariants."""
    m = stack.masks.astype(bool)
    T = m.shape[0]
    if (m[:, 0] & m[:, 1]).any():
        raise AssertionError("outer and inner wall bands overlap")
    present = m.reshape(T, 3, -1).any(axis=2).sum(axis=0)
    if (present < math.ceil(T / 2)).any():
        raise AssertionError(f"classes present on too few slices: {present.tolist()}")


def class_fractions(stack: SyntheticStack) -> dict[str, float]:
    from .losses import CLASS_NAMES
    frac = stack.masks.reshape(stack.masks.shape[0], 3, -1).mean(axis=(0, 2))
    return dict(zip(CLASS_NAMES, frac.tolist()))


# ------------------------------------------------------------------ datasets
@dataclass
class PhantomDataset:
    images: np.ndarray          # (S, T, 1, H, W) float32
    masks: np.ndarray           # (S, T, 3, H, W) uint8
    n_train: int
    meta: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(self.meta["mean"])

    @property
    def std(self) -> float:
        return float(self.meta["std"])

    def split(self, name: str) -> range:
        if name == "train":
            return range(self.n_train)
        if name == "test":
            return range(self.n_train, self.images.shape[0])
        raise ValueError(f"unknown split {name!r}")

    def normalized(self, index) -> np.ndarray:
        return ((self.images[index] - self.mean) / self.std).astype(np.float32)

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        lio.save(d / "images", self.images.astype(np.float32))
        lio.save(d / "masks", self.masks.astype(np.uint8))
        meta = {**self.meta, "n_train": self.n_train}
        with open(d / "meta", "w", encoding="utf-8") as fh:
            for k, v in meta.items():
                fh.write(f"{k} = {v}\n")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "PhantomDataset":
        d = Path(directory)
        if not (d / "meta").exists():
            raise FileNotFoundError(f"no dataset at {d}")
        meta = {}
        for line in (d / "meta").read_text(encoding="utf-8").splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
        images = lio.load(d / "images")
        masks = lio.load(d / "masks")
        if images.shape[:2] != masks.shape[:2] or masks.shape[2] != 3:
            raise lio.FormatError(f"inconsistent dataset shapes {images.shape} / {masks.shape}")
        return cls(images, masks, int(meta.pop("n_train")), meta)


def gen_dataset(n_train: int, n_test: int, T: int = 12, size: int = 64, preset: str = "easy",
                seed: int = 0, deformation: float | None = None) -> PhantomDataset:
    """Independent per-stack seeds are spawned from the master seed."""
    children = np.random.SeedSequence(seed).spawn(n_train + n_test)
    stacks = [
        gen_phantom_stack(int(c.generate_state(1)[0]), T, size, preset, deformation) for c in children
    ]
    images = np.stack([s.images for s in stacks])
    masks = np.stack([s.masks for s in stacks])
    train = images[:n_train]
    meta = {
        "size": size, "T": T, "seed": seed, "preset": preset,
        "n_test": n_test, "mean": float(train.mean()), "std": float(train.std()),
    }
    return PhantomDataset(images, masks, n_train, meta)


# ------------------------------------------------------- boundary highlighting
def outer_contour(band: np.ndarray) -> np.ndarray:
    """Band pixels 4-adjacent to the background reachable from the image border."""
    band = np.asarray(band).astype(bool)
    labels, _ = ndimage.label(~band, structure=ndimage.generate_binary_structure(2, 1))
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    outside = np.isin(labels, border[border > 0])
    near_outside = ndimage.binary_dilation(outside, structure=ndimage.generate_binary_structure(2, 1))
    return band & near_outside


def boundary_sharpness(image: np.ndarray, band: np.ndarray, radius: float = 2.0) -> float:
    """Mean gradient magnitude within ``radius`` px of the outer contour over
    the mean gradient magnitude everywhere else."""
    contour = outer_contour(band)
    if not contour.any():
        raise ValueError("ground-truth band has no outer contour")
    gy, gx = np.gradient(np.asarray(image, dtype=np.float64))
    mag = np.hypot(gx, gy)
    near = ndimage.distance_transform_edt(~contour) <= radius
    return float(mag[near].mean() / (mag[~near].mean() + SHARPNESS_EPS))


@dataclass
class ScaleStudyResult:
    kernel_sizes: list[int]
    scores: list[float]
    outputs: list[np.ndarray]

    @property
    def best(self) -> int:
        return self.kernel_sizes[int(np.argmax(self.scores))]

    def score(self, k: int) -> float:
        return self.scores[self.kernel_sizes.index(k)]


def homothetic_kernel(obj: HollowObjectParams, k: int) -> np.ndarray:
    """Unit-sum hollow kernel of size k with the object's shape and wall ratio."""
    if k == 1:
        return np.ones((1, 1))
    a, b = obj.semi_axes
    ka = k / 2
    kb = ka * b / a if obj.family == "ellipse" else ka
    m = min(ka, kb)
    wall = float(np.clip(m * obj.wall / min(a, b), 1.0, m - 0.5))
    grid = make_annulus_mask(k, (ka, kb), wall).grid.astype(np.float64)
    return grid / grid.sum()


def convolve_same(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded cross-correlation keeping the image size (extra pad after for even kernels)."""
    k = kernel.shape[0]
    lo, hi = (k - 1) // 2, k // 2
    padded = np.pad(image, ((lo, hi), (lo, hi)))
    return signal.correlate(padded, kernel, mode="valid", method="auto")


def kernel_scale_study(obj: HollowObjectImage, kernel_sizes=(3, 10, 20, 40)) -> ScaleStudyResult:
    sizes = list(kernel_sizes)
    if max(sizes) > min(obj.image.shape):
        raise ValueError(f"kernel size {max(sizes)} exceeds the image")
    scores, outputs = [], []
    for k in sizes:
        out = convolve_same(obj.image, homothetic_kernel(obj.params, k))
        lo, hi = out.min(), out.max()
        out = (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)
        outputs.append(out)
        scores.append(boundary_sharpness(out, obj.mask))
    return ScaleStudyResult(sizes, scores, outputs)


def study_panel(obj: HollowObjectImage, result: ScaleStudyResult, gap: int = 2) -> np.ndarray:
    """Input followed by each convolved output, side by side (uint8)."""
    tiles = [lio.to_uint8(obj.image)] + [lio.to_uint8(o) for o in result.outputs]
    h = tiles[0].shape[0]
    sep = np.full((h, gap), 255, dtype=np.uint8)
    row = []
    for i, t in enumerate(tiles):
        if i:
            row.append(sep)
        row.append(t)
    return np.concatenate(row, axis=1)


def params_dict(p) -> dict:
    return asdict(p)
