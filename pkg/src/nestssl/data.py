"""Synthetic positioned-shapes data, PPM ingestion, and multi-crop views.

The shapes generator is the instrument for position-bias experiments: a
bias knob beta slides placement from uniform (0) to a fixed
class-determined quadrant (1). Every image ships with a patch-level
class map aligned with the encoder's raster patch order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import FileFormatError, load_ppm

CLASS_NAMES = ("disc", "square", "triangle", "cross")

# saturated base colors; jitter perturbs per channel
_BASE_COLORS = np.array(
    [
        [0.85, 0.15, 0.15],  # disc
        [0.15, 0.80, 0.20],  # square
        [0.20, 0.25, 0.90],  # triangle
        [0.90, 0.85, 0.15],  # cross
    ],
    dtype=np.float32,
)
_BACKGROUND = np.array([0.12, 0.12, 0.12], dtype=np.float32)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ShapesConfig:
    canvas: int = 64
    patch: int = 8
    classes: int = 4
    shapes_per_image: int = 1
    position_bias: float = 0.0  # 0 uniform placement, 1 fixed class quadrant
    color_jitter: float = 0.15
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.position_bias <= 1.0:
            raise ValueError(f"position bias must lie in [0, 1], got {self.position_bias}")
        if self.canvas % self.patch:
            raise ValueError(
                f"canvas {self.canvas} must be divisible by patch size {self.patch}"
            )
        if not 1 <= self.classes <= len(CLASS_NAMES):
            raise ValueError(f"classes must be in [1, {len(CLASS_NAMES)}]")


@dataclass
class ShapesDataset:
    images: np.ndarray  # (N, 3, S, S) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64, class of the first shape
    patch_labels: np.ndarray  # (N, gh, gw) int64, 0 = background, 1 + class otherwise
    quadrants: np.ndarray  # (N,) int64 quadrant of the first shape center
    centers: np.ndarray  # (N, 2) float32 (row, col) of the first shape center
    config: ShapesConfig

    def __len__(self) -> int:
        return len(self.images)


def _quadrant_of(cy: float, cx: float, size: int) -> int:
    return int(cy >= size / 2) * 2 + int(cx >= size / 2)


def _shape_mask(kind: int, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - cy
    dx = xx - cx
    if kind == 0:  # disc
        return dy * dy + dx * dx <= r * r
    if kind == 1:  # square
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == 2:  # triangle, apex up: half-width grows linearly from the apex
        t = yy - (cy - r)
        return (t >= 0) & (t <= 2 * r) & (np.abs(dx) <= t / 2)
    if kind == 3:  # cross
        arm = r / 3.0
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | (
            (np.abs(dx) <= arm) & (np.abs(dy) <= r)
        )
    raise ValueError(f"unknown shape kind {kind}")


def _place_center(
    cls: int, cfg: ShapesConfig, margin: float, rng: np.random.Generator
) -> tuple[float, float]:
    s = cfg.canvas
    if rng.uniform() < cfg.position_bias:
        quad = cls % 4
        r0 = 0 if quad < 2 else s / 2
        c0 = 0 if quad % 2 == 0 else s / 2
        cy = rng.uniform(max(r0, margin), min(r0 + s / 2, s - margin))
        cx = rng.uniform(max(c0, margin), min(c0 + s / 2, s - margin))
    else:
        cy = rng.uniform(margin, s - margin)
        cx = rng.uniform(margin, s - margin)
    return cy, cx


def generate_shapes(cfg: ShapesConfig, count: int) -> ShapesDataset:
    """Deterministic under cfg.seed; per-image RNG streams are seed-split."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    s = cfg.canvas
    grid = s // cfg.patch
    images = np.empty((count, 3, s, s), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    patch_labels = np.empty((count, grid, grid), dtype=np.int64)
    quadrants = np.empty(count, dtype=np.int64)
    centers = np.empty((count, 2), dtype=np.float32)

    streams = np.random.SeedSequence(cfg.seed).spawn(count)
    for i in range(count):
        rng = np.random.default_rng(streams[i])
        canvas = np.empty((s, s, 3), dtype=np.float32)
        canvas[:] = _BACKGROUND
        if cfg.noise:
            canvas += rng.uniform(-cfg.noise, cfg.noise, size=(s, s, 3)).astype(np.float32)
        class_map = np.zeros((s, s), dtype=np.int64)
        for k in range(cfg.shapes_per_image):
            cls = int(rng.integers(cfg.classes))
            radius = rng.uniform(s / 8, s / 5)
            cy, cx = _place_center(cls, cfg, radius, rng)
            mask = _shape_mask(cls, s, cy, cx, radius)
            color = _BASE_COLORS[cls] + rng.uniform(
                -cfg.color_jitter, cfg.color_jitter, size=3
            ).astype(np.float32)
            canvas[mask] = np.clip(color, 0.0, 1.0)
            class_map[mask] = 1 + cls
            if k == 0:
                labels[i] = cls
                quadrants[i] = _quadrant_of(cy, cx, s)
                centers[i] = (cy, cx)
        images[i] = np.clip(canvas, 0.0, 1.0).transpose(2, 0, 1)
        patch_labels[i] = _majority_patch_labels(class_map, cfg.patch)
    return ShapesDataset(images, labels, patch_labels, quadrants, centers, cfg)


def _majority_patch_labels(class_map: np.ndarray, patch: int) -> np.ndarray:
    """Majority pixel class per patch window; ties resolve to the lower id."""
    s = class_map.shape[0]
    grid = s // patch
    blocks = class_map.reshape(grid, patch, grid, patch).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(grid, grid, patch * patch)
    out = np.empty((grid, grid), dtype=np.int64)
    for r in range(grid):
        for c in range(grid):
            out[r, c] = np.bincount(blocks[r, c]).argmax()
    return out


# ---------------------------------------------------------------------------
# PPM directory ingestion


def load_ppm_dir(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Load every .ppm under ``path`` (recursing one level for label dirs).

    Returns (images (N, 3, H, W), labels (N,), label_names). Labels come
    from immediate subdirectory names when present, otherwise all zeros
    with a single unnamed class.
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    entries: list[tuple[str, Path]] = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(sub.glob("*.ppm")):
            entries.append((sub.name, f))
    for f in sorted(root.glob("*.ppm")):
        entries.append(("", f))
    if not entries:
        raise DatasetError(f"no .ppm files found under {root}")
    label_names = sorted({name for name, _ in entries})
    name_to_id = {n: i for i, n in enumerate(label_names)}
    images = []
    labels = []
    dims = None
    for name, f in entries:
        img = load_ppm(f)
        if dims is None:
            dims = img.shape
        elif img.shape != dims:
            raise FileFormatError(
                f"mixed image dimensions: {f} is {img.shape}, expected {dims}"
            )
        images.append(img)
        labels.append(name_to_id[name])
    return np.stack(images), np.asarray(labels, dtype=np.int64), label_names


def write_manifest(path, rel_paths, labels, quadrants) -> None:
    lines = [f"{p},{l},{q}" for p, l, q in zip(rel_paths, labels, quadrants)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# multi-crop augmentation


@dataclass(frozen=True)
class CropConfig:
    global_crops: int = 2
    global_size: int = 64
    local_crops: int = 4
    local_size: int = 32
    global_scale: tuple[float, float] = (0.48, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.48)
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2

    def __post_init__(self):
        if self.global_crops < 2:
            raise ValueError(f"need >= 2 global crops, got {self.global_crops}")
        if self.local_size >= self.global_size:
            raise ValueError("local crops must be smaller than global crops")


@dataclass(frozen=True)
class AugRecord:
    scale: float
    top: int
    left: int
    side: int
    flipped: bool
    brightness: float
    contrast: float


@dataclass
class CropSet:
    globals_: np.ndarray  # (g, 3, S_g, S_g)
    locals_: np.ndarray  # (l, 3, S_l, S_l)
    records: list[AugRecord] = field(default_factory=list)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-wise bilinear resample; identity when sizes already match."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[None, :, None]
    wx = (xs - x0).astype(np.float32)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bottom = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(np.float32)


def _one_crop(
    image: np.ndarray,
    out_size: int,
    scale_range: tuple[float, float],
    cfg: CropConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, AugRecord]:
    _, h, w = image.shape
    scale = float(rng.uniform(*scale_range))
    side = int(round(np.sqrt(scale * h * w)))
    side = max(1, min(side, min(h, w)))
    top = int(rng.integers(h - side + 1))
    left = int(rng.integers(w - side + 1))
    crop = image[:, top : top + side, left : left + side]
    crop = resize_bilinear(crop, out_size, out_size)
    flipped = bool(rng.uniform() < cfg.flip_prob)
    if flipped:
        crop = crop[:, :, ::-1].copy()
    brightness = float(rng.uniform(-cfg.brightness, cfg.brightness))
    contrast = float(rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast))
    mean = crop.mean()
    crop = np.clip((crop - mean) * contrast + mean + brightness, 0.0, 1.0)
    return crop.astype(np.float32), AugRecord(
        scale, top, left, side, flipped, brightness, contrast
    )


def multi_crop(image: np.ndarray, cfg: CropConfig, rng: np.random.Generator) -> CropSet:
    """Global and local augmented views of one (3, H, W) image in [0, 1]."""
    if cfg.global_size > image.shape[1] or cfg.global_size > image.shape[2]:
        raise ValueError(
            f"global crop size {cfg.global_size} exceeds image {image.shape[1:]}"
        )
    globals_, locals_, records = [], [], []
    for _ in range(cfg.global_crops):
        crop, rec = _one_crop(image, cfg.global_size, cfg.global_scale, cfg, rng)
        globals_.append(crop)
        records.append(rec)
    for _ in range(cfg.local_crops):
        crop, rec = _one_crop(image, cfg.local_size, cfg.local_scale, cfg, rng)
        locals_.append(crop)
        records.append(rec)
    locals_arr = (
        np.stack(locals_)
        if locals_
        else np.empty((0, 3, cfg.local_size, cfg.local_size), dtype=np.float32)
    )
    return CropSet(np.stack(globals_), locals_arr, records)
