"""Deterministic synthetic shape datasets and image-folder ingestion.

Classes are (shape, hue) pairs drawn from four shapes x four hues, rendered
anti-aliased at randomized position/scale/rotation on noisy backgrounds.
Pixel values live in [-1, 1] and are quantized through uint8 so in-memory
data matches a disk round-trip exactly.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from .seeding import derive_seed, numpy_rng

SHAPE_NAMES = ("circle", "square", "triangle", "cross")
HUE_NAMES = ("red", "green", "blue", "yellow")
HUE_VALUES = (0.0, 0.33, 0.62, 0.15)
MAX_CLASSES = len(SHAPE_NAMES) * len(HUE_NAMES)
SUPERSAMPLE = 4


@dataclass(frozen=True)
class ShapesSpec:
    image_size: int = 32
    num_classes: int = 8
    samples_per_class: int = 100
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > MAX_CLASSES:
            raise ValueError(
                f"num_classes {self.num_classes} exceeds the {MAX_CLASSES} available "
                f"shape x hue combinations"
            )
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16, got {self.image_size}")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")


@dataclass
class LabeledImageSet:
    """Images [N, 3, S, S] float32 in [-1, 1] with int64 labels and class names."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]

    def __post_init__(self) -> None:
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree on sample count")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def class_identity(k: int) -> tuple[str, str]:
    """Class index -> (shape, hue); shapes cycle fastest."""
    return SHAPE_NAMES[k % 4], HUE_NAMES[k // 4]


def class_dir_name(k: int) -> str:
    shape, hue = class_identity(k)
    return f"{k:02d}_{hue}_{shape}"


def _shape_mask(shape: str, size: int, cx: float, cy: float, radius: float, angle: float) -> np.ndarray:
    """Occupancy mask on a supersampled grid; coordinates in output-pixel units."""
    ss = SUPERSAMPLE
    coords = (np.arange(size * ss) + 0.5) / ss
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xx - cx, yy - cy
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    u = cos_a * dx + sin_a * dy
    v = -sin_a * dx + cos_a * dy
    if shape == "circle":
        hit = u**2 + v**2 <= radius**2
    elif shape == "square":
        hit = np.maximum(np.abs(u), np.abs(v)) <= radius * 0.9
    elif shape == "triangle":
        # equilateral triangle inscribed in the radius, apex along +v
        hit = (v >= -0.5 * radius) & (v <= radius - np.abs(u) * math.sqrt(3.0))
    elif shape == "cross":
        arm = radius * 0.38
        hit = (np.abs(u) <= arm) | (np.abs(v) <= arm)
        hit &= np.maximum(np.abs(u), np.abs(v)) <= radius
    else:
        raise ValueError(f"unknown shape {shape!r}")
    alpha = hit.astype(np.float32).reshape(size, ss, size, ss).mean(axis=(1, 3))
    return alpha


def _render_sample(spec: ShapesSpec, label: int, index: int) -> np.ndarray:
    rng = numpy_rng(derive_seed(spec.rng_seed, "shapes", label, index))
    s = spec.image_size
    shape, hue_name = class_identity(label)
    hue = HUE_VALUES[HUE_NAMES.index(hue_name)]
    base = rng.uniform(0.25, 0.45)
    background = base + rng.normal(0.0, 0.06, size=(s, s, 1)).astype(np.float32)
    background = np.repeat(background, 3, axis=2)
    cx = rng.uniform(0.35, 0.65) * s
    cy = rng.uniform(0.35, 0.65) * s
    radius = rng.uniform(0.20, 0.33) * s
    angle = rng.uniform(0.0, 2.0 * math.pi)
    alpha = _shape_mask(shape, s, cx, cy, radius, angle)[:, :, None]
    color = np.array(colorsys.hsv_to_rgb(hue, 0.9, 0.95), dtype=np.float32)
    img = background * (1.0 - alpha) + color[None, None, :] * alpha
    img = np.clip(img, 0.0, 1.0)
    quantized = np.round(img * 255.0).astype(np.uint8)
    return quantized.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0


def generate_shapes(spec: ShapesSpec) -> LabeledImageSet:
    """Render the full dataset; exactly uniform label histogram, seed-deterministic."""
    images = np.empty(
        (spec.num_classes * spec.samples_per_class, 3, spec.image_size, spec.image_size),
        dtype=np.float32,
    )
    labels = np.empty(images.shape[0], dtype=np.int64)
    i = 0
    for k in range(spec.num_classes):
        for j in range(spec.samples_per_class):
            images[i] = _render_sample(spec, k, j)
            labels[i] = k
            i += 1
    names = [class_dir_name(k) for k in range(spec.num_classes)]
    return LabeledImageSet(images=images, labels=labels, class_names=names)


def save_image_set(ds: LabeledImageSet, root: Union[str, Path]) -> Path:
    """One subdirectory per class of PNGs, plus a manifest with checksums."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    per_class_counter = dict.fromkeys(range(ds.num_classes), 0)
    entries = []
    for img, label in zip(ds.images, ds.labels):
        k = int(label)
        idx = per_class_counter[k]
        per_class_counter[k] = idx + 1
        class_dir = root / ds.class_names[k]
        class_dir.mkdir(exist_ok=True)
        path = class_dir / f"{idx:05d}.png"
        arr = np.round((img.transpose(1, 2, 0) + 1.0) * 127.5).astype(np.uint8)
        Image.fromarray(arr).save(path, format="PNG")
        entries.append(
            {
                "path": str(path.relative_to(root)),
                "label": k,
                "sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
            }
        )
    manifest = {"class_names": ds.class_names, "samples": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_image_folder(root: Union[str, Path], expected_size: int) -> LabeledImageSet:
    """Load class-per-subdirectory PNGs; resize shorter side then center-crop.

    Class indices follow sorted subdirectory names; sample order within a
    class follows sorted filenames, so loading is fully deterministic.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise FileNotFoundError(f"dataset root {root} contains no class directories")
    images, labels, names = [], [], []
    for k, class_dir in enumerate(class_dirs):
        files = sorted(class_dir.glob("*.png"))
        if not files:
            raise FileNotFoundError(f"class directory {class_dir} contains no PNG images")
        names.append(class_dir.name)
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB")
                    w, h = im.size
                    short = min(w, h)
                    if short != expected_size:
                        scale = expected_size / short
                        im = im.resize(
                            (max(expected_size, round(w * scale)), max(expected_size, round(h * scale))),
                            Image.BILINEAR,
                        )
                    w, h = im.size
                    left = (w - expected_size) // 2
                    top = (h - expected_size) // 2
                    im = im.crop((left, top, left + expected_size, top + expected_size))
                    arr = np.asarray(im, dtype=np.float32)
            except OSError as exc:
                raise OSError(f"failed to read image {f}: {exc}") from exc
            images.append(arr.transpose(2, 0, 1) / 127.5 - 1.0)
            labels.append(k)
    return LabeledImageSet(
        images=np.stack(images).astype(np.float32),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=names,
    )


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Deterministic batch composition: a fresh permutation per epoch.

    The epoch permutation is seeded with seed XOR epoch, so composition
    depends only on (seed, epoch, step) and is stable across resume.
    """
    spe = steps_per_epoch(n, batch_size)
    epoch, offset = divmod(step, spe)
    perm = numpy_rng(seed ^ epoch).permutation(n)
    return perm[offset * batch_size : (offset + 1) * batch_size]
