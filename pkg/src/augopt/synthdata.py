"""Synthetic grayscale screening images with a weak localized signal.

Every image shows an elliptical object on a mottled zero-mean background
and carries the same number of small Gaussian spots clustered around the
object center.  Spot count and placement statistics are identical across
classes; the label lives entirely in the first spot, broad and soft on
positives but narrow and bright on negatives, with near-matched energy
between the two.  The other spots are dim narrow distractors piled into
the same central zone, so pooled random-encoder features read mostly
superposition noise while a linear probe on raw pixels still picks up the
weak class mass difference.  A trained encoder does much better, which is
what makes augmentation strengths matter: blur drains the peak contrast
that defines a negative, and a badly placed crop window discards the
first spot altogether.

Pixel values are clipped to [0, 1] and quantized to float32 at creation, so
a save/load round trip through the binary dataset format is bit-exact.

The on-disk format is a little-endian binary file: magic "DTCL", u32
version 1, u32 count, u32 height, u32 width, then count*height*width
float32 pixels row-major.  Labels live in a sibling CSV (same stem, .csv
extension) with header index,label,group.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .tensor import Rng
from .transforms import _blur_matrices

__all__ = [
    "SyntheticSpec",
    "Dataset",
    "DatasetError",
    "DatasetIOError",
    "DatasetFormatError",
    "generate",
    "save_dataset",
    "load_dataset",
    "write_pgm",
]

_MAGIC = b"DTCL"
_VERSION = 1


class DatasetError(Exception):
    pass


class DatasetIOError(DatasetError):
    pass


class DatasetFormatError(DatasetError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings; lengths are pixels unless noted."""

    n_images: int
    size: int = 32
    seed: int = 0
    positive_fraction: float = 0.5
    base_intensity: float = 0.25
    brightness_jitter: float = 0.0  # label-independent whole-image offset range
    background_contrast: float = 0.08
    background_smoothness: float = 1.5  # gaussian sigma of the background field
    texture_noise: float = 0.02  # per-pixel white noise std, masks small features
    ellipse_intensity: float = 0.15
    ellipse_axes: tuple = (0.30, 0.24)  # (row, col) radii as fractions of size
    ellipse_jitter: float = 0.08  # relative axis variation
    edge_sharpness: float = 4.0
    lesion_intensity: tuple = (0.30, 0.50)
    lesion_radius: tuple = (3.0, 4.0)
    sigma_of_radius: float = 0.63  # blob sigma as a fraction of its drawn radius
    lesion_placement: float = 0.40  # max center offset, fraction of the axes
    negative_intensity: tuple = (0.45, 0.62)  # negative-class first-spot amplitude
    negative_radius: tuple = (2.1, 2.9)  # negative-class first-spot radius, px
    blobs_per_image: int = 3  # total spot count, identical for both classes
    distractor_intensity: tuple = (0.10, 0.24)
    distractor_radius: tuple = (2.1, 2.9)

    def __post_init__(self):
        if self.n_images < 2:
            raise ValueError(f"n_images must be >= 2, got {self.n_images}")
        if self.size < 16 or self.size % 16 != 0:
            raise ValueError(f"size must be a positive multiple of 16, got {self.size}")
        if not (0.0 < self.positive_fraction < 1.0):
            raise ValueError(f"positive_fraction must be in (0, 1), got {self.positive_fraction}")
        if self.blobs_per_image < 1:
            raise ValueError(f"blobs_per_image must be >= 1, got {self.blobs_per_image}")


@dataclass
class Dataset:
    images: np.ndarray  # [N, 1, s, s] float32 in [0, 1]
    labels: np.ndarray  # [N] uint8
    groups: np.ndarray  # [N] int64

    def __len__(self) -> int:
        return self.images.shape[0]


def _smooth(field: np.ndarray, sigma: float) -> np.ndarray:
    s = field.shape[-1]
    W, _, _ = _blur_matrices(np.array([sigma]), s, np.float64)
    return W[0] @ field @ W[0].T


def generate(spec: SyntheticSpec) -> Dataset:
    """Deterministic dataset for a generator spec.

    The positive count is exactly round(n_images * positive_fraction); which
    images are positive is a seeded shuffle.
    """
    rng = Rng(spec.seed, stream=0)
    g = rng._g
    s = spec.size
    n = spec.n_images

    n_pos = round(n * spec.positive_fraction)
    labels = np.zeros(n, dtype=np.uint8)
    labels[g.permutation(n)[:n_pos]] = 1

    rows = np.arange(s, dtype=np.float64)[:, None]
    cols = np.arange(s, dtype=np.float64)[None, :]
    center = (s - 1) / 2.0

    images = np.empty((n, 1, s, s), dtype=np.float32)
    for i in range(n):
        field = _smooth(g.standard_normal((s, s)), spec.background_smoothness)
        level = spec.base_intensity + g.uniform(-spec.brightness_jitter, spec.brightness_jitter)

        jit = 1.0 + g.uniform(-spec.ellipse_jitter, spec.ellipse_jitter, 2)
        a = spec.ellipse_axes[0] * s * jit[0]
        b = spec.ellipse_axes[1] * s * jit[1]
        q = ((rows - center) / a) ** 2 + ((cols - center) / b) ** 2
        body = 1.0 / (1.0 + np.exp(-spec.edge_sharpness * (1.0 - q)))

        field = field - field.mean()  # zero image-mean: no label-side bias
        bg = field / max(field.std(), 1e-9) * spec.background_contrast + level
        img = bg + spec.ellipse_intensity * body

        # Both classes carry the same number of spots with identical
        # placement statistics; the label lives in the trade between the
        # first spot's footprint and its peak (broad and soft on positives,
        # narrow and bright on negatives, near-matched energy), so spot
        # presence and count carry no label information.
        for k in range(spec.blobs_per_image):
            angle = g.uniform(0.0, 2.0 * np.pi)
            radial = spec.lesion_placement * np.sqrt(g.uniform(0.0, 1.0))
            ci = center + radial * a * np.sin(angle)
            cj = center + radial * b * np.cos(angle)
            if k == 0:
                if labels[i]:
                    amp = g.uniform(*spec.lesion_intensity)
                    sig = g.uniform(*spec.lesion_radius) * spec.sigma_of_radius
                else:
                    amp = g.uniform(*spec.negative_intensity)
                    sig = g.uniform(*spec.negative_radius) * spec.sigma_of_radius
            else:
                amp = g.uniform(*spec.distractor_intensity)
                sig = g.uniform(*spec.distractor_radius) * spec.sigma_of_radius
            d2 = (rows - ci) ** 2 + (cols - cj) ** 2
            img = img + amp * np.exp(-d2 / (2.0 * sig ** 2))

        if spec.texture_noise > 0.0:
            img = img + spec.texture_noise * g.standard_normal((s, s))

        images[i, 0] = np.clip(img, 0.0, 1.0).astype(np.float32)

    return Dataset(images=images, labels=labels, groups=np.arange(n, dtype=np.int64))


# -- serialization ------------------------------------------------------------


def _labels_path(path) -> str:
    return os.path.splitext(os.fspath(path))[0] + ".csv"


def save_dataset(ds: Dataset, path) -> None:
    """Write the binary pixel file and its sibling label CSV."""
    n, c, h, w = ds.images.shape
    if c != 1:
        raise ValueError(f"expected single-channel images, got {c} channels")
    blob = bytearray()
    blob += _MAGIC
    for v in (_VERSION, n, h, w):
        blob += int(v).to_bytes(4, "little")
    blob += np.ascontiguousarray(ds.images[:, 0], dtype="<f4").tobytes()
    try:
        with open(path, "wb") as f:
            f.write(blob)
        with open(_labels_path(path), "w") as f:
            f.write("index,label,group\n")
            for i in range(n):
                f.write(f"{i},{int(ds.labels[i])},{int(ds.groups[i])}\n")
    except OSError as e:
        raise DatasetIOError(f"cannot write dataset {path}: {e}") from e


def load_dataset(path) -> Dataset:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DatasetIOError(f"cannot read dataset {path}: {e}") from e

    if len(raw) < 20:
        raise DatasetFormatError(f"{path} too short to be a dataset")
    if raw[:4] != _MAGIC:
        raise DatasetFormatError(f"{path} is not a dataset (bad magic)")
    version, n, h, w = (int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "little") for i in range(4))
    if version != _VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version} in {path}")
    need = 20 + n * h * w * 4
    if len(raw) != need:
        raise DatasetFormatError(f"{path} has {len(raw)} bytes, expected {need}")
    images = np.frombuffer(raw[20:], dtype="<f4").reshape(n, 1, h, w).copy()

    lp = _labels_path(path)
    try:
        with open(lp) as f:
            lines = [ln.strip() for ln in f if ln.strip()]
    except OSError as e:
        raise DatasetIOError(f"cannot read labels {lp}: {e}") from e
    if not lines or lines[0] != "index,label,group":
        raise DatasetFormatError(f"{lp} missing 'index,label,group' header")
    if len(lines) - 1 != n:
        raise DatasetFormatError(f"{lp} has {len(lines) - 1} rows for {n} images")
    labels = np.zeros(n, dtype=np.uint8)
    groups = np.zeros(n, dtype=np.int64)
    for row, ln in enumerate(lines[1:]):
        parts = ln.split(",")
        if len(parts) != 3:
            raise DatasetFormatError(f"{lp} row {row}: expected 3 fields, got {len(parts)}")
        try:
            idx, lbl, grp = (int(p) for p in parts)
        except ValueError as e:
            raise DatasetFormatError(f"{lp} row {row}: non-integer field in {ln!r}") from e
        if idx != row:
            raise DatasetFormatError(f"{lp} row {row}: index {idx} out of order")
        if lbl not in (0, 1):
            raise DatasetFormatError(f"{lp} row {row}: label must be 0 or 1, got {lbl}")
        labels[row] = lbl
        groups[row] = grp
    return Dataset(images=images, labels=labels, groups=groups)


def write_pgm(img: np.ndarray, path) -> None:
    """8-bit binary PGM from a [s, s] array in [0, 1]."""
    if img.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
            f.write(data.tobytes())
    except OSError as e:
        raise DatasetIOError(f"cannot write image {path}: {e}") from e
