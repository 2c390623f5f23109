"""Synthetic shape+texture dataset and IDX container IO.

Each image is a class-determined glyph stamped over a structured grating
background. The glyph always lands inside the four central patches of the
default 28x28 / patch-7 grid, so foreground and background patches are
well defined by construction. ``texture_correlation`` (rho) ties the
background texture index to the label with the given probability, which
plants a spurious cue that inversion can hallucinate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class BadMagic(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


class CountMismatch(ValueError):
    pass


class IoError(OSError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 10
    image_size: int = 28
    channels: int = 1
    texture_correlation: float = 0.0  # rho: P(texture index == label)
    noise_std: float = 0.03
    glyph_value: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.texture_correlation <= 1.0:
            raise ValueError("texture_correlation must be in [0, 1]")
        if not 2 <= self.num_classes <= 10:
            raise ValueError("generator supports 2..10 classes")
        if self.image_size < 21:
            # 12px glyph stamped at offset 8 +- 1 must fit the canvas
            raise ValueError("image_size must be >= 21")


_STAMP = 12  # glyph box, placed at offset 8 +- 1 on a 28px canvas


def _glyph(cls: int) -> np.ndarray:
    s = _STAMP
    ii, jj = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2.0
    di, dj = ii - c, jj - c
    rad = np.hypot(di, dj)
    if cls == 0:  # filled square
        return (np.maximum(abs(di), abs(dj)) <= 4.5)
    if cls == 1:  # hollow square
        m = np.maximum(abs(di), abs(dj))
        return (m <= 5.5) & (m >= 3.5)
    if cls == 2:  # disk
        return rad <= 4.8
    if cls == 3:  # ring
        return (rad <= 5.5) & (rad >= 3.4)
    if cls == 4:  # plus
        return (abs(di) <= 1.5) | (abs(dj) <= 1.5)
    if cls == 5:  # X
        return (abs(ii - jj) <= 1) | (abs(ii + jj - (s - 1)) <= 1)
    if cls == 6:  # horizontal bars
        return (ii % 4) < 2
    if cls == 7:  # vertical bars
        return (jj % 4) < 2
    if cls == 8:  # diamond
        return (abs(di) + abs(dj)) <= 5.5
    if cls == 9:  # dot grid
        return ((ii % 4) < 2) & ((jj % 4) < 2)
    raise ValueError(f"no glyph for class {cls}")


_GLYPHS = [_glyph(c) for c in range(10)]

# spatial frequencies of the ten background gratings
_TEX_FREQ = [(1, 0), (0, 1), (2, 0), (0, 2), (1, 1),
             (2, 1), (1, 2), (2, 2), (3, 0), (0, 3)]


def _texture(idx: int, size: int, phase: float) -> np.ndarray:
    fi, fj = _TEX_FREQ[idx]
    ii, jj = np.mgrid[0:size, 0:size]
    wave = np.sin(2.0 * np.pi * (fi * ii + fj * jj) / size + phase)
    return 0.35 + 0.15 * wave


def make_dataset(cfg: SyntheticConfig, n: int, rng: np.random.Generator) -> Dataset:
    """Balanced labels (up to remainder), shuffled; deterministic in rng."""
    H = cfg.image_size
    labels = np.arange(n, dtype=np.int64) % cfg.num_classes
    rng.shuffle(labels)
    images = np.empty((n, H, H, cfg.channels))
    for i, y in enumerate(labels):
        if rng.random() < cfg.texture_correlation:
            tex = int(y)
        else:
            tex = int(rng.integers(cfg.num_classes))
        img = _texture(tex, H, rng.uniform(0.0, 2.0 * np.pi))
        oi = 8 + int(rng.integers(-1, 2))
        oj = 8 + int(rng.integers(-1, 2))
        stamp = _GLYPHS[int(y)]
        region = img[oi:oi + _STAMP, oj:oj + _STAMP]
        img[oi:oi + _STAMP, oj:oj + _STAMP] = np.where(stamp, cfg.glyph_value, region)
        if cfg.noise_std > 0:
            img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)[..., None]
    return Dataset(images, labels)


def foreground_patches(image_size: int = 28, patch_size: int = 7) -> np.ndarray:
    """Grid indices of patches the glyph can touch (central 2x2 block)."""
    g = image_size // patch_size
    lo = (8 - 1) // patch_size
    hi = (8 + 1 + _STAMP - 1) // patch_size
    rows = range(lo, hi + 1)
    return np.array([r * g + c for r in rows for c in rows], dtype=np.int64)


# ---------------------------------------------------------------------- IDX

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def read_idx(path) -> np.ndarray:
    """One IDX file -> u8-backed array; images come back as float64 in [0,1]."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(str(e)) from e
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: shorter than a magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == _IDX_LABELS:
        ndim = 1
    elif magic == _IDX_IMAGES:
        ndim = 3
    else:
        raise BadMagic(f"{path}: magic 0x{magic:08x} is not an IDX image/label file")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile(f"{path}: header cut short")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise TruncatedFile(f"{path}: payload has {len(raw) - header} bytes, header promises {count}")
    if len(raw) - header > count:
        raise TruncatedFile(f"{path}: {len(raw) - header - count} trailing bytes after payload")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)
    if magic == _IDX_LABELS:
        return data.astype(np.int64)
    return data.astype(np.float64) / 255.0


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise BadMagic(f"{images_path}: expected an image file")
    if labels.ndim != 1:
        raise BadMagic(f"{labels_path}: expected a label file")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    return Dataset(images[..., None], labels)


def write_idx(images_path, labels_path, dataset: Dataset) -> None:
    """Images are rounded to u8; single-channel only."""
    imgs = dataset.images
    if imgs.shape[-1] != 1:
        raise ValueError("IDX export supports single-channel images")
    u8 = np.clip(np.round(imgs[..., 0] * 255.0), 0, 255).astype(np.uint8)
    n, h, w = u8.shape
    try:
        with open(images_path, "wb") as f:
            f.write(struct.pack(">IIII", _IDX_IMAGES, n, h, w))
            f.write(u8.tobytes())
        with open(labels_path, "wb") as f:
            f.write(struct.pack(">II", _IDX_LABELS, n))
            f.write(np.asarray(dataset.labels, dtype=np.uint8).tobytes())
    except OSError as e:
        raise IoError(str(e)) from e
