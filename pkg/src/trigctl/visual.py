"""Deterministic frame descriptor and cosine visual-change distance.

The descriptor pipeline is fixed: grayscale (BT.601 luma), 32x32 bilinear
resize with half-pixel centers, flatten, scale to [0, 1], mean-center and
L2-normalize.  It is only used for change detection, never for retrieval.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

DESCRIPTOR_SIDE = 32
DESCRIPTOR_DIM = DESCRIPTOR_SIDE * DESCRIPTOR_SIDE
NORM_EPS = 1e-12
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class InvalidFrameError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    """A rendered observation: (H, W) grayscale or (H, W, 3) RGB, values in [0, 255]."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.pixels)
        if arr.ndim not in (2, 3) or arr.size == 0 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidFrameError(f"frame must be a non-empty HxW or HxWxC grid, got shape {arr.shape}")
        if arr.ndim == 3 and arr.shape[2] not in (1, 3, 4):
            raise InvalidFrameError(f"unsupported channel count {arr.shape[2]}")
        if np.any(arr < 0) or np.any(arr > 255):
            raise InvalidFrameError("pixel values must lie in [0, 255]")
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass(frozen=True)
class Descriptor:
    values: np.ndarray
    norm_flag: bool = False

    def __post_init__(self) -> None:
        if self.values.shape != (DESCRIPTOR_DIM,):
            raise InvalidFrameError(f"descriptor must have {DESCRIPTOR_DIM} values, got {self.values.shape}")


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.shape[2] == 1:
        return arr[:, :, 0]
    r, g, b = LUMA_WEIGHTS
    return r * arr[:, :, 0] + g * arr[:, :, 1] + b * arr[:, :, 2]


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # Row i holds the interpolation weights of output sample i over the input axis.
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        m[i, i0] += 1.0 - w
        m[i, i1] += w
    return m


def resize_bilinear(gray: np.ndarray, height: int, width: int) -> np.ndarray:
    rows = _bilinear_matrix(gray.shape[0], height)
    cols = _bilinear_matrix(gray.shape[1], width)
    return rows @ gray @ cols.T


def encode(frame: Frame) -> Descriptor:
    gray = to_grayscale(frame.pixels)
    small = resize_bilinear(gray, DESCRIPTOR_SIDE, DESCRIPTOR_SIDE)
    vec = small.reshape(-1) / 255.0
    vec = vec - vec.mean()
    norm = float(np.linalg.norm(vec))
    if norm < NORM_EPS:
        return Descriptor(np.zeros(DESCRIPTOR_DIM), norm_flag=True)
    return Descriptor(vec / norm, norm_flag=False)


def visual_distance(a: Descriptor, b: Descriptor) -> float:
    """Cosine distance 1 - cos(a, b); featureless descriptors count as no change."""
    if a.values.shape != b.values.shape:
        raise InvalidFrameError("descriptor length mismatch")
    if a.norm_flag or b.norm_flag:
        return 0.0
    cos = float(np.dot(a.values, b.values)) / (float(np.linalg.norm(a.values)) * float(np.linalg.norm(b.values)))
    return 1.0 - min(1.0, max(-1.0, cos))


def load_frame(path: str | Path) -> Frame:
    """Decode an image file, applying its EXIF orientation first."""
    from PIL import Image, ImageOps

    with Image.open(path) as img:
        img = ImageOps.exif_transpose(img)
        return Frame(np.asarray(img.convert("RGB"), dtype=np.uint8))


def format_descriptor(desc: Descriptor) -> str:
    return ",".join(repr(float(v)) for v in desc.values)


def parse_descriptor(text: str) -> Descriptor:
    values = np.array([float(v) for v in text.strip().split(",")])
    norm_flag = bool(np.linalg.norm(values) < NORM_EPS)
    return Descriptor(values, norm_flag=norm_flag)
