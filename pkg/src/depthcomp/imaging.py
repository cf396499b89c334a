"""Pixel data model and classical compositing primitives.

Images hold straight (non-premultiplied) RGBA in [0, 1]. Depth maps use the
inverse-depth convention: larger values are closer to the camera, so
thresholding marks near, occluding structure.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from PIL import Image

from .autodiff import functional as F
from .autodiff.tensor import DTYPE
from .errors import ImageIOError, ShapeError, UnsupportedBitDepthError

DEFAULT_CHROMA_TOLERANCE = 1.0 / 255.0
_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
# float32 slack for comparisons against values that went through 8-bit codes
_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class ImageRgba:
    pixels: np.ndarray  # (height, width, 4), float32 in [0, 1]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=DTYPE)
        if px.ndim != 3 or px.shape[2] != 4:
            raise ShapeError(f"ImageRgba pixels must be (height, width, 4), got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ShapeError("ImageRgba needs width, height >= 1")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("ImageRgba channel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height

    @property
    def rgb(self) -> np.ndarray:
        return self.pixels[..., :3]

    @property
    def alpha(self) -> np.ndarray:
        return self.pixels[..., 3]

    @classmethod
    def filled(cls, width: int, height: int, rgba: Sequence[float]) -> "ImageRgba":
        return cls(np.broadcast_to(np.asarray(rgba, dtype=DTYPE), (height, width, 4)).copy())

    def __eq__(self, other):
        return isinstance(other, ImageRgba) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray  # (height, width), float32 in [0, 1], higher = closer

    def __post_init__(self):
        v = np.asarray(self.values, dtype=DTYPE)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ShapeError(f"DepthMap values must be (height, width), got {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("DepthMap values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other):
        return isinstance(other, DepthMap) and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class BinaryMask:
    values: np.ndarray  # (height, width), uint8 in {0, 1}

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ShapeError(f"BinaryMask values must be (height, width), got {v.shape}")
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("BinaryMask values must be exactly 0 or 1")
        object.__setattr__(self, "values", v.astype(np.uint8))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def count(self) -> int:
        return int(self.values.sum())

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class AffineParams:
    """Scale then shift placement; shifts are in normalized units ([-1, 1] spans the image)."""

    sx: float = 1.0
    sy: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        vals = (self.sx, self.sy, self.tx, self.ty)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"AffineParams must be finite, got {vals}")
        if self.sx <= 0 or self.sy <= 0:
            raise ValueError(f"AffineParams scales must be positive, got sx={self.sx}, sy={self.sy}")

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls()

    def as_array(self) -> np.ndarray:
        return np.array([self.sx, self.sy, self.tx, self.ty], dtype=DTYPE).reshape(1, 4, 1, 1)

    def to_dict(self) -> dict:
        return {"sx": float(self.sx), "sy": float(self.sy), "tx": float(self.tx), "ty": float(self.ty)}


# ---------------------------------------------------------------------------
# 8-bit conversion
# ---------------------------------------------------------------------------

def to_codes(values: np.ndarray, max_code: int = 255) -> np.ndarray:
    """Quantize [0, 1] values to integer codes with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    dtype = np.uint8 if max_code == 255 else np.uint16
    return np.floor(v * max_code + 0.5).astype(dtype)


def from_codes(codes: np.ndarray, max_code: int = 255) -> np.ndarray:
    return (np.asarray(codes, dtype=np.float64) / max_code).astype(DTYPE)


def quantize(image: ImageRgba) -> ImageRgba:
    """Snap an image onto the 8-bit grid it would have after a PNG round trip."""
    return ImageRgba(from_codes(to_codes(image.pixels)))


def quantize_depth(depth: DepthMap, max_code: int = 65535) -> DepthMap:
    return DepthMap(from_codes(to_codes(depth.values, max_code), max_code))


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def png_header(path) -> Tuple[int, int, int, int]:
    """(width, height, bit_depth, color_type) from a PNG's IHDR chunk."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(33)
    except OSError as exc:
        raise ImageIOError(path, f"cannot read file ({exc.strerror})") from exc
    if len(head) < 33 or head[:8] != _PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise ImageIOError(path, "not a PNG file")
    width, height, bit_depth, color_type = struct.unpack(">IIBB", head[16:26])
    return width, height, bit_depth, color_type


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise ImageIOError(path, f"cannot decode image ({exc})") from exc
    return img


def load_image(path) -> ImageRgba:
    """Read an 8-bit RGB or RGBA PNG; RGB gains an opaque alpha channel."""
    _, _, bit_depth, color_type = png_header(path)
    if bit_depth != 8:
        raise UnsupportedBitDepthError(path, f"unsupported bit depth {bit_depth}; expected 8-bit RGB/RGBA")
    if color_type not in (2, 6):
        raise ImageIOError(path, f"unsupported PNG color type {color_type}; expected RGB or RGBA")
    img = _open(path).convert("RGBA")
    return ImageRgba(from_codes(np.asarray(img)))


def save_image(image: ImageRgba, path) -> None:
    try:
        Image.fromarray(to_codes(image.pixels)).save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(path, f"cannot write image ({exc})") from exc


def load_depth(path) -> DepthMap:
    """Read an 8- or 16-bit grayscale PNG, mapping codes linearly onto [0, 1]."""
    _, _, bit_depth, color_type = png_header(path)
    if color_type != 0:
        raise ImageIOError(path, f"depth maps must be single-channel grayscale (PNG color type {color_type})")
    if bit_depth not in (8, 16):
        raise UnsupportedBitDepthError(path, f"unsupported depth bit depth {bit_depth}; expected 8 or 16")
    arr = np.asarray(_open(path)).astype(np.int64)
    max_code = 255 if bit_depth == 8 else 65535
    return DepthMap(from_codes(arr, max_code))


def save_depth(depth: DepthMap, path, bits: int = 16) -> None:
    if bits not in (8, 16):
        raise ValueError("depth PNGs are written with 8 or 16 bits")
    codes = to_codes(depth.values, 255 if bits == 8 else 65535)
    try:
        img = Image.fromarray(codes) if bits == 8 else Image.fromarray(codes.astype("<u2"))
        img.save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(path, f"cannot write depth map ({exc})") from exc


# ---------------------------------------------------------------------------
# compositing primitives
# ---------------------------------------------------------------------------

def _same_size(a, b, what: str) -> None:
    if (a.width, a.height) != (b.width, b.height):
        raise ShapeError(f"{what}: size mismatch {a.width}x{a.height} vs {b.width}x{b.height}")


def threshold_depth(depth: DepthMap, threshold: float) -> BinaryMask:
    """1 where depth >= threshold (threshold inclusive), else 0."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return BinaryMask((depth.values >= DTYPE(threshold)).astype(np.uint8))


def _over(fg: np.ndarray, bg: np.ndarray) -> np.ndarray:
    af = fg[..., 3:4]
    rgb = af * fg[..., :3] + (1.0 - af) * bg[..., :3]
    a = af + (1.0 - af) * bg[..., 3:4]
    return np.clip(np.concatenate([rgb, a], axis=-1), 0.0, 1.0).astype(DTYPE)


def alpha_over(foreground: ImageRgba, background: ImageRgba) -> ImageRgba:
    _same_size(foreground, background, "alpha_over")
    return ImageRgba(_over(foreground.pixels, background.pixels))


def affine_place(foreground: ImageRgba, params: AffineParams) -> ImageRgba:
    """Bilinearly resample ``foreground`` under ``params``; uncovered pixels become transparent."""
    x = np.ascontiguousarray(foreground.pixels.transpose(2, 0, 1)[None])
    h, w = foreground.height, foreground.width
    if h < 2 or w < 2:
        raise ShapeError("affine_place needs images at least 2x2")
    wx, _ = F.interpolation_matrices(F.source_coords(w, [params.sx], [params.tx]), w)
    wy, _ = F.interpolation_matrices(F.source_coords(h, [params.sy], [params.ty]), h)
    out = F.warp_np(x, wy, wx)[0].transpose(1, 2, 0)
    return ImageRgba(np.clip(out, 0.0, 1.0))


def chroma_key_mask(rendered: ImageRgba, key_color: Sequence[float], tolerance: float = DEFAULT_CHROMA_TOLERANCE) -> BinaryMask:
    """0 where the pixel matches ``key_color`` within ``tolerance`` on every RGB channel."""
    key = np.asarray(key_color, dtype=np.float64)
    if key.shape != (3,) or key.min() < 0.0 or key.max() > 1.0:
        raise ValueError(f"key_color must be three values in [0, 1], got {key_color}")
    diff = np.abs(rendered.rgb.astype(np.float64) - key)
    is_key = np.all(diff <= tolerance + _EPS * (tolerance > 0), axis=-1)
    return BinaryMask((~is_key).astype(np.uint8))


def classical_composite(fg_placed: ImageRgba, fg_depth: float, background: ImageRgba, depth: DepthMap) -> ImageRgba:
    """Depth-ordered composite: background wins wherever its depth >= ``fg_depth``."""
    _same_size(fg_placed, background, "classical_composite")
    _same_size(depth, background, "classical_composite")
    if not 0.0 <= fg_depth <= 1.0:
        raise ValueError(f"fg_depth must lie in [0, 1], got {fg_depth}")
    occluded = (depth.values >= DTYPE(fg_depth))[..., None]
    blended = _over(fg_placed.pixels, background.pixels)
    return ImageRgba(np.where(occluded, background.pixels, blended))


# ---------------------------------------------------------------------------
# conversion to network tensors
# ---------------------------------------------------------------------------

def images_to_array(images: Sequence[ImageRgba]) -> np.ndarray:
    """Stack images as (N, 4, H, W) in [-1, 1]."""
    return np.stack([im.pixels.transpose(2, 0, 1) for im in images]).astype(DTYPE) * DTYPE(2) - DTYPE(1)


def depths_to_array(depths: Sequence[DepthMap]) -> np.ndarray:
    return np.stack([d.values[None] for d in depths]).astype(DTYPE) * DTYPE(2) - DTYPE(1)


def masks_to_array(masks: Sequence[BinaryMask]) -> np.ndarray:
    return np.stack([m.values[None] for m in masks]).astype(DTYPE)


def array_to_images(arr: np.ndarray) -> list:
    """Inverse of :func:`images_to_array`, clipping into [0, 1]."""
    arr = np.clip((np.asarray(arr, dtype=DTYPE) + DTYPE(1)) * DTYPE(0.5), 0.0, 1.0)
    return [ImageRgba(a.transpose(1, 2, 0)) for a in arr]
