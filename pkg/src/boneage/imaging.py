"""Grayscale images and the geometric transforms the pipeline needs.

A GrayImage is a (height, width) float32 array with values in [0, 1].
File formats: binary PGM (P5, maxval 255) both ways, 8-bit PNG read-only
(RGB collapsed with luminance weights 0.299/0.587/0.114).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ImageIOError

_RGB_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class GrayImage:
    """Single-channel image, pixels row-major in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.pixels, dtype=np.float32)
        if a.ndim != 2:
            raise ContractError(f"GrayImage needs a 2-d array, got {a.ndim}-d")
        if a.size == 0:
            raise ContractError("GrayImage must have at least one pixel")
        self.pixels = a

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def from_array(cls, a, clip: bool = False) -> "GrayImage":
        a = np.asarray(a, dtype=np.float32)
        if clip:
            a = np.clip(a, 0.0, 1.0)
        elif a.size and (a.min() < 0.0 or a.max() > 1.0):
            raise ContractError(
                f"pixel values outside [0, 1]: min={float(a.min())}, max={float(a.max())}"
            )
        return cls(a)

    def copy(self) -> "GrayImage":
        return GrayImage(self.pixels.copy())


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _read_pgm(raw: bytes, path: Path) -> GrayImage:
    # header tokens may be separated by whitespace and '#' comments
    pos = 2  # past "P5"
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageIOError(f"{path}: truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise ImageIOError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise ImageIOError(f"{path}: only maxval 255 PGM supported, got {maxval}")
    need = width * height
    data = raw[pos : pos + need]
    if len(data) != need:
        raise ImageIOError(f"{path}: PGM pixel data truncated ({len(data)} of {need} bytes)")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width)
    return GrayImage(arr.astype(np.float32) / np.float32(255.0))


def _read_png(path: Path) -> GrayImage:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise ImageIOError(f"{path}: PNG support requires Pillow") from exc
    try:
        with Image.open(path) as im:
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.float32)
                return GrayImage(arr / np.float32(255.0))
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    lum = rgb @ _RGB_WEIGHTS
    return GrayImage.from_array(lum / np.float32(255.0), clip=True)


def load_image(path) -> GrayImage:
    """Read a PGM (P5) or PNG file; 8-bit values map to v/255."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    if raw[:2] == b"P5":
        return _read_pgm(raw, path)
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(path)
    raise ImageIOError(f"{path}: unsupported image format (need PGM P5 or PNG)")


def save_image(img: GrayImage, path) -> None:
    """Write binary PGM, pixel = round(255*p) with half-up rounding."""
    path = Path(path)
    bytes_ = np.floor(img.pixels * np.float32(255.0) + np.float32(0.5)).astype(np.uint8)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    try:
        path.write_bytes(header + bytes_.tobytes())
    except OSError as exc:
        raise ImageIOError(f"cannot write image {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def _bilinear_sample(px: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample at float coords with edge clamping; xs/ys same shape."""
    h, w = px.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0).astype(np.float32)
    fy = (ys - y0).astype(np.float32)
    top = px[y0, x0] * (1.0 - fx) + px[y0, x1] * fx
    bot = px[y1, x0] * (1.0 - fx) + px[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def resize_bilinear(img: GrayImage, new_width: int, new_height: int) -> GrayImage:
    """Bilinear resize with independent axis scaling and edge clamping."""
    if new_width < 1 or new_height < 1:
        raise ContractError(f"target extents must be >= 1, got {new_width}x{new_height}")
    h, w = img.pixels.shape
    if (new_width, new_height) == (w, h):
        return img.copy()
    # half-pixel centers so that same-size resize is the identity
    xs = (np.arange(new_width, dtype=np.float32) + 0.5) * (w / new_width) - 0.5
    ys = (np.arange(new_height, dtype=np.float32) + 0.5) * (h / new_height) - 0.5
    grid_x = np.broadcast_to(xs, (new_height, new_width))
    grid_y = np.broadcast_to(ys[:, None], (new_height, new_width))
    out = _bilinear_sample(img.pixels, grid_x, grid_y)
    return GrayImage.from_array(out, clip=True)


def _rot90_exact(px: np.ndarray, quarter_turns: int) -> np.ndarray:
    # +90 maps the old top-right corner to the new top-left
    return np.rot90(px, k=quarter_turns % 4)


def rotate(img: GrayImage, degrees: float) -> GrayImage:
    """Rotate about the image center; out-of-frame samples are 0.

    Multiples of 90 degrees are exact index permutations (no resampling);
    other angles use bilinear sampling.
    """
    degrees = float(degrees)
    if degrees % 90.0 == 0.0:
        return GrayImage(np.ascontiguousarray(_rot90_exact(img.pixels, int(degrees // 90))))
    h, w = img.pixels.shape
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    xs = np.arange(w, dtype=np.float32) - cx
    ys = np.arange(h, dtype=np.float32) - cy
    gx, gy = np.meshgrid(xs, ys)
    src_x = c * gx - s * gy + cx
    src_y = s * gx + c * gy + cy
    inside = (src_x >= 0) & (src_x <= w - 1) & (src_y >= 0) & (src_y <= h - 1)
    out = _bilinear_sample(img.pixels, src_x, src_y)
    out = np.where(inside, out, np.float32(0.0))
    return GrayImage.from_array(out, clip=True)


def flip_horizontal(img: GrayImage) -> GrayImage:
    """Reverse column order."""
    return GrayImage(np.ascontiguousarray(img.pixels[:, ::-1]))


def shift_crop(img: GrayImage, dx: int, dy: int) -> GrayImage:
    """Translate content by (dx, dy); vacated pixels become 0.

    Positive dx moves content right, positive dy moves it down. Output
    extents equal input extents.
    """
    h, w = img.pixels.shape
    dx, dy = int(dx), int(dy)
    if abs(dx) >= w or abs(dy) >= h:
        raise ContractError(f"shift ({dx}, {dy}) out of bounds for {w}x{h} image")
    out = np.zeros_like(img.pixels)
    src_x = slice(max(0, -dx), min(w, w - dx))
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_x = slice(max(0, dx), min(w, w + dx))
    dst_y = slice(max(0, dy), min(h, h + dy))
    out[dst_y, dst_x] = img.pixels[src_y, src_x]
    return GrayImage(out)
