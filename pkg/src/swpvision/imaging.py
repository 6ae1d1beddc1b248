"""Raster images, pixel-space geometry, and the filters built on them.

Images are plain byte buffers (row-major, 8-bit, 1 or 3 channels) so every
other stage can treat them as immutable values.  numpy is used internally
for the arithmetic; the buffer is the canonical representation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: ITU-R BT.601 luma weights used for RGB -> grayscale conversion.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class InvalidBoxError(ValueError):
    """A bounding box is degenerate or does not intersect its image."""


class TooSmallError(ValueError):
    """The image is below the minimum size an operation supports."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel box, half-open: [x_min, x_max) x [y_min, y_max).

    Origin is the top-left corner of the image.  The half-open convention
    makes area and intersection arithmetic exact integer counting.
    """

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidBoxError(
                f"degenerate box ({self.x_min},{self.y_min},{self.x_max},{self.y_max})"
            )

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def clamped(self, frame_w: int, frame_h: int) -> "BoundingBox":
        """Clip to frame bounds; raises InvalidBoxError if nothing is left."""
        x0 = max(0, self.x_min)
        y0 = max(0, self.y_min)
        x1 = min(frame_w, self.x_max)
        y1 = min(frame_h, self.y_max)
        if x0 >= x1 or y0 >= y1:
            raise InvalidBoxError(
                f"box {self.as_tuple()} lies outside a {frame_w}x{frame_h} frame"
            )
        return BoundingBox(x0, y0, x1, y1)


@dataclass(frozen=True)
class Circle:
    """Circle with integer center and radius (pixels), r >= 1."""

    cx: int
    cy: int
    r: int

    def __post_init__(self) -> None:
        if self.r < 1:
            raise ValueError(f"circle radius must be >= 1, got {self.r}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.cx, self.cy, self.r)


@dataclass(frozen=True)
class Image:
    """8-bit raster image: row-major byte buffer, 1 (gray) or 3 (RGB) channels."""

    width: int
    height: int
    channels: int
    pixels: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dims must be >= 1, got {self.width}x{self.height}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        expected = self.width * self.height * self.channels
        if len(self.pixels) != expected:
            raise ValueError(
                f"pixel buffer has {len(self.pixels)} bytes, expected {expected}"
            )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Image":
        """Build from a (H,W) or (H,W,C) uint8-compatible array."""
        a = np.asarray(arr)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] not in (1, 3):
            raise ValueError(f"expected (H,W) or (H,W,1|3) array, got shape {a.shape}")
        a = np.clip(np.round(a), 0, 255).astype(np.uint8) if a.dtype != np.uint8 else a
        h, w, c = a.shape
        return cls(width=w, height=h, channels=c, pixels=a.tobytes())

    def to_array(self) -> np.ndarray:
        """Return an (H,W) uint8 view for grayscale, (H,W,3) for RGB."""
        a = np.frombuffer(self.pixels, dtype=np.uint8).reshape(
            self.height, self.width, self.channels
        )
        return a[:, :, 0] if self.channels == 1 else a

    def full_box(self) -> BoundingBox:
        return BoundingBox(0, 0, self.width, self.height)


@dataclass(frozen=True)
class GradientField:
    """Per-pixel horizontal/vertical derivatives and their magnitude."""

    gx: np.ndarray
    gy: np.ndarray
    magnitude: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.gx.shape


def to_grayscale(img: Image) -> Image:
    """Convert RGB to grayscale with BT.601 luma weights, round-half-up.

    Grayscale input is returned unchanged.
    """
    if img.channels == 1:
        return img
    rgb = img.to_array().astype(np.float64)
    luma = rgb[:, :, 0] * LUMA_WEIGHTS[0] + rgb[:, :, 1] * LUMA_WEIGHTS[1] + rgb[:, :, 2] * LUMA_WEIGHTS[2]
    gray = np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)
    return Image.from_array(gray)


def crop(img: Image, box: BoundingBox) -> Image:
    """Copy the pixels under `box`, clamped to the image bounds first.

    Raises InvalidBoxError when the box lies entirely outside the image.
    """
    clipped = box.clamped(img.width, img.height)
    a = img.to_array()
    sub = a[clipped.y_min : clipped.y_max, clipped.x_min : clipped.x_max]
    return Image.from_array(np.ascontiguousarray(sub))


def resize(img: Image, w: int, h: int, mode: str = "bilinear") -> Image:
    """Resample to exactly (w, h) with half-pixel center alignment.

    mode is "bilinear" (default) or "nearest".  Bilinear output is rounded
    half-up to 8 bits.
    """
    if w < 1 or h < 1:
        raise ValueError(f"target dims must be >= 1, got {w}x{h}")
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown resize mode {mode!r}")
    if w == img.width and h == img.height and mode == "nearest":
        return img

    a = img.to_array()
    if a.ndim == 2:
        a = a[:, :, None]
    src_h, src_w = a.shape[:2]
    # Half-pixel centers: dst pixel i samples src coordinate (i+0.5)*scale - 0.5.
    xs = (np.arange(w, dtype=np.float64) + 0.5) * (src_w / w) - 0.5
    ys = (np.arange(h, dtype=np.float64) + 0.5) * (src_h / h) - 0.5

    if mode == "nearest":
        xi = np.clip(np.floor(xs + 0.5).astype(np.int64), 0, src_w - 1)
        yi = np.clip(np.floor(ys + 0.5).astype(np.int64), 0, src_h - 1)
        out = a[yi[:, None], xi[None, :]]
    else:
        x0 = np.clip(np.floor(xs).astype(np.int64), 0, src_w - 1)
        y0 = np.clip(np.floor(ys).astype(np.int64), 0, src_h - 1)
        x1 = np.minimum(x0 + 1, src_w - 1)
        y1 = np.minimum(y0 + 1, src_h - 1)
        fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
        fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
        a64 = a.astype(np.float64)
        top = a64[y0[:, None], x0[None, :]] * (1 - fx) + a64[y0[:, None], x1[None, :]] * fx
        bot = a64[y1[:, None], x0[None, :]] * (1 - fx) + a64[y1[:, None], x1[None, :]] * fx
        out = np.clip(np.floor(top * (1 - fy) + bot * fy + 0.5), 0, 255).astype(np.uint8)

    out = out[:, :, 0] if img.channels == 1 else out
    return Image.from_array(np.ascontiguousarray(out))


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


def sobel(img: Image) -> GradientField:
    """3x3 Sobel derivatives of a grayscale image, edge-replicated borders.

    Raises TooSmallError for images smaller than 3x3.
    """
    if img.channels != 1:
        raise ValueError("sobel expects a grayscale image")
    if img.width < 3 or img.height < 3:
        raise TooSmallError(f"sobel needs at least 3x3, got {img.width}x{img.height}")
    a = np.pad(img.to_array().astype(np.float64), 1, mode="edge")
    gx = np.zeros((img.height, img.width), dtype=np.float64)
    gy = np.zeros_like(gx)
    for dy in range(3):
        for dx in range(3):
            wx = _SOBEL_X[dy, dx]
            wy = _SOBEL_Y[dy, dx]
            window = a[dy : dy + img.height, dx : dx + img.width]
            if wx:
                gx += wx * window
            if wy:
                gy += wy * window
    return GradientField(gx=gx, gy=gy, magnitude=np.hypot(gx, gy))
