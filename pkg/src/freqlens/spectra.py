"""Centered log-magnitude spectra and their patch-grid view.

An image is resized to a square side, reduced to a single channel, run
through a 2-D DFT, and stored as ``log1p(|F|)`` with the zero-frequency
bin shifted to the grid center (index ``side // 2`` on both axes).  The
grid can then be viewed as an ``n x n`` array of ``w x w`` patches.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

FLSG_MAGIC = b"FLSG"
FLSG_VERSION = 1


@dataclass(frozen=True)
class MagnitudeGrid:
    """Square log-magnitude spectrum, optionally center-shifted."""

    values: np.ndarray
    centered: bool = True

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"magnitude grid must be square 2-D, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("magnitude grid contains non-finite values")
        if v.size and v.min() < 0:
            raise ValueError("magnitude grid contains negative values")

    @property
    def side(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PatchGrid:
    """``n x n`` grid of ``w x w`` tiles; ``blocks`` has shape (n, n, w, w)."""

    n: int
    w: int
    blocks: np.ndarray

    def __post_init__(self):
        if self.n % 2 != 0:
            raise ValueError(f"patches-per-side must be even, got n={self.n}")
        if self.blocks.shape != (self.n, self.n, self.w, self.w):
            raise ValueError(
                f"blocks shape {self.blocks.shape} does not match n={self.n}, w={self.w}"
            )

    @property
    def side(self) -> int:
        return self.n * self.w


def _to_single_channel(image: np.ndarray) -> list[np.ndarray]:
    """Split an H x W or H x W x C array into per-channel 2-D float arrays."""
    if image.ndim == 2:
        return [image.astype(np.float64)]
    if image.ndim == 3:
        return [image[:, :, c].astype(np.float64) for c in range(image.shape[2])]
    raise ValueError(f"expected 2-D or 3-D image array, got ndim={image.ndim}")


def _resize_bilinear(channel: np.ndarray, height: int, width: int) -> np.ndarray:
    im = Image.fromarray(channel.astype(np.float32), mode="F")
    return np.asarray(im.resize((width, height), resample=Image.BILINEAR), dtype=np.float64)


def magnitude_spectrum(image: np.ndarray, side: int = 224, *, crop: bool = False) -> MagnitudeGrid:
    """Centered log-magnitude DFT of ``image`` at ``side x side`` pixels.

    Channels are resized bilinearly and averaged, then ``log1p(|fft2|)``
    is taken and the zero-frequency bin moved to the center.  With
    ``crop=True`` the image is first resized to ``side * 8 // 7`` pixels
    and center-cropped instead of resized directly.
    """
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite pixels")
    if side <= 0:
        raise ValueError("side must be positive")

    if crop:
        pre = side * 8 // 7
        channels = [_resize_bilinear(c, pre, pre) for c in _to_single_channel(image)]
        lo = (pre - side) // 2
        channels = [c[lo : lo + side, lo : lo + side] for c in channels]
    else:
        channels = [_resize_bilinear(c, side, side) for c in _to_single_channel(image)]
    gray = channels[0] if len(channels) == 1 else np.mean(channels, axis=0)

    mag = np.log1p(np.abs(np.fft.fft2(gray)))
    return MagnitudeGrid(values=np.fft.fftshift(mag), centered=True)


def patchify(grid: MagnitudeGrid, w: int) -> PatchGrid:
    """Split a grid into an even ``n x n`` array of ``w x w`` tiles."""
    side = grid.side
    if w <= 0 or side % w != 0:
        raise ValueError(f"grid side {side} is not divisible by patch width {w}")
    n = side // w
    if n % 2 != 0:
        raise ValueError(f"patches-per-side must be even, got n={n}")
    blocks = grid.values.reshape(n, w, n, w).transpose(0, 2, 1, 3).copy()
    return PatchGrid(n=n, w=w, blocks=blocks)


def unpatchify(patches: PatchGrid) -> np.ndarray:
    """Inverse of :func:`patchify`; bit-exact round trip."""
    n, w = patches.n, patches.w
    return patches.blocks.transpose(0, 2, 1, 3).reshape(n * w, n * w).copy()


def normalize_grid(grid: MagnitudeGrid) -> MagnitudeGrid:
    """Rescale values linearly to [0, 1]; constant grids map to all zeros."""
    v = grid.values
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        out = np.zeros_like(v)
    else:
        out = (v - lo) / (hi - lo)
    return MagnitudeGrid(values=out, centered=grid.centered)


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG/JPEG file into an H x W or H x W x C float array.

    Palette and alpha-carrying images are converted to plain RGB first.
    """
    with Image.open(path) as im:
        if im.mode in ("P", "RGBA", "LA", "PA", "CMYK"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64)
    if arr.size == 0:
        raise ValueError(f"empty image: {path}")
    return arr


def write_grid_png(grid: MagnitudeGrid, path: str | Path) -> None:
    """Write an 8-bit preview PNG of the normalized grid."""
    v = normalize_grid(grid).values
    Image.fromarray(np.round(v * 255.0).astype(np.uint8), mode="L").save(path, format="PNG")


def write_flsg(grid: MagnitudeGrid, path: str | Path) -> None:
    """Write raw little-endian f32 values behind a 16-byte FLSG header."""
    header = FLSG_MAGIC + struct.pack("<III", FLSG_VERSION, grid.side, 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(grid.values.astype("<f4").tobytes(order="C"))


def read_flsg(path: str | Path) -> MagnitudeGrid:
    """Read a grid written by :func:`write_flsg`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != FLSG_MAGIC:
        raise ValueError(f"bad magic/length in {path}")
    version, side, _reserved = struct.unpack("<III", raw[4:16])
    if version != FLSG_VERSION:
        raise ValueError(f"unsupported FLSG version {version} in {path}")
    expected = 16 + 4 * side * side
    if len(raw) != expected:
        raise ValueError(f"bad magic/length in {path}: expected {expected} bytes, got {len(raw)}")
    values = np.frombuffer(raw[16:], dtype="<f4").reshape(side, side).astype(np.float64)
    return MagnitudeGrid(values=values, centered=True)
