"""Core 2-D grid types, bilinear sampling/warping, finite differences and file I/O.

Conventions used across the whole package:

* A point is ``(px, py) = (column, row)`` with the origin at the center of
  pixel ``(0, 0)``.
* Sampling outside the grid clamps coordinates to ``[0, dim - 1]`` (border
  replication), which makes every sampling operation total.
* Images are float32 internally; 8-bit PGM import maps [0, 255] -> [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

PLSG_MAGIC = b"PLSG"
PLSG_VERSION = 1


class GridIOError(Exception):
    """Base class for grid file format errors."""


class BadMagicError(GridIOError):
    pass


class BadVersionError(GridIOError):
    pass


class TruncatedPayloadError(GridIOError):
    pass


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class Image2D:
    """A single-channel intensity grid, shape (H, W), nominal range [0, 1]."""

    data: torch.Tensor

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise ValueError(f"Image2D expects a 2-D tensor, got shape {tuple(self.data.shape)}")
        _check_finite(self.data, "Image2D")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @staticmethod
    def from_array(a, dtype: torch.dtype = torch.float32) -> "Image2D":
        return Image2D(torch.as_tensor(np.asarray(a), dtype=dtype))

    @staticmethod
    def zeros(height: int, width: int, dtype: torch.dtype = torch.float32) -> "Image2D":
        return Image2D(torch.zeros(height, width, dtype=dtype))

    def numpy(self) -> np.ndarray:
        return self.data.detach().cpu().numpy()


@dataclass(frozen=True)
class VectorField2D:
    """A 2-channel grid, shape (2, H, W); channel 0 = x component, 1 = y."""

    u: torch.Tensor

    def __post_init__(self) -> None:
        if self.u.ndim != 3 or self.u.shape[0] != 2:
            raise ValueError(f"VectorField2D expects shape (2, H, W), got {tuple(self.u.shape)}")
        _check_finite(self.u, "VectorField2D")

    @property
    def height(self) -> int:
        return self.u.shape[1]

    @property
    def width(self) -> int:
        return self.u.shape[2]

    @staticmethod
    def from_array(a, dtype: torch.dtype = torch.float32) -> "VectorField2D":
        return VectorField2D(torch.as_tensor(np.asarray(a), dtype=dtype))

    @staticmethod
    def zeros(height: int, width: int, dtype: torch.dtype = torch.float32) -> "VectorField2D":
        return VectorField2D(torch.zeros(2, height, width, dtype=dtype))

    def numpy(self) -> np.ndarray:
        return self.u.detach().cpu().numpy()


# ---------------------------------------------------------------------------
# sampling / warping on raw tensors (differentiable, used by the training path)
# ---------------------------------------------------------------------------

def identity_grid(height: int, width: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Pixel-center coordinates, shape (2, H, W): [0] = x (column), [1] = y (row)."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype), indexing="ij"
    )
    return torch.stack([xs, ys], dim=0)


def sample_values(values: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``values`` (C, H, W) at continuous ``coords`` (2, ...).

    Coordinates are clamped to the grid (border replication). Differentiable
    with respect to both ``values`` and ``coords``. Returns shape (C, ...).
    """
    if values.ndim != 3:
        raise ValueError(f"expected (C, H, W) values, got {tuple(values.shape)}")
    if coords.shape[0] != 2:
        raise ValueError(f"expected (2, ...) coords, got {tuple(coords.shape)}")
    c, h, w = values.shape
    out_shape = coords.shape[1:]
    px = coords[0].reshape(-1).clamp(0.0, float(w - 1))
    py = coords[1].reshape(-1).clamp(0.0, float(h - 1))

    x0 = px.floor().clamp(0.0, float(max(w - 2, 0)))
    y0 = py.floor().clamp(0.0, float(max(h - 2, 0)))
    fx = px - x0
    fy = py - y0
    ix0 = x0.long()
    iy0 = y0.long()
    ix1 = (ix0 + 1).clamp(max=w - 1)
    iy1 = (iy0 + 1).clamp(max=h - 1)

    flat = values.reshape(c, h * w)
    i00 = (iy0 * w + ix0).unsqueeze(0).expand(c, -1)
    i01 = (iy0 * w + ix1).unsqueeze(0).expand(c, -1)
    i10 = (iy1 * w + ix0).unsqueeze(0).expand(c, -1)
    i11 = (iy1 * w + ix1).unsqueeze(0).expand(c, -1)
    v00 = flat.gather(1, i00)
    v01 = flat.gather(1, i01)
    v10 = flat.gather(1, i10)
    v11 = flat.gather(1, i11)

    wx0 = (1.0 - fx).unsqueeze(0)
    wx1 = fx.unsqueeze(0)
    wy0 = (1.0 - fy).unsqueeze(0)
    wy1 = fy.unsqueeze(0)
    out = wy0 * (wx0 * v00 + wx1 * v01) + wy1 * (wx0 * v10 + wx1 * v11)
    return out.reshape(c, *out_shape)


def warp_values(values: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Warp ``values`` (C, H, W) or (H, W) by a displacement field (2, H, W).

    out(p) = values(p + disp(p)), sampled bilinearly.
    """
    squeeze = values.ndim == 2
    if squeeze:
        values = values.unsqueeze(0)
    if values.shape[-2:] != disp.shape[-2:]:
        raise ValueError(
            f"image {tuple(values.shape[-2:])} and displacement {tuple(disp.shape[-2:])} differ"
        )
    grid = identity_grid(disp.shape[1], disp.shape[2], dtype=disp.dtype)
    out = sample_values(values, grid + disp)
    return out.squeeze(0) if squeeze else out


def gradient_values(field: torch.Tensor) -> torch.Tensor:
    """Forward-difference spatial gradient of (H, W) -> (2, H, W).

    The trailing row/column is replicated, so the gradient there is zero.
    Channel 0 = d/dx (along columns), channel 1 = d/dy (along rows).
    """
    if field.ndim != 2:
        raise ValueError(f"expected (H, W), got {tuple(field.shape)}")
    h, w = field.shape
    if h < 2 or w < 2:
        raise ValueError("gradient needs height and width >= 2")
    gx = torch.zeros_like(field)
    gy = torch.zeros_like(field)
    gx[:, :-1] = field[:, 1:] - field[:, :-1]
    gy[:-1, :] = field[1:, :] - field[:-1, :]
    return torch.stack([gx, gy], dim=0)


# ---------------------------------------------------------------------------
# public wrapper API
# ---------------------------------------------------------------------------

def bilinear_sample(img: Image2D, p: tuple[float, float]) -> float:
    """Sample one continuous point (px, py); total via border replication.

    Evaluated in float64 so the service path and in-process path agree
    bit-for-bit.
    """
    coords = torch.tensor([[p[0]], [p[1]]], dtype=torch.float64)
    out = sample_values(img.data.to(torch.float64).unsqueeze(0), coords)
    return float(out[0, 0])


def warp(img: Image2D, phi: "DeformationField") -> Image2D:  # noqa: F821
    """Resample ``img`` through a deformation: out(p) = img(phi(p))."""
    return Image2D(warp_values(img.data, phi.disp.u))


def spatial_gradient(field: Image2D) -> VectorField2D:
    return VectorField2D(gradient_values(field.data))


# ---------------------------------------------------------------------------
# PLSG binary grid format
# ---------------------------------------------------------------------------

def write_grid(path: str | Path, grid: Image2D | VectorField2D) -> None:
    """Write a grid as: magic 'PLSG', u32 version=1, u32 channels/height/width,
    float32 little-endian payload, channel-major then row-major."""
    if isinstance(grid, Image2D):
        payload = grid.numpy().astype("<f4")[None, :, :]
    elif isinstance(grid, VectorField2D):
        payload = grid.numpy().astype("<f4")
    else:
        raise TypeError(f"cannot write {type(grid).__name__} as a grid")
    ch, h, w = payload.shape
    with open(path, "wb") as f:
        f.write(PLSG_MAGIC)
        f.write(struct.pack("<IIII", PLSG_VERSION, ch, h, w))
        f.write(payload.tobytes(order="C"))


def read_grid(path: str | Path) -> Image2D | VectorField2D:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != PLSG_MAGIC:
        raise BadMagicError(f"{path}: not a PLSG grid file")
    if len(raw) < 20:
        raise TruncatedPayloadError(f"{path}: header truncated")
    version, ch, h, w = struct.unpack("<IIII", raw[4:20])
    if version != PLSG_VERSION:
        raise BadVersionError(f"{path}: unsupported grid version {version}")
    expected = 20 + 4 * ch * h * w
    if len(raw) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload truncated ({len(raw) - 20} bytes, expected {expected - 20})"
        )
    payload = np.frombuffer(raw[20:expected], dtype="<f4").reshape(ch, h, w)
    if ch == 1:
        return Image2D.from_array(payload[0].copy())
    if ch == 2:
        return VectorField2D.from_array(payload.copy())
    raise GridIOError(f"{path}: unsupported channel count {ch}")


# ---------------------------------------------------------------------------
# PGM (P5, maxval 255) interchange
# ---------------------------------------------------------------------------

def write_pgm(path: str | Path, img: Image2D) -> None:
    a = np.clip(img.numpy(), 0.0, 1.0)
    b = np.round(a * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
        f.write(b.tobytes(order="C"))


def read_pgm(path: str | Path) -> Image2D:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise GridIOError(f"{path}: not a binary PGM (P5) file")
    # header tokens: magic, width, height, maxval; '#' comments allowed
    tokens: list[bytes] = []
    i = 2
    while len(tokens) < 3:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace():
            j += 1
        if j == i:
            raise GridIOError(f"{path}: malformed PGM header")
        tokens.append(raw[i:j])
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise GridIOError(f"{path}: only maxval 255 supported, got {maxval}")
    if len(raw) - i < w * h:
        raise TruncatedPayloadError(f"{path}: PGM payload truncated")
    a = np.frombuffer(raw[i : i + w * h], dtype=np.uint8).reshape(h, w)
    return Image2D.from_array(a.astype(np.float32) / 255.0)
