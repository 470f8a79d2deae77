"""Images, bilinear interpolation and image I/O.

Coordinates follow a 1-based grid: pixel ``(i, j)`` with ``1 <= i, j <= W``
is stored at ``pixels[i - 1, j - 1]``. The first coordinate indexes rows.
A deformed coordinate ``(x, y)`` with ``1 <= x, y <= W`` is evaluated by
bilinear interpolation inside the unit cell (interpolation region)
``[m, m + 1] x [n, n + 1]`` that contains it.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, FormatError

IDX3_MAGIC = 0x00000803
IDX1_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Image:
    """A ``W x W`` image with ``C`` channels, stored as float64 ``(W, W, C)``."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1 or arr.shape[2] < 1:
            raise DomainError(f"image must have shape (W, W, C), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DomainError("image contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def value(self, i: int, j: int) -> np.ndarray:
        """Channel vector of grid pixel ``(i, j)`` (1-based)."""
        return self.pixels[i - 1, j - 1]

    def flat(self) -> np.ndarray:
        """Row-major ``(i, j, c)`` flattening, the network input order."""
        return self.pixels.reshape(-1)


@dataclass(frozen=True)
class RegionCoeffs:
    """Bilinear interpolant ``A + B v + C w + D v w`` on region ``[m, m+1] x [n, n+1]``.

    ``v`` and ``w`` are absolute (1-based) image coordinates.
    """

    m: int
    n: int
    A: float
    B: float
    C: float
    D: float

    def __call__(self, v, w):
        return self.A + self.B * v + self.C * w + self.D * v * w


@dataclass(frozen=True, eq=False)
class VectorField:
    """Per-pixel displacement ``(dx[i, j], dy[i, j])`` in grid units.

    ``dx`` moves along the first (row) coordinate, ``dy`` along the second.
    """

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        dx = np.array(self.dx, dtype=np.float64)
        dy = np.array(self.dy, dtype=np.float64)
        if dx.ndim != 2 or dx.shape[0] != dx.shape[1] or dx.shape != dy.shape:
            raise DomainError(f"vector field components must be square and equal, got {dx.shape}, {dy.shape}")
        dx.setflags(write=False)
        dy.setflags(write=False)
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)

    @property
    def width(self) -> int:
        return self.dx.shape[0]

    @classmethod
    def zeros(cls, width: int) -> "VectorField":
        return cls(np.zeros((width, width)), np.zeros((width, width)))

    def norm(self, p) -> float:
        """The T_p norm: the largest per-pixel l_p displacement length."""
        stacked = np.stack([self.dx, self.dy], axis=-1)
        return float(np.max(np.linalg.norm(stacked, ord=_np_ord(p), axis=-1)))

    def in_image(self) -> bool:
        w = self.width
        grid = np.arange(1, w + 1, dtype=np.float64)
        x = grid[:, None] + self.dx
        y = grid[None, :] + self.dy
        return bool(np.all((x >= 1) & (x <= w) & (y >= 1) & (y <= w)))

    def to_json(self) -> dict:
        return {"w": self.width, "dx": self.dx.tolist(), "dy": self.dy.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "VectorField":
        try:
            field = cls(obj["dx"], obj["dy"])
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"malformed vector field JSON: {exc}") from exc
        if field.width != obj.get("w", field.width):
            raise FormatError(f"declared width {obj['w']} does not match data width {field.width}")
        return field


def _np_ord(p):
    if p in (np.inf, float("inf"), "inf"):
        return np.inf
    return int(p)


def bilinear_coeffs(image: Image, channel: int, m: int, n: int) -> RegionCoeffs:
    """Coefficients of the interpolant on ``[m, m+1] x [n, n+1]`` in absolute coordinates.

    Obtained by expanding the four-corner weighted sum and grouping by
    monomials in ``v`` and ``w``.
    """
    w = image.width
    if not (1 <= m <= w - 1 and 1 <= n <= w - 1):
        raise DomainError(f"region ({m}, {n}) outside 1..{w - 1}")
    if not 0 <= channel < image.channels:
        raise DomainError(f"channel {channel} outside 0..{image.channels - 1}")
    p = image.pixels[:, :, channel]
    i00, i10 = p[m - 1, n - 1], p[m, n - 1]
    i01, i11 = p[m - 1, n], p[m, n]
    a, b = 1.0 + m, 1.0 + n
    return RegionCoeffs(
        m=m,
        n=n,
        A=float(i00 * a * b - i10 * m * b - i01 * a * n + i11 * m * n),
        B=float(-i00 * b + i10 * b + i01 * n - i11 * n),
        C=float(-i00 * a + i10 * m + i01 * a - i11 * m),
        D=float(i00 - i10 - i01 + i11),
    )


def region_of(coord: float, width: int) -> int:
    """Region index along one axis: floor with the last edge assigned to ``W - 1``."""
    return min(max(int(np.floor(coord)), 1), max(width - 1, 1))


def interpolate_many(pixels: np.ndarray, x, y) -> np.ndarray:
    """Vectorised bilinear interpolation of a ``(W, W, C)`` array.

    ``x`` and ``y`` are broadcastable arrays of 1-based coordinates; the result
    has shape ``broadcast(x, y).shape + (C,)``.
    """
    width = pixels.shape[0]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x, y = np.broadcast_arrays(x, y)
    if np.any(~((x >= 1) & (x <= width) & (y >= 1) & (y <= width))):
        raise DomainError(f"coordinate outside the image square [1, {width}]^2")
    if width == 1:
        return np.broadcast_to(pixels[0, 0], x.shape + (pixels.shape[2],)).copy()
    m = np.clip(np.floor(x).astype(np.intp), 1, width - 1)
    n = np.clip(np.floor(y).astype(np.intp), 1, width - 1)
    s = (x - m)[..., None]
    t = (y - n)[..., None]
    i00 = pixels[m - 1, n - 1]
    i10 = pixels[m, n - 1]
    i01 = pixels[m - 1, n]
    i11 = pixels[m, n]
    return (i00 * (1 - s) + i10 * s) * (1 - t) + (i01 * (1 - s) + i11 * s) * t


def interpolate(image: Image, coord: Sequence[float]) -> np.ndarray:
    """Channel vector of the bilinear interpolant at 1-based ``coord``."""
    x, y = float(coord[0]), float(coord[1])
    return interpolate_many(image.pixels, x, y)


def deform(image: Image, field: VectorField) -> Image:
    """The image read back at every displaced pixel position."""
    if field.width != image.width:
        raise DomainError(f"field width {field.width} does not match image width {image.width}")
    grid = np.arange(1, image.width + 1, dtype=np.float64)
    return Image(interpolate_many(image.pixels, grid[:, None] + field.dx, grid[None, :] + field.dy))


# --------------------------------------------------------------------------
# IDX files
# --------------------------------------------------------------------------

def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def load_idx(path) -> list[Image]:
    """Read an IDX3 unsigned-byte image file (MNIST layout), scaled to [0, 1].

    Header: big-endian uint32 magic 0x00000803, count, rows, cols; then
    ``count * rows * cols`` bytes. Gzip-compressed files are accepted when
    the name ends in ``.gz``.
    """
    with _open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16:
        raise FormatError(f"{path}: truncated IDX header")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX3_MAGIC:
        raise FormatError(f"{path}: bad IDX3 magic 0x{magic:08x}")
    if rows != cols:
        raise FormatError(f"{path}: only square images are supported, got {rows}x{cols}")
    need = count * rows * cols
    if len(data) - 16 < need:
        raise FormatError(f"{path}: truncated IDX payload ({len(data) - 16} of {need} bytes)")
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=16)
    arr = raw.reshape(count, rows, cols).astype(np.float64) / 255.0
    return [Image(a) for a in arr]


def save_idx(images: Sequence[Image], path) -> None:
    """Write single-channel images as IDX3 bytes (values rounded from ``255 * v``)."""
    if not images:
        raise FormatError("cannot write an empty IDX file")
    width = images[0].width
    stack = []
    for im in images:
        if im.width != width or im.channels != 1:
            raise FormatError("IDX3 images must share one width and have a single channel")
        stack.append(np.clip(np.rint(im.pixels[:, :, 0] * 255.0), 0, 255).astype(np.uint8))
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX3_MAGIC, len(stack), width, width))
        fh.write(np.stack(stack).tobytes())


def load_idx_labels(path) -> np.ndarray:
    """Read an IDX1 unsigned-byte label file (magic 0x00000801)."""
    with _open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    magic, count = struct.unpack(">II", data[:8])
    if magic != IDX1_MAGIC:
        raise FormatError(f"{path}: bad IDX1 magic 0x{magic:08x}")
    if len(data) - 8 < count:
        raise FormatError(f"{path}: truncated IDX payload")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=8).astype(np.int64)


# --------------------------------------------------------------------------
# tensor JSON
# --------------------------------------------------------------------------

def image_to_json(image: Image) -> dict:
    data = image.pixels[:, :, 0] if image.channels == 1 else image.pixels
    return {"width": image.width, "channels": image.channels, "data": data.tolist()}


def image_from_json(obj: dict) -> Image:
    try:
        width = int(obj["width"])
        channels = int(obj["channels"])
        data = np.array(obj["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed tensor JSON: {exc}") from exc
    if channels == 1 and data.ndim == 2:
        data = data[:, :, None]
    if data.shape != (width, width, channels):
        raise FormatError(f"tensor JSON declares ({width}, {width}, {channels}) but data has shape {data.shape}")
    return Image(data)


def load_tensor_json(path) -> Image:
    """Read ``{"width": W, "channels": C, "data": [...]}`` (row-major nesting)."""
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    return image_from_json(obj)


def save_tensor_json(image: Image, path) -> None:
    # json emits shortest round-trip reprs, so float64 values survive exactly
    with open(path, "w") as fh:
        json.dump(image_to_json(image), fh)


def load_dataset(path, fmt: str | None = None) -> list[Image]:
    """Load a dataset as a list of images; ``fmt`` is ``idx`` or ``tensor-json``.

    A tensor-JSON file may hold one image object or a list of them.
    """
    path = Path(path)
    if fmt is None:
        fmt = "tensor-json" if path.suffix == ".json" else "idx"
    if fmt == "idx":
        return load_idx(path)
    if fmt == "tensor-json":
        with open(path) as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: {exc}") from exc
        if isinstance(obj, list):
            return [image_from_json(o) for o in obj]
        return [image_from_json(obj)]
    raise FormatError(f"unknown dataset format {fmt!r}")
