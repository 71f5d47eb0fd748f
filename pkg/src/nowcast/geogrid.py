"""Georeferenced rasters on regular lat/lon grids.

A :class:`GeoGrid` is the carrier for every raster in the package: model
inputs, targets and forecasts.  Grids are equirectangular, addressed by the
north-west corner ``(lat0, lon0)`` and a square pixel size ``res`` in degrees.
Rows run southwards, columns eastwards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

_RATIO_TOL = 1e-9


class GridShapeError(ValueError):
    """Raised when a raster's shape is incompatible with an operation."""


class ResolutionRatioError(ValueError):
    """Raised when two resolutions are not integer multiples of each other."""


@dataclass(frozen=True, eq=False)
class GeoGrid:
    lat0: float
    lon0: float
    res: float
    data: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise GridShapeError(f"data must be (height, width, channels), got {data.shape}")
        object.__setattr__(self, "data", data)
        if self.mask is None:
            object.__setattr__(self, "mask", np.ones(data.shape[:2], dtype=bool))
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != data.shape[:2]:
                raise GridShapeError(f"mask shape {mask.shape} does not match data {data.shape[:2]}")
            object.__setattr__(self, "mask", mask)
        if not self.res > 0:
            raise ValueError(f"res must be positive, got {self.res}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def check_global_extent(self) -> None:
        """Reject grids that are larger than the globe."""
        if self.height * self.res > 180 + _RATIO_TOL or self.width * self.res > 360 + _RATIO_TOL:
            raise GridShapeError(
                f"{self.height}x{self.width} at {self.res} deg exceeds the globe")

    def same_geometry(self, other: "GeoGrid") -> bool:
        return (self.height == other.height and self.width == other.width
                and np.isclose(self.res, other.res) and np.isclose(self.lat0, other.lat0)
                and np.isclose(self.lon0, other.lon0))

    def with_data(self, data, mask=None) -> "GeoGrid":
        return replace(self, data=data, mask=self.mask if mask is None else mask)

    def masked_to_zero(self) -> "GeoGrid":
        """Copy with the sentinel 0 written into every invalid pixel."""
        data = np.where(self.mask[:, :, None], self.data, 0).astype(self.data.dtype)
        return self.with_data(data)

    def __eq__(self, other):
        if not isinstance(other, GeoGrid):
            return NotImplemented
        return (self.same_geometry(other) and self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data) and np.array_equal(self.mask, other.mask))


@dataclass(frozen=True, eq=False)
class PaddedGrid:
    """A grid with cyclic longitude context on both sides."""

    inner: GeoGrid
    pad_lon_px: int
    data: np.ndarray
    mask: np.ndarray

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def as_grid(self) -> GeoGrid:
        return GeoGrid(self.inner.lat0, self.inner.lon0 - self.pad_lon_px * self.inner.res,
                       self.inner.res, self.data, self.mask)


def integer_ratio(a: float, b: float) -> int:
    """Return ``a / b`` as an int, raising if it is not integral."""
    ratio = a / b
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > _RATIO_TOL * max(1.0, ratio):
        raise ResolutionRatioError(f"{a} / {b} = {ratio} is not a positive integer")
    return k


def resample(g: GeoGrid, target_res: float) -> GeoGrid:
    """Change resolution by an integer factor.

    Upsampling replicates each source pixel into a ``k x k`` block.
    Downsampling averages the valid pixels of each block; a block without
    valid pixels becomes invalid with value 0.
    """
    if g.res >= target_res:
        k = integer_ratio(g.res, target_res)
        data = np.repeat(np.repeat(g.data, k, axis=0), k, axis=1)
        mask = np.repeat(np.repeat(g.mask, k, axis=0), k, axis=1)
        return GeoGrid(g.lat0, g.lon0, target_res, data, mask)

    k = integer_ratio(target_res, g.res)
    if g.height % k or g.width % k:
        raise GridShapeError(f"{g.height}x{g.width} is not divisible by block {k}")
    h, w, c = g.height // k, g.width // k, g.channels
    valid = g.mask.reshape(h, k, w, k)
    vals = np.where(g.mask[:, :, None], g.data, 0).reshape(h, k, w, k, c)
    total = vals.sum(axis=(1, 3), dtype=np.float64)
    count = valid.sum(axis=(1, 3))
    out_mask = count > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(out_mask[:, :, None], total / np.maximum(count, 1)[:, :, None], 0.0)
    return GeoGrid(g.lat0, g.lon0, target_res, mean.astype(g.data.dtype), out_mask)


def space_to_depth_array(x: np.ndarray, block: int) -> np.ndarray:
    """Stack each ``block x block`` tile into channels.

    Works on ``(..., H, W, C)`` arrays.  Output channel ``p * C + c`` holds
    channel ``c`` of the tile pixel at raster position ``p`` (row-major in
    the tile).  For ``C == 1`` this is plain raster order of the tile.
    """
    *lead, h, w, c = x.shape
    if h % block or w % block:
        raise GridShapeError(f"spatial shape {h}x{w} not divisible by block {block}")
    y = x.reshape(*lead, h // block, block, w // block, block, c)
    n = len(lead)
    y = np.moveaxis(y, n + 2, n + 1)  # (..., h/b, w/b, b_row, b_col, c)
    return y.reshape(*lead, h // block, w // block, block * block * c)


def depth_to_space_array(x: np.ndarray, block: int) -> np.ndarray:
    *lead, h, w, cb = x.shape
    if cb % (block * block):
        raise GridShapeError(f"{cb} channels not divisible by block^2 = {block * block}")
    c = cb // (block * block)
    y = x.reshape(*lead, h, w, block, block, c)
    n = len(lead)
    y = np.moveaxis(y, n + 2, n + 1)  # (..., h, b_row, w, b_col, c)
    return y.reshape(*lead, h * block, w * block, c)


def space_to_depth(g: GeoGrid, block: int) -> GeoGrid:
    """Trade spatial resolution for channels; ``res`` grows by ``block``.

    An output pixel is valid when any pixel of its tile is valid.
    """
    if block == 1:
        return g
    data = space_to_depth_array(g.data, block)
    mask = space_to_depth_array(g.mask[:, :, None], block)
    return GeoGrid(g.lat0, g.lon0, g.res * block, data, mask.any(axis=-1))


def depth_to_space(g: GeoGrid, block: int) -> GeoGrid:
    if block == 1:
        return g
    data = depth_to_space_array(g.data, block)
    mask = np.repeat(np.repeat(g.mask, block, axis=0), block, axis=1)
    return GeoGrid(g.lat0, g.lon0, g.res / block, data, mask)


def pad_longitude(g: GeoGrid, degrees: float) -> PaddedGrid:
    """Add ``degrees`` of wrapped longitude context on each side."""
    if degrees < 0:
        raise ValueError("padding must be non-negative")
    pad = 0 if degrees == 0 else integer_ratio(degrees, g.res)
    return pad_longitude_px(g, pad)


def pad_longitude_px(g: GeoGrid, pad: int) -> PaddedGrid:
    cols = np.arange(-pad, g.width + pad) % g.width
    return PaddedGrid(g, pad, g.data[:, cols], g.mask[:, cols])


def pad_cyclic_array(x: np.ndarray, pad_rows: int, pad_cols: int) -> np.ndarray:
    """Wrap-pad the two spatial axes of a ``(..., H, W, C)`` array."""
    h, w = x.shape[-3], x.shape[-2]
    rows = np.arange(-pad_rows, h + pad_rows) % h
    cols = np.arange(-pad_cols, w + pad_cols) % w
    return x[..., rows, :, :][..., cols, :]


# -- file format --------------------------------------------------------------

def write_grid(path, g: GeoGrid) -> None:
    """Write the JSON-header + little-endian float32 + packed mask format."""
    header = {
        "lat0": float(g.lat0), "lon0": float(g.lon0), "res": float(g.res),
        "height": g.height, "width": g.width, "channels": g.channels,
        "dtype": "<f4", "mask": True,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(np.ascontiguousarray(g.data, dtype="<f4").tobytes())
        f.write(np.packbits(g.mask.ravel()).tobytes())


def read_grid(path) -> GeoGrid:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("dtype") != "<f4":
        raise ValueError(f"unsupported value dtype {header.get('dtype')!r}")
    h, w, c = header["height"], header["width"], header["channels"]
    n = h * w * c
    start = nl + 1
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=start).reshape(h, w, c)
    if header.get("mask", False):
        packed = np.frombuffer(raw, dtype=np.uint8, offset=start + 4 * n)
        mask = np.unpackbits(packed, count=h * w).astype(bool).reshape(h, w)
    else:
        mask = None
    return GeoGrid(header["lat0"], header["lon0"], header["res"],
                   data.astype(np.float32), mask)
