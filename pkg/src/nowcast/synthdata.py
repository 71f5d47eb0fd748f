"""Synthetic advecting rain, pseudo-satellite channels and swath sampling.

Scenes live on a periodic (toroidal) pixel grid.  Each rain cell is an
isotropic Gaussian blob that moves with a constant velocity and grows or
decays geometrically.  Cell positions are tracked as an integer part plus a
fractional part so that integer velocities give exact pixel shifts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .geogrid import GeoGrid


@dataclass(frozen=True)
class SceneParams:
    height: int = 64
    width: int = 64
    res: float = 0.05
    lat0: float = 10.0
    lon0: float = 0.0
    n_cells: int = 5
    radius_range: tuple[float, float] = (1.5, 3.5)
    velocity: tuple[float, float] = (1.0, 0.5)   # (columns, rows) per step
    intensity_range: tuple[float, float] = (1.0, 25.0)
    growth: float = 0.05                          # per-cell log-rate drawn from [-growth, growth]
    cap: float = 2000.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad radius range {self.radius_range}")
        lo, hi = self.intensity_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad intensity range {self.intensity_range}")
        if self.n_cells < 0 or self.height < 1 or self.width < 1:
            raise ValueError("grid and cell counts must be positive")
        if max(abs(v) for v in self.velocity) > min(self.height, self.width) / 4:
            raise ValueError("velocity too large for cells to stay resolvable")

    @classmethod
    def from_json(cls, d: dict) -> "SceneParams":
        d = dict(d)
        for key in ("radius_range", "velocity", "intensity_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SwathParams:
    width: int = 8
    inclination: float = 30.0   # degrees from the meridian
    revisit: int = 8            # steps for the band to sweep the whole grid
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.revisit < 1:
            raise ValueError("swath width and revisit period must be >= 1")

    @classmethod
    def from_json(cls, d: dict) -> "SwathParams":
        return cls(**d)

    def to_json(self) -> dict:
        return asdict(self)


def _draw_cells(p: SceneParams):
    rng = np.random.default_rng(p.seed)
    n = p.n_cells
    pos = rng.uniform(0, 1, size=(n, 2)) * np.array([p.height, p.width])
    radius = rng.uniform(*p.radius_range, size=n)
    intensity = rng.uniform(*p.intensity_range, size=n)
    rate = rng.uniform(-p.growth, p.growth, size=n)
    return pos, radius, intensity, rate


def _split(x):
    i = np.floor(x)
    return i.astype(np.int64), x - i


def _kernel(h, w, frac_row, frac_col, radius):
    """Gaussian centred at (frac_row, frac_col) relative to pixel (0, 0) on a torus."""
    dy = (np.arange(h) + h // 2) % h - h // 2 - frac_row
    dx = (np.arange(w) + w // 2) % w - w // 2 - frac_col
    return np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2 * radius * radius))


def render_frame(p: SceneParams, t: int, cells=None) -> np.ndarray:
    pos, radius, intensity, rate = _draw_cells(p) if cells is None else cells
    vcol, vrow = p.velocity
    vr_int, vr_frac = _split(np.float64(vrow))
    vc_int, vc_frac = _split(np.float64(vcol))
    field = np.zeros((p.height, p.width))
    for k in range(len(radius)):
        r_int, r_frac = _split(pos[k, 0])
        c_int, c_frac = _split(pos[k, 1])
        carry_r, fr = _split(r_frac + vr_frac * t)
        carry_c, fc = _split(c_frac + vc_frac * t)
        row = (r_int + vr_int * t + carry_r) % p.height
        col = (c_int + vc_int * t + carry_c) % p.width
        amp = intensity[k] * np.exp(rate[k] * t) if rate[k] != 0 else intensity[k]
        blob = _kernel(p.height, p.width, fr, fc, radius[k])
        field += amp * np.roll(blob, (int(row), int(col)), axis=(0, 1))
    return np.clip(field, 0.0, p.cap)


def generate_scene(p: SceneParams, steps: int, start: int = 0) -> list[GeoGrid]:
    """Rain-rate frames (mm/hr) for steps ``start .. start + steps - 1``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cells = _draw_cells(p)
    return [GeoGrid(p.lat0, p.lon0, p.res, render_frame(p, t, cells).astype(np.float32))
            for t in range(start, start + steps)]


def _channel_params(k: int):
    # Fixed, seed-independent transfer curves: a few visible-like channels
    # that brighten with rain and IR-like channels that cool.
    idx = np.arange(k)
    offset = np.where(idx % 2 == 0, 0.05 + 0.02 * idx, 290.0 - 3.0 * idx)
    gain = np.where(idx % 2 == 0, 0.9, -80.0 + 5.0 * idx)
    scale = 2.0 + 3.0 * idx
    return offset, gain, scale


def observe_channels(truth: GeoGrid, k: int, noise_sigma: float = 0.0, seed: int = 0,
                     identity_first: bool = False) -> GeoGrid:
    """Pseudo-satellite channels derived from a rain field.

    Channel ``i`` is ``offset_i + gain_i * (1 - exp(-rain / scale_i))``
    plus Gaussian noise with standard deviation ``noise_sigma * |gain_i|``.
    With ``identity_first`` channel 0 is the rain field itself.
    """
    rain = truth.data[:, :, 0].astype(np.float64)
    offset, gain, scale = _channel_params(k)
    out = offset + gain * (1.0 - np.exp(-rain[:, :, None] / scale))
    if identity_first:
        out[:, :, 0] = rain
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        amp = np.where(np.arange(k) == 0, 1.0, np.abs(gain)) if identity_first else np.abs(gain)
        out = out + noise_sigma * amp * rng.standard_normal(out.shape)
    return GeoGrid(truth.lat0, truth.lon0, truth.res, out.astype(np.float32), truth.mask)


def swath_mask(height: int, width: int, p: SwathParams, t: int) -> np.ndarray:
    slope = np.tan(np.radians(p.inclination))
    phase = np.random.default_rng(p.seed).integers(0, width)
    offset = (phase + int(np.floor(t * width / p.revisit))) % width
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    shift = np.floor(rows * slope).astype(np.int64)
    return ((cols - shift - offset) % width) < p.width


def sample_swath(truth: GeoGrid, p: SwathParams, t: int) -> GeoGrid:
    """Keep ``truth`` only inside the swath observed at step ``t``."""
    mask = swath_mask(truth.height, truth.width, p, t) & truth.mask
    data = np.where(mask[:, :, None], truth.data, 0).astype(truth.data.dtype)
    return GeoGrid(truth.lat0, truth.lon0, truth.res, data, mask)


def scene_checksum(frames) -> str:
    h = hashlib.sha256()
    for g in frames:
        h.update(np.ascontiguousarray(g.data, dtype="<f4").tobytes())
    return h.hexdigest()


def dump_params(p) -> str:
    return json.dumps(p.to_json(), sort_keys=True)
