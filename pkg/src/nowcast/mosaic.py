"""Band matching across geostationary imagers and Gaussian mosaic blending.

:func:`plan_mosaics` groups the spectral bands of several satellites into
common output mosaics: the narrowest bands that do not overlap each other
become mosaic seeds, and every band joins the mosaic whose centre is nearest
to its own, provided the two wavelength ranges overlap.

:func:`blend` and :func:`blend_mosaic` merge per-satellite rasters of one
mosaic into a single field, weighting each satellite by a Gaussian of the
great-circle distance to its sub-satellite point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .geogrid import GeoGrid


@dataclass(frozen=True, order=True)
class Band:
    satellite: str
    band_id: str
    center: float
    lo: float
    hi: float
    nominal_nm: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.lo < self.center < self.hi:
            raise ValueError(f"{self.satellite}/{self.band_id}: need lo < center < hi, "
                             f"got {self.lo}, {self.center}, {self.hi}")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def overlaps(self, lo: float, hi: float) -> bool:
        return max(self.lo, lo) < min(self.hi, hi)


@dataclass
class MosaicSpec:
    name: str
    center: float
    lo: float
    hi: float
    members: list[Band]

    @property
    def satellites(self) -> set[str]:
        return {b.satellite for b in self.members}


@dataclass(frozen=True)
class SatelliteFootprint:
    satellite: str
    nadir_lat: float
    nadir_lon: float
    max_view_angle: float = 70.0
    sigma: float = 30.0

    def __post_init__(self):
        if not 0 < self.max_view_angle <= 90:
            raise ValueError(f"max_view_angle must be in (0, 90], got {self.max_view_angle}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass
class MosaicPlan:
    mosaics: list[MosaicSpec]
    unassigned: list[Band]


def _sort_key(b: Band):
    return (b.width, b.center, b.satellite, b.band_id)


def _mosaic_name(seed: Band) -> str:
    nm = seed.nominal_nm if seed.nominal_nm is not None else int(round(seed.center * 1000))
    return f"mosaic_{nm}_nm"


def plan_mosaics(catalog) -> MosaicPlan:
    """Derive output mosaics from a band catalog.

    Parameters
    ----------
    catalog : sequence of Band
        Every band of every satellite.

    Returns
    -------
    MosaicPlan
        Mosaics sorted by centre wavelength, plus the bands that could not be
        placed.  A band is placed in the mosaic whose centre is nearest to its
        own centre (ties go to the shorter wavelength) if their ranges
        overlap; otherwise it is unassigned.
    """
    bands = list(catalog)
    if not bands:
        raise ValueError("band catalog is empty")

    seeds: list[Band] = []
    for band in sorted(bands, key=_sort_key):
        if not any(band.overlaps(s.lo, s.hi) for s in seeds):
            seeds.append(band)
    seeds.sort(key=lambda s: s.center)

    mosaics = [MosaicSpec(_mosaic_name(s), s.center, s.lo, s.hi, []) for s in seeds]
    centers = np.array([m.center for m in mosaics])
    unassigned = []
    for band in sorted(bands, key=lambda b: (b.satellite, b.band_id, b.center)):
        nearest = int(np.argmin(np.abs(centers - band.center)))
        m = mosaics[nearest]
        if band.overlaps(m.lo, m.hi):
            m.members.append(band)
        else:
            unassigned.append(band)
    return MosaicPlan(mosaics, unassigned)


# -- blending -----------------------------------------------------------------

def great_circle_deg(lat1, lon1, lat2, lon2):
    """Central angle between two points, in degrees (haversine form)."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return np.degrees(2 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0))))


def blend_weight(footprint: SatelliteFootprint, lat, lon):
    d = great_circle_deg(lat, lon, footprint.nadir_lat, footprint.nadir_lon)
    w = np.exp(-(d * d) / (2 * footprint.sigma ** 2))
    return np.where(d > footprint.max_view_angle, 0.0, w)


def blend(pixel_lat: float, pixel_lon: float, samples) -> tuple[float, bool]:
    """Blend one pixel from ``(footprint, value, valid)`` samples.

    Returns ``(value, valid)``; ``valid`` is False (and value 0) when no
    sample carries weight.
    """
    num = 0.0
    den = 0.0
    for footprint, value, valid in samples:
        if not valid:
            continue
        w = float(blend_weight(footprint, pixel_lat, pixel_lon))
        num += w * value
        den += w
    if den == 0.0:
        return 0.0, False
    return num / den, True


def pixel_centers(g: GeoGrid):
    lats = g.lat0 - (np.arange(g.height) + 0.5) * g.res
    lons = g.lon0 + (np.arange(g.width) + 0.5) * g.res
    return np.meshgrid(lats, lons, indexing="ij")


def blend_mosaic(spec: MosaicSpec, rasters: dict, footprints: dict, out_grid: GeoGrid) -> GeoGrid:
    """Blend the member rasters of one mosaic on ``out_grid``'s geometry.

    ``rasters`` maps :class:`Band` to a :class:`GeoGrid` already resampled to
    the output geometry; members without a raster are skipped.
    """
    lat, lon = pixel_centers(out_grid)
    num = None
    den = np.zeros(out_grid.shape[:2], dtype=np.float64)
    for band in spec.members:
        g = rasters.get(band)
        if g is None:
            continue
        if not g.same_geometry(out_grid):
            raise ValueError(f"raster for {band.satellite}/{band.band_id} does not match "
                             f"the output geometry")
        w = blend_weight(footprints[band.satellite], lat, lon) * g.mask
        contrib = w[:, :, None] * np.where(g.mask[:, :, None], g.data, 0.0)
        num = contrib if num is None else num + contrib
        den += w
    valid = den > 0
    if num is None:
        data = np.zeros(out_grid.shape[:2] + (1,), dtype=np.float32)
    else:
        with np.errstate(invalid="ignore", divide="ignore"):
            data = np.where(valid[:, :, None], num / np.where(valid, den, 1.0)[:, :, None], 0.0)
    return GeoGrid(out_grid.lat0, out_grid.lon0, out_grid.res, data.astype(np.float32), valid)


# -- JSON interfaces ----------------------------------------------------------

def band_from_json(d: dict) -> Band:
    return Band(d["satellite"], d["band_id"], float(d["center_um"]), float(d["lo_um"]),
                float(d["hi_um"]), d.get("nominal_nm"))


def band_to_json(b: Band) -> dict:
    d = {"satellite": b.satellite, "band_id": b.band_id, "center_um": b.center,
         "lo_um": b.lo, "hi_um": b.hi}
    if b.nominal_nm is not None:
        d["nominal_nm"] = b.nominal_nm
    return d


def load_catalog(path) -> list[Band]:
    with open(path) as f:
        records = json.load(f)
    if not isinstance(records, list):
        raise ValueError("band catalog must be a JSON array")
    return [band_from_json(r) for r in records]


def table_catalog() -> list[Band]:
    """The bundled catalog built from the published mosaic table."""
    text = resources.files("nowcast").joinpath("data/table_catalog.json").read_text()
    return [band_from_json(r) for r in json.loads(text)]


def footprint_from_json(d: dict) -> SatelliteFootprint:
    return SatelliteFootprint(d["satellite"], float(d["nadir_lat"]), float(d["nadir_lon"]),
                              float(d.get("max_view_angle_deg", 70.0)),
                              float(d.get("sigma_deg", 30.0)))


def load_footprints(path=None) -> dict[str, SatelliteFootprint]:
    if path is None:
        text = resources.files("nowcast").joinpath("data/footprints.json").read_text()
    else:
        with open(path) as f:
            text = f.read()
    return {fp.satellite: fp for fp in map(footprint_from_json, json.loads(text))}


def plan_to_json(plan: MosaicPlan) -> str:
    doc = {
        "mosaics": [
            {"name": m.name, "center_um": m.center, "lo_um": m.lo, "hi_um": m.hi,
             "members": [band_to_json(b) for b in m.members]}
            for m in plan.mosaics
        ],
        "unassigned": [band_to_json(b) for b in plan.unassigned],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"

