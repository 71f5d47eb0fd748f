"""Forecast verification: contingency tables, CSI, frequency bias and FSS.

Scores that cannot be computed (zero denominators) come back as a
:class:`Score` with ``defined=False`` and a NaN value, so report tables stay
rectangular.  Truth rasters carry a validity mask; only valid pixels count.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Callable, NamedTuple

import numpy as np

from .geogrid import GeoGrid, resample

FSS_SIZES = tuple(range(1, 22, 2))


class Score(NamedTuple):
    value: float
    defined: bool


UNDEFINED = Score(math.nan, False)


@dataclass
class ContingencyTable:
    hits: int = 0
    misses: int = 0
    false_alarms: int = 0
    correct_negatives: int = 0

    def __add__(self, other: "ContingencyTable") -> "ContingencyTable":
        return ContingencyTable(self.hits + other.hits, self.misses + other.misses,
                                self.false_alarms + other.false_alarms,
                                self.correct_negatives + other.correct_negatives)

    def as_tuple(self):
        return (self.hits, self.misses, self.false_alarms, self.correct_negatives)

    @property
    def total(self) -> int:
        return sum(self.as_tuple())


def contingency_counts(forecast: np.ndarray, truth: np.ndarray, mask: np.ndarray,
                       rate: float) -> ContingencyTable:
    obs = truth[mask] >= rate
    pred = forecast[mask] >= rate
    hits = int(np.count_nonzero(obs & pred))
    misses = int(np.count_nonzero(obs & ~pred))
    fa = int(np.count_nonzero(~obs & pred))
    cn = int(obs.size - hits - misses - fa)
    return ContingencyTable(hits, misses, fa, cn)


def align_forecast(forecast: GeoGrid, truth: GeoGrid) -> GeoGrid:
    """Bring a coarser forecast onto the truth grid by pixel replication."""
    if forecast.res > truth.res and not np.isclose(forecast.res, truth.res):
        forecast = resample(forecast, truth.res)
    if not forecast.same_geometry(truth):
        raise ValueError("forecast and truth geometries differ")
    return forecast


def accumulate(forecast: GeoGrid, truth: GeoGrid, rate: float,
               table: ContingencyTable | None = None) -> ContingencyTable:
    """Add one forecast/truth pair to ``table`` (a new table is returned)."""
    forecast = align_forecast(forecast, truth)
    counts = contingency_counts(forecast.data[:, :, 0], truth.data[:, :, 0], truth.mask, rate)
    return counts if table is None else table + counts


def csi(table: ContingencyTable) -> Score:
    den = table.hits + table.misses + table.false_alarms
    return Score(table.hits / den, True) if den else UNDEFINED


def frequency_bias(table: ContingencyTable) -> Score:
    den = table.hits + table.misses
    return Score((table.hits + table.false_alarms) / den, True) if den else UNDEFINED


def _box_sum(a: np.ndarray, n: int) -> np.ndarray:
    """Sum over the ``n x n`` window centred on each pixel, truncated at edges."""
    h, w = a.shape
    r = n // 2
    s = np.zeros((h + 1, w + 1), dtype=a.dtype)
    s[1:, 1:] = a.cumsum(0).cumsum(1)
    i0 = np.clip(np.arange(h) - r, 0, h)
    i1 = np.clip(np.arange(h) + r + 1, 0, h)
    j0 = np.clip(np.arange(w) - r, 0, w)
    j1 = np.clip(np.arange(w) + r + 1, 0, w)
    return (s[i1][:, j1] - s[i0][:, j1] - s[i1][:, j0] + s[i0][:, j0])


def fractions(binary: np.ndarray, mask: np.ndarray, n: int) -> np.ndarray:
    """Event fraction over the in-mask pixels of each ``n x n`` window."""
    m = mask.astype(np.int64)
    events = _box_sum(binary.astype(np.int64) * m, n)
    count = _box_sum(m, n)
    return events / np.maximum(count, 1)


def fss(forecast: np.ndarray, truth: np.ndarray, mask: np.ndarray, rate: float,
        n: int) -> Score:
    """Fractions skill score for a square neighbourhood of ``n`` pixels.

    Neighbourhoods are truncated to pixels that are inside the domain and
    inside ``mask``; the score is averaged over the valid pixels.
    """
    if n < 1 or n % 2 == 0:
        raise ValueError(f"neighbourhood must be an odd count >= 1, got {n}")
    mask = np.asarray(mask, bool)
    if not mask.any():
        return UNDEFINED
    f = fractions(forecast >= rate, mask, n)[mask]
    o = fractions(truth >= rate, mask, n)[mask]
    mse = np.mean((f - o) ** 2)
    ref = np.mean(f * f) + np.mean(o * o)
    if ref == 0:
        return UNDEFINED
    return Score(float(1.0 - mse / ref), True)


# -- latency --------------------------------------------------------------------

@dataclass(frozen=True)
class LatencySpec:
    init_cadence: int = 0         # minutes between runs; 0 = a run every minute of the day
    availability_latency: int = 0

    def __post_init__(self):
        if self.init_cadence < 0 or self.availability_latency < 0:
            raise ValueError("cadence and latency must be non-negative")

    def run_age(self) -> int:
        """Age (minutes) of the newest run whose output is already available."""
        lat, cad = self.availability_latency, self.init_cadence
        if cad == 0:
            return lat
        return -(-lat // cad) * cad

    def to_json(self) -> dict:
        return {"init_cadence": self.init_cadence, "availability_latency": self.availability_latency}


def effective_lead(spec: LatencySpec, wanted_lead: int) -> int:
    """Lead time within the newest available run that verifies at now + ``wanted_lead``."""
    if wanted_lead < 0:
        raise ValueError("wanted lead must be non-negative")
    return wanted_lead + spec.run_age()


def hourly_hold(provider: Callable) -> Callable:
    """Wrap an hourly-output provider so any 15-minute lead reads the value of
    the hour that contains it (rate assumed uniform within the hour)."""
    def wrapped(run_init, lead):
        return provider(run_init, 60 * math.ceil(lead / 60))
    return wrapped


# -- regions --------------------------------------------------------------------

@dataclass(frozen=True)
class Region:
    name: str
    boxes: tuple = ()      # (lat_min, lat_max, lon_min, lon_max)

    def __post_init__(self):
        for lat_min, lat_max, lon_min, lon_max in self.boxes:
            if not (-90 <= lat_min < lat_max <= 90 and -180 <= lon_min < lon_max <= 360):
                raise ValueError(f"region {self.name}: box outside the globe")

    def mask(self, g: GeoGrid) -> np.ndarray:
        if not self.boxes:
            return np.ones(g.shape[:2], bool)
        lats = g.lat0 - (np.arange(g.height) + 0.5) * g.res
        lons = g.lon0 + (np.arange(g.width) + 0.5) * g.res
        out = np.zeros(g.shape[:2], bool)
        for lat_min, lat_max, lon_min, lon_max in self.boxes:
            out |= (((lats >= lat_min) & (lats < lat_max))[:, None]
                    & ((lons >= lon_min) & (lons < lon_max))[None, :])
        return out

    @classmethod
    def from_json(cls, d: dict) -> "Region":
        return cls(d["name"], tuple(tuple(b) for b in d.get("boxes", ())))


def load_regions(path) -> list[Region]:
    with open(path) as f:
        return [Region.from_json(r) for r in json.load(f)]


GLOBAL = Region("global")


# -- evaluation harness -----------------------------------------------------------

@dataclass
class ModelRun:
    """A forecast source: ``provider(run_init, lead_min) -> GeoGrid | None``."""

    name: str
    provider: Callable
    latency: LatencySpec = field(default_factory=LatencySpec)


@dataclass
class ReportRow:
    model: str
    region: str
    rate: float
    lead: int
    metric: str
    value: float
    defined: str          # "1", "0" or "absent"
    n_px: int | None = None


def evaluate(runs, truth: dict, init_times, leads, rates, regions=(GLOBAL,),
             dense_truth: bool = False, fss_sizes=FSS_SIZES) -> list[ReportRow]:
    """Aggregate verification over ``init_times`` for every model/region/rate/lead.

    ``truth`` maps valid time to a truth :class:`GeoGrid`.  Each model is
    read through its latency: for nowcast time ``t`` and lead ``L`` the run
    initialised at ``t - age`` is used at lead ``L + age``.  FSS is only
    computed when ``dense_truth`` is set.
    """
    rows = []
    for run in runs:
        age = run.latency.run_age()
        for region in regions:
            for lead in leads:
                tables = {r: ContingencyTable() for r in rates}
                fss_acc = {(r, n): [] for r in rates for n in fss_sizes}
                absent = False
                seen = 0
                for t in init_times:
                    valid = t + timedelta(minutes=lead)
                    obs = truth.get(valid)
                    if obs is None:
                        continue
                    fc = run.provider(t - timedelta(minutes=age), effective_lead(run.latency, lead))
                    if fc is None:
                        absent = True
                        break
                    fc = align_forecast(fc, obs)
                    mask = obs.mask & region.mask(obs)
                    f, o = fc.data[:, :, 0], obs.data[:, :, 0]
                    seen += 1
                    for r in rates:
                        tables[r] = tables[r] + contingency_counts(f, o, mask, r)
                        if dense_truth:
                            for n in fss_sizes:
                                fss_acc[(r, n)].append(_fss_parts(f, o, mask, r, n))
                for r in rates:
                    if absent or seen == 0:
                        for metric in ("csi", "frequency_bias"):
                            rows.append(ReportRow(run.name, region.name, r, lead, metric,
                                                  math.nan, "absent"))
                        continue
                    for metric, fn in (("csi", csi), ("frequency_bias", frequency_bias)):
                        s = fn(tables[r])
                        rows.append(ReportRow(run.name, region.name, r, lead, metric,
                                              s.value, "1" if s.defined else "0"))
                    if dense_truth:
                        for n in fss_sizes:
                            s = _fss_from_parts(fss_acc[(r, n)])
                            rows.append(ReportRow(run.name, region.name, r, lead, "fss",
                                                  s.value, "1" if s.defined else "0", n))
    return rows


def _fss_parts(f, o, mask, rate, n):
    if not mask.any():
        return (0.0, 0.0, 0)
    ff = fractions(f >= rate, mask, n)[mask]
    fo = fractions(o >= rate, mask, n)[mask]
    return (float(np.sum((ff - fo) ** 2)), float(np.sum(ff * ff) + np.sum(fo * fo)), int(mask.sum()))


def _fss_from_parts(parts) -> Score:
    # Pooled over samples: sums of squared errors and reference terms.
    num = sum(p[0] for p in parts)
    den = sum(p[1] for p in parts)
    if den == 0:
        return UNDEFINED
    return Score(1.0 - num / den, True)


REPORT_COLUMNS = ["model", "region", "rate_mm_hr", "lead_min", "metric", "value",
                  "defined_flag", "n_px"]


def report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        value = "nan" if math.isnan(r.value) else repr(float(r.value))
        w.writerow([r.model, r.region, r.rate, r.lead, r.metric, value, r.defined,
                    "" if r.n_px is None else r.n_px])
    return buf.getvalue()


def read_report(text: str) -> list[ReportRow]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        out.append(ReportRow(rec["model"], rec["region"], float(rec["rate_mm_hr"]),
                             int(rec["lead_min"]), rec["metric"], float(rec["value"]),
                             rec["defined_flag"], int(rec["n_px"]) if rec["n_px"] else None))
    return out


def write_plots(rows, out_dir, metric: str = "csi") -> list:
    """One SVG line chart (metric vs lead, a line per model) per rate and region."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    plt.rcParams["svg.hashsalt"] = "nowcast"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    keys = sorted({(r.region, r.rate) for r in rows if r.metric == metric})
    for region, rate in keys:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for model in sorted({r.model for r in rows}):
            pts = sorted((r.lead, r.value) for r in rows
                         if r.metric == metric and r.model == model and r.region == region
                         and r.rate == rate and r.defined == "1")
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=model)
        ax.set_xlabel("lead time (min)")
        ax.set_ylabel(metric)
        ax.set_title(f"{region}, {rate:g} mm/hr")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"{metric}_{region}_{rate:g}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written


def parse_time(s: str) -> datetime:
    return datetime.fromisoformat(s)
