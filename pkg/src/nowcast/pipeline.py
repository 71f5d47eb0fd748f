"""Preprocessing: normalisation, timedelta channels, input assembly, targets.

The input tensor for one initialisation time is built source by source.  For
each source the configured number of historical frames is taken, counting
back from the newest frame its real-time latency allows; each frame is
normalised, gets a constant timedelta channel, and fine-resolution sources
are folded with space-to-depth.  Everything is then concatenated along the
channel axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .geogrid import GeoGrid, pad_cyclic_array, space_to_depth

TIMEDELTA_SCALE_MIN = 720.0
DEFAULT_CAP = 2000.0


# -- normalisation --------------------------------------------------------------

@dataclass
class NormAccumulator:
    """Mergeable per-channel count / mean / M2 (Chan et al. parallel update)."""

    log_transform: np.ndarray
    count: np.ndarray = None
    mean: np.ndarray = None
    m2: np.ndarray = None

    def __post_init__(self):
        self.log_transform = np.asarray(self.log_transform, dtype=bool)
        c = self.log_transform.size
        if self.count is None:
            self.count = np.zeros(c, dtype=np.int64)
            self.mean = np.zeros(c)
            self.m2 = np.zeros(c)

    def add(self, g: GeoGrid) -> "NormAccumulator":
        if g.channels != self.log_transform.size:
            raise ValueError(f"grid has {g.channels} channels, expected {self.log_transform.size}")
        vals = g.data[g.mask].astype(np.float64)
        vals = np.where(self.log_transform, np.log1p(np.maximum(vals, 0.0)), vals)
        n = vals.shape[0]
        if n == 0:
            return self
        part = NormAccumulator(self.log_transform, np.full(self.count.size, n),
                               vals.mean(axis=0), ((vals - vals.mean(axis=0)) ** 2).sum(axis=0))
        return self.merge(part)

    def merge(self, other: "NormAccumulator") -> "NormAccumulator":
        n = self.count + other.count
        safe = np.maximum(n, 1)
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / safe
        m2 = self.m2 + other.m2 + delta ** 2 * self.count * other.count / safe
        return NormAccumulator(self.log_transform, n, mean, m2)

    def finalize(self, names=None) -> "NormStats":
        std = np.sqrt(self.m2 / np.maximum(self.count, 1))
        for c in range(self.count.size):
            label = names[c] if names else f"channel {c}"
            if self.count[c] == 0:
                raise ValueError(f"{label} has no valid pixels")
            if not std[c] > 0:
                raise ValueError(f"{label} has zero variance")
        return NormStats(self.mean.copy(), std, self.log_transform.copy())


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    log_transform: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        self.log_transform = np.asarray(self.log_transform, dtype=bool)
        if np.any(self.std <= 0):
            raise ValueError("std must be positive for every channel")

    @property
    def channels(self) -> int:
        return self.mean.size

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "log_transform": self.log_transform.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(d["mean"], d["std"], d["log_transform"])


def fit_norm_stats(grids, log_transform=None, names=None) -> NormStats:
    """Per-channel mean and population std over the valid pixels of ``grids``.

    Channels flagged in ``log_transform`` are summarised after ``log1p``.
    """
    acc = None
    for g in grids:
        if acc is None:
            flags = np.zeros(g.channels, bool) if log_transform is None else log_transform
            acc = NormAccumulator(flags)
        acc = acc.add(g)
    if acc is None:
        raise ValueError("no grids to fit")
    return acc.finalize(names)


def normalize(g: GeoGrid, stats: NormStats) -> GeoGrid:
    if g.channels != stats.channels:
        raise ValueError(f"grid has {g.channels} channels, stats have {stats.channels}")
    x = g.data.astype(np.float64)
    x = np.where(stats.log_transform, np.log1p(np.maximum(x, 0.0)), x)
    x = (x - stats.mean) / stats.std
    x = np.where(g.mask[:, :, None], x, 0.0)
    return g.with_data(x.astype(np.float32))


def denormalize(g: GeoGrid, stats: NormStats) -> GeoGrid:
    x = g.data.astype(np.float64) * stats.std + stats.mean
    x = np.where(stats.log_transform, np.expm1(x), x)
    return g.with_data(x.astype(np.float32))


# -- timedeltas and assembly ------------------------------------------------------

def timedelta_value(obs_time: datetime, init_time: datetime) -> float:
    if obs_time > init_time:
        raise ValueError(f"observation {obs_time} is after initialisation {init_time}")
    return (init_time - obs_time) / timedelta(minutes=1) / TIMEDELTA_SCALE_MIN


def append_timedelta(g: GeoGrid, obs_time: datetime, init_time: datetime) -> GeoGrid:
    """Add one constant channel holding the scaled age of the observation."""
    value = timedelta_value(obs_time, init_time)
    extra = np.full(g.shape[:2] + (1,), value, dtype=g.data.dtype)
    return g.with_data(np.concatenate([g.data, extra], axis=-1))


@dataclass(frozen=True)
class SourceConfig:
    name: str
    channels: int
    latency_min: int
    n_timestamps: int
    spacing_min: int
    fine: bool = True
    log_transform: tuple = ()

    def timestamps(self, init_time: datetime) -> list[datetime]:
        """Frame times used for ``init_time``, oldest first."""
        newest = init_time - timedelta(minutes=self.latency_min)
        return [newest - timedelta(minutes=self.spacing_min * k)
                for k in reversed(range(self.n_timestamps))]

    def log_flags(self) -> np.ndarray:
        flags = np.zeros(self.channels, bool)
        flags[list(self.log_transform)] = True
        return flags

    def output_channels(self, block: int = 2) -> int:
        per_frame = self.channels + 1
        return self.n_timestamps * per_frame * (block * block if self.fine else 1)

    def to_json(self) -> dict:
        return {"name": self.name, "channels": self.channels, "latency_min": self.latency_min,
                "n_timestamps": self.n_timestamps, "spacing_min": self.spacing_min,
                "fine": self.fine, "log_transform": list(self.log_transform)}

    @classmethod
    def from_json(cls, d: dict) -> "SourceConfig":
        d = dict(d)
        d["log_transform"] = tuple(d.get("log_transform", ()))
        return cls(**d)


def input_channel_count(sources, block: int = 2) -> int:
    return sum(s.output_channels(block) for s in sources)


@dataclass
class AssembledInput:
    tensor: np.ndarray
    missing: list = field(default_factory=list)   # (source name, timestamp) pairs zero-filled


def assemble_input(sources, init_time: datetime, stats: dict, *, block: int = 2,
                   pad_px: int = 0, wrap_lat: bool = False, zero_sources=()) -> AssembledInput:
    """Build the model input for one initialisation time.

    Parameters
    ----------
    sources : sequence of (SourceConfig, mapping datetime -> GeoGrid)
        Frames for each source.  Fine sources must be at ``block`` times the
        resolution of coarse ones.
    stats : dict
        Source name -> :class:`NormStats`.
    pad_px : int
        Cyclic context added on the longitude axis (and on latitude when
        ``wrap_lat`` is set, for periodic synthetic domains).
    zero_sources : collection of str
        Sources whose values are zeroed after normalisation (ablation); their
        timedelta channels are kept so the channel layout does not change.

    A missing frame is zero-filled, keeps its timedelta channel and is listed
    in ``missing``.
    """
    parts = []
    missing = []
    eff = None
    for cfg, frames in sources:
        for t in cfg.timestamps(init_time):
            g = frames.get(t)
            if g is not None and eff is None:
                eff = (g.height // block, g.width // block) if cfg.fine else (g.height, g.width)
    if eff is None:
        raise ValueError("no source frame is available for this initialisation time")

    for cfg, frames in sources:
        st = stats[cfg.name]
        for t in cfg.timestamps(init_time):
            g = frames.get(t)
            if g is None:
                missing.append((cfg.name, t))
                shape = (eff[0] * block, eff[1] * block) if cfg.fine else eff
                g = GeoGrid(0.0, 0.0, 1.0, np.zeros(shape + (cfg.channels,), np.float32),
                            np.zeros(shape, bool))
            else:
                g = normalize(g, st)
            if cfg.name in zero_sources:
                g = g.with_data(np.zeros_like(g.data))
            g = append_timedelta(g, t, init_time)
            if cfg.fine:
                g = space_to_depth(g, block)
            parts.append(g.data)
    shapes = {p.shape[:2] for p in parts}
    if len(shapes) != 1:
        raise ValueError(f"sources disagree on the effective grid: {sorted(shapes)}")
    x = np.concatenate(parts, axis=-1)
    if pad_px:
        x = pad_cyclic_array(x, pad_px if wrap_lat else 0, pad_px)
    return AssembledInput(x, missing)


# -- targets ------------------------------------------------------------------------

@dataclass
class RateBinning:
    edges: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        e = self.edges
        if e.ndim != 1 or e.size < 2 or e[0] != 0 or np.any(np.diff(e) <= 0):
            raise ValueError("edges must start at 0 and increase strictly")

    @classmethod
    def default(cls, n_bins: int = 30, first: float = 0.1, cap: float = DEFAULT_CAP) -> "RateBinning":
        return cls(np.concatenate([[0.0], np.geomspace(first, cap, n_bins)]))

    @property
    def n_bins(self) -> int:
        return self.edges.size - 1

    @property
    def cap(self) -> float:
        return float(self.edges[-1])

    def to_json(self) -> dict:
        return {"edges": self.edges.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "RateBinning":
        return cls(d["edges"])


def discretize_target(g: GeoGrid, bins: RateBinning) -> tuple[np.ndarray, np.ndarray]:
    """Map rain rates to bin indices.

    Rates above the cap are treated as 0.  Returns ``(classes, mask)`` with
    ``classes`` of shape ``(height, width)``; masked pixels get class 0.
    """
    rate = g.data[:, :, 0].astype(np.float64)
    valid = g.mask & np.isfinite(rate)
    if np.any(rate[valid] < 0):
        raise ValueError("negative precipitation rate in target")
    rate = np.where(valid & (rate <= bins.cap), rate, 0.0)
    # compare at the storage precision so a stored edge value lands in the upper bin
    edges = bins.edges.astype(g.data.dtype).astype(np.float64)
    cls = np.searchsorted(edges, rate, side="right") - 1
    cls = np.clip(cls, 0, bins.n_bins - 1)
    return np.where(valid, cls, 0).astype(np.int64), valid


@dataclass
class Sample:
    init_time: datetime
    input: np.ndarray
    lead_times: list
    targets: dict          # head -> (classes (L, H, W), mask (L, H, W))
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.input)):
            raise ValueError("sample input contains non-finite values")


def filter_target_patches(samples, keep_empty_fraction: float = 0.05, seed: int = 0,
                          head: str = "main") -> list:
    """Drop most lead times whose ``head`` target is entirely masked.

    Each (sample, lead time) pair draws one uniform number from a generator
    seeded with ``seed``, whether or not it is empty, so the outcome for a
    pair does not depend on the contents of the others.
    """
    if not 0 <= keep_empty_fraction <= 1:
        raise ValueError("keep_empty_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        classes, mask = s.targets[head]
        u = rng.random(len(s.lead_times))
        keep = [i for i in range(len(s.lead_times))
                if mask[i].any() or u[i] < keep_empty_fraction]
        if not keep:
            continue
        if len(keep) == len(s.lead_times):
            out.append(s)
            continue
        targets = {h: (c[keep], m[keep]) for h, (c, m) in s.targets.items()}
        out.append(Sample(s.init_time, s.input, [s.lead_times[i] for i in keep], targets,
                          dict(s.meta)))
    return out


def dump_json(obj) -> str:
    return json.dumps(obj.to_json(), sort_keys=True, indent=1)
