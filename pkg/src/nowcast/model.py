"""Lead-time-conditioned residual network with categorical output heads.

Layout of one forward pass::

    input --FiLM(lead)--> space-to-depth --1x1 stem-->
      [stage: residual blocks, crop ring, (1x1 transition)] x stages -->
      repeat-upsample --> per head: repeat-upsample, 3x3 conv, softmax

A residual block is ``x + conv2(relu(FiLM(conv1(x))))``.  FiLM scales and
shifts every channel by affine projections of a learned lead-time
embedding, so one set of weights serves every lead.

Parameters are a plain ``dict`` of named arrays.  Gradients are computed
by :func:`loss_and_grads`, which replays the forward pass backwards.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .geogrid import GeoGrid, depth_to_space_array, read_grid, space_to_depth_array, write_grid

MAX_LEAD_MIN = 720
LEAD_STEP_MIN = 15


@dataclass(frozen=True)
class HeadSpec:
    name: str
    bins: int = 30
    upsample: int = 1       # extra repetition after the shared upsampling


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int
    stages: int = 2
    blocks_per_stage: int = 2
    stage_channels: tuple[int, ...] = (16, 24)
    crop_per_stage: int | None = None     # None: ring of the stage's receptive-field growth
    embed_dim: int = 8
    downsample: int = 2
    kernel: int = 3
    heads: tuple[HeadSpec, ...] = (HeadSpec("main", 30, 2), HeadSpec("aux", 30, 1))
    include_lead_zero: bool = False
    embed_scale: float = 0.5
    film_scale: float = 0.1

    def __post_init__(self):
        if len(self.stage_channels) != self.stages:
            raise ValueError(f"{self.stages} stages but {len(self.stage_channels)} channel counts")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.stages < 1 or self.blocks_per_stage < 1 or self.in_channels < 1:
            raise ValueError("stages, blocks and input channels must be positive")
        if len({h.name for h in self.heads}) != len(self.heads) or not self.heads:
            raise ValueError("head names must be unique and non-empty")

    @property
    def crop(self) -> int:
        if self.crop_per_stage is not None:
            return self.crop_per_stage
        return self.blocks_per_stage * 2 * (self.kernel // 2)

    def head(self, name: str) -> HeadSpec:
        for h in self.heads:
            if h.name == name:
                return h
        raise KeyError(name)

    def output_shape(self, height: int, width: int, head: str) -> tuple[int, int]:
        """Spatial output size of ``head`` for an input of ``height x width``."""
        if height % self.downsample or width % self.downsample:
            raise ValueError(f"space_to_depth: {height}x{width} not divisible by {self.downsample}")
        h, w = height // self.downsample, width // self.downsample
        for s in range(self.stages):
            h, w = h - 2 * self.crop, w - 2 * self.crop
            if h < 1 or w < 1:
                raise ValueError(f"crop after stage {s} leaves no pixels")
        f = self.downsample * self.head(head).upsample
        return h * f, w * f

    def leads(self) -> list[int]:
        start = 0 if self.include_lead_zero else LEAD_STEP_MIN
        return list(range(start, MAX_LEAD_MIN + 1, LEAD_STEP_MIN))

    def to_json(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["heads"] = [asdict(h) for h in self.heads]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stage_channels"] = tuple(d.get("stage_channels", (16, 24)))
        if "heads" in d:
            d["heads"] = tuple(HeadSpec(**h) for h in d["heads"])
        return cls(**d)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    e = cfg.embed_dim

    def film(prefix, c):
        bound = cfg.film_scale / np.sqrt(e)
        p[f"{prefix}/gamma_w"] = rng.uniform(-bound, bound, (e, c))
        p[f"{prefix}/gamma_b"] = np.ones(c)
        p[f"{prefix}/beta_w"] = rng.uniform(-bound, bound, (e, c))
        p[f"{prefix}/beta_b"] = np.zeros(c)

    def conv(prefix, k, cin, cout):
        bound = np.sqrt(3.0 / (k * k * cin))
        p[f"{prefix}/w"] = rng.uniform(-bound, bound, (k, k, cin, cout))
        p[f"{prefix}/b"] = np.zeros(cout)

    p["lead_embed"] = rng.normal(0.0, cfg.embed_scale, (MAX_LEAD_MIN + 1, e))
    film("input", cfg.in_channels)
    c = cfg.stage_channels[0]
    conv("stem", 1, cfg.in_channels * cfg.downsample ** 2, c)
    for s, cs in enumerate(cfg.stage_channels):
        if cs != c:
            conv(f"s{s}/transition", 1, c, cs)
            c = cs
        for b in range(cfg.blocks_per_stage):
            conv(f"s{s}/b{b}/conv1", cfg.kernel, c, c)
            film(f"s{s}/b{b}/film", c)
            conv(f"s{s}/b{b}/conv2", cfg.kernel, c, c)
    for h in cfg.heads:
        conv(f"head/{h.name}", cfg.kernel, c, h.bins)
    return {k: v.astype(dtype) for k, v in p.items()}


def param_count(params: dict) -> int:
    return sum(v.size for v in params.values())


def check_params(params: dict, cfg: ModelConfig):
    ref = init_params(cfg, 0, np.float32)
    if list(ref) != list(params):
        raise ValueError("parameter names do not match the model configuration")
    for k, v in ref.items():
        if params[k].shape != v.shape:
            raise ValueError(f"{k}: shape {params[k].shape}, expected {v.shape}")
        if not np.all(np.isfinite(params[k])):
            raise ValueError(f"{k}: non-finite values")


def _check_leads(leads):
    leads = np.atleast_1d(np.asarray(leads))
    if leads.dtype.kind not in "iu" or leads.min() < 0 or leads.max() > MAX_LEAD_MIN:
        raise ValueError(f"lead times must be integer minutes in [0, {MAX_LEAD_MIN}]")
    return leads.astype(np.intp)


def embed_lead(lead, params) -> np.ndarray:
    """Row ``lead`` of the embedding table (a one-hot lookup)."""
    rows = params["lead_embed"][_check_leads(lead)]
    return rows[0] if np.ndim(lead) == 0 else rows


def film_coefficients(emb, params, prefix):
    gamma = emb @ params[f"{prefix}/gamma_w"] + params[f"{prefix}/gamma_b"]
    beta = emb @ params[f"{prefix}/beta_w"] + params[f"{prefix}/beta_b"]
    return gamma, beta


def condition(h, lead_embed, params, prefix="input"):
    """``gamma * h + beta`` with per-channel coefficients projected from ``lead_embed``."""
    emb = np.atleast_2d(lead_embed)
    gamma, beta = film_coefficients(emb, params, prefix)
    squeeze = h.ndim == 3
    out = L.film_forward(h[None] if squeeze else h, gamma, beta)
    return out[0] if squeeze else out


class _Pass:
    """One forward pass; keeps intermediates when gradients are wanted."""

    def __init__(self, params, cfg, leads, keep):
        self.p, self.cfg, self.keep = params, cfg, keep
        self.leads = leads
        self.emb = params["lead_embed"][leads]
        self.tape = []

    def film(self, prefix, x):
        gamma, beta = film_coefficients(self.emb, self.p, prefix)
        if self.keep:
            self.tape.append(("film", prefix, x, gamma))
        return L.film_forward(x, gamma, beta)

    def conv(self, prefix, x):
        w = self.p[f"{prefix}/w"]
        if x.shape[-1] != w.shape[2]:
            raise ValueError(f"{prefix}: expected {w.shape[2]} channels, got {x.shape[-1]}")
        y, cols = L.conv_forward(x, w, self.p[f"{prefix}/b"])
        if self.keep:
            self.tape.append(("conv", prefix, cols, x.shape))
        return y

    def encode(self, x):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[-1] != cfg.in_channels:
            raise ValueError(f"input conditioning: expected (N, H, W, {cfg.in_channels}), got {x.shape}")
        cfg.output_shape(x.shape[1], x.shape[2], cfg.heads[0].name)
        h = self.film("input", x)
        h = space_to_depth_array(h, cfg.downsample)
        h = self.conv("stem", h)
        c = cfg.stage_channels[0]
        for s, cs in enumerate(cfg.stage_channels):
            if cs != c:
                h = self.conv(f"s{s}/transition", h)
                c = cs
            for b in range(cfg.blocks_per_stage):
                pre = f"s{s}/b{b}"
                r = self.conv(f"{pre}/conv1", h)
                r = self.film(f"{pre}/film", r)
                r = L.relu_forward(r)
                if self.keep:
                    self.tape.append(("relu", pre, r))
                r = self.conv(f"{pre}/conv2", r)
                h = h + r
                if self.keep:
                    self.tape.append(("residual", pre))
            h = L.crop(h, cfg.crop)
            if self.keep:
                self.tape.append(("crop", s))
        return L.upsample_repeat(h, cfg.downsample)

    def heads(self, feat):
        out = {}
        for hs in self.cfg.heads:
            u = L.upsample_repeat(feat, hs.upsample)
            w = self.p[f"head/{hs.name}/w"]
            y, cols = L.conv_forward(u, w, self.p[f"head/{hs.name}/b"])
            out[hs.name] = (y, cols, u.shape)
        return out


def forward(params, x, leads, cfg: ModelConfig) -> dict:
    """Per-head bin probabilities, each ``(N, h, w, bins)``.

    ``x`` is ``(N, H, W, C)`` (a single ``(H, W, C)`` input is accepted and
    the batch axis is dropped again on output); ``leads`` holds one lead
    time in minutes per sample.
    """
    single = x.ndim == 3
    xb = x[None] if single else x
    leads = _check_leads(leads)
    if leads.size == 1 and xb.shape[0] > 1:
        leads = np.repeat(leads, xb.shape[0])
    if leads.size != xb.shape[0]:
        raise ValueError(f"{leads.size} lead times for a batch of {xb.shape[0]}")
    dtype = params["lead_embed"].dtype
    run = _Pass(params, cfg, leads, keep=False)
    feat = run.encode(np.asarray(xb, dtype=dtype))
    out = {}
    for name, (logits, _, _) in run.heads(feat).items():
        pr = np.exp(L.log_softmax(logits))
        out[name] = pr[0] if single else pr
    return out


def loss_and_grads(params, batch, cfg: ModelConfig, head_weights=None):
    """Summed per-head masked cross-entropy and its gradient.

    ``batch`` has ``input`` ``(N, H, W, C)``, ``lead`` ``(N,)`` and
    ``targets``: ``{head: (classes (N, h, w), mask (N, h, w))}``.  Heads
    without a target entry contribute nothing.
    """
    dtype = params["lead_embed"].dtype
    leads = _check_leads(batch["lead"])
    run = _Pass(params, cfg, leads, keep=True)
    feat = run.encode(np.asarray(batch["input"], dtype=dtype))
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dfeat = np.zeros_like(feat)
    losses = {}
    head_out = run.heads(feat)
    for hs in cfg.heads:
        if hs.name not in batch["targets"]:
            continue
        logits, cols, ushape = head_out[hs.name]
        classes, mask = batch["targets"][hs.name]
        if classes.shape != logits.shape[:-1]:
            raise ValueError(f"head/{hs.name}: target {classes.shape} vs output {logits.shape[:-1]}")
        wgt = 1.0 if head_weights is None else head_weights.get(hs.name, 1.0)
        loss, dlogits = L.masked_cross_entropy(logits, classes, mask)
        losses[hs.name] = loss * wgt
        if wgt != 1.0:
            dlogits = dlogits * dlogits.dtype.type(wgt)
        w = params[f"head/{hs.name}/w"]
        du, dw, db = L.conv_backward(dlogits, cols, w, ushape)
        grads[f"head/{hs.name}/w"] += dw
        grads[f"head/{hs.name}/b"] += db
        dfeat += L.upsample_repeat_backward(du, hs.upsample)
    d = L.upsample_repeat_backward(dfeat, cfg.downsample)
    demb = np.zeros_like(run.emb)
    skip = []
    for entry in reversed(run.tape):
        kind = entry[0]
        if kind == "crop":
            d = L.crop_backward(d, cfg.crop)
        elif kind == "residual":
            skip.append(d)
        elif kind == "conv":
            _, prefix, cols, xshape = entry
            d, dw, db = L.conv_backward(d, cols, params[f"{prefix}/w"], xshape)
            grads[f"{prefix}/w"] += dw
            grads[f"{prefix}/b"] += db
            if prefix.endswith("/conv1"):
                d = d + skip.pop()
        elif kind == "relu":
            d = L.relu_backward(d, entry[2])
        elif kind == "film":
            _, prefix, x, gamma = entry
            d, dgamma, dbeta = L.film_backward(d, x, gamma)
            grads[f"{prefix}/gamma_w"] += run.emb.T @ dgamma
            grads[f"{prefix}/gamma_b"] += dgamma.sum(axis=0)
            grads[f"{prefix}/beta_w"] += run.emb.T @ dbeta
            grads[f"{prefix}/beta_b"] += dbeta.sum(axis=0)
            demb += dgamma @ params[f"{prefix}/gamma_w"].T + dbeta @ params[f"{prefix}/beta_w"].T
            if prefix == "input":
                break
        if kind == "conv" and prefix == "stem":
            d = depth_to_space_array(d, cfg.downsample)
    np.add.at(grads["lead_embed"], leads, demb)
    return sum(losses.values()), grads, losses


@dataclass
class ForecastCube:
    """Bin probabilities per head and lead for one initialisation time."""
    init_time: str
    probs: dict                  # head -> {lead_min: (H, W, bins)}
    geometry: dict               # head -> (lat0, lon0, res)
    latency_s: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def leads(self) -> list[int]:
        return sorted(next(iter(self.probs.values())))

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for head in sorted(self.probs):
            lat0, lon0, res = self.geometry[head]
            for lead in sorted(self.probs[head]):
                name = f"{head}_lead{lead:03d}.grid"
                write_grid(d / name, GeoGrid(lat0, lon0, res, self.probs[head][lead].astype(np.float32)))
                files.append({"head": head, "lead_min": lead, "file": name})
        index = {"init_time": self.init_time,
                 "geometry": {h: list(g) for h, g in self.geometry.items()},
                 "metadata": self.metadata, "files": files}
        (d / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
        # wall-clock lives apart from the index so the index stays reproducible
        (d / "timing.json").write_text(json.dumps({"latency_s": self.latency_s}))

    @classmethod
    def load(cls, directory) -> "ForecastCube":
        d = Path(directory)
        index = json.loads((d / "index.json").read_text())
        probs: dict = {}
        for f in index["files"]:
            probs.setdefault(f["head"], {})[f["lead_min"]] = read_grid(d / f["file"]).data
        timing = d / "timing.json"
        latency = json.loads(timing.read_text())["latency_s"] if timing.exists() else 0.0
        return cls(index["init_time"], probs, {h: tuple(g) for h, g in index["geometry"].items()},
                   latency, index.get("metadata", {}))
