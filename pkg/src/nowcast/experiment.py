"""Seeded end-to-end desk experiment on synthetic advecting rain.

Three proxy sources feed the network:

``radar``
    Dense rain rate at full resolution, a few frames, moderate latency.
``mosaics``
    Pseudo-satellite channels derived from rain, full resolution, low latency.
``nwp``
    A blurred, displaced, noisy rain field at half resolution.

The main head is trained on swath-sampled rain (sparse), the auxiliary head
on dense rain at half resolution.  Stages run in order::

    gen -> preprocess -> train -> calibrate -> evaluate

and each one records a manifest of its files keyed by a hash of the
config sections it reads plus the manifests of its upstream stages, so an
unchanged stage is skipped on rerun.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from datetime import date, datetime, timedelta
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .calibrate import ThresholdTable, apply_thresholds, check_rates, fit_thresholds
from .geogrid import GeoGrid, pad_cyclic_array, resample
from .model import MAX_LEAD_MIN, ModelConfig, forward, init_params
from .mosaic import load_catalog, plan_mosaics, plan_to_json, table_catalog
from .pipeline import (
    NormStats, RateBinning, Sample, SourceConfig, assemble_input, discretize_target,
    filter_target_patches, fit_norm_stats,
)
from .synthdata import SceneParams, SwathParams, generate_scene, observe_channels, swath_mask
from .training import Schedule, init_opt_state, load_checkpoint, save_checkpoint, train_step
from .verify import GLOBAL, LatencySpec, ModelRun, Region, evaluate, read_report, report_csv, write_plots

STEP_MIN = 15
SPLITS = ("train", "threshold", "test")
STAGES = ("gen", "preprocess", "train", "calibrate", "evaluate")
AREAS = ("plans", "data", "checkpoints", "thresholds", "reports")
STAGE_AREA = {"gen": "data", "preprocess": "data", "train": "checkpoints",
              "calibrate": "thresholds", "evaluate": "reports"}
SWITCHES = {
    "drop-mosaics": ("zero", "mosaics"),
    "drop-nwp-proxy": ("zero", "nwp"),
    "drop-radar-proxy": ("zero", "radar"),
    "drop-dense-aux": ("head", "aux"),
}
ABLATION_NOTE = ("# inputs zeroed at assembly time (channel layout unchanged) and the model "
                 "retrained from scratch on the same data")


class ExperimentError(Exception):
    exit_code = 1


class ConfigError(ExperimentError):
    exit_code = 2


class MissingArtifact(ExperimentError):
    exit_code = 3


class NumericFailure(ExperimentError):
    exit_code = 4


# -- configuration ----------------------------------------------------------------

def default_config() -> dict:
    text = resources.files("nowcast").joinpath("data/toy_config.json").read_text()
    return json.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path, seed: int | None = None) -> dict:
    try:
        user = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    if seed is not None:
        user["seed"] = seed
    if "seed" not in user:
        raise ConfigError(f"{path}: 'seed' is required")
    cfg = _merge(default_config(), user)
    if cfg.get("catalog"):
        cat = Path(cfg["catalog"])
        if not cat.is_absolute():
            cat = Path(path).resolve().parent / cat
        cfg["catalog"] = str(cat)
    validate_config(cfg)
    return cfg


def _parse_day(s) -> date:
    try:
        return date.fromisoformat(s)
    except (TypeError, ValueError):
        raise ConfigError(f"bad date {s!r}") from None


def split_ranges(cfg) -> dict:
    return {s: tuple(_parse_day(d) for d in cfg["splits"][s]) for s in SPLITS}


def source_configs(cfg) -> list[SourceConfig]:
    src = cfg["sources"]
    r, m, n = src["radar"], src["mosaics"], src["nwp"]
    return [
        SourceConfig("radar", 1, r["latency_min"], r["n_timestamps"], r["spacing_min"], True, (0,)),
        SourceConfig("mosaics", m["channels"], m["latency_min"], m["n_timestamps"], m["spacing_min"], True),
        SourceConfig("nwp", 1, n["latency_min"], 1, STEP_MIN, False, (0,)),
    ]


def history_steps(cfg) -> int:
    span = max(s.latency_min + s.spacing_min * (s.n_timestamps - 1) for s in source_configs(cfg))
    return -(-span // STEP_MIN)


def lead_steps(cfg) -> list[int]:
    return [lead // STEP_MIN for lead in cfg["leads"]]


def pad_px(cfg) -> int:
    coarse = 2 * cfg["world"]["res"]
    px = cfg["pipeline"]["pad_deg"] / coarse
    if abs(px - round(px)) > 1e-6:
        raise ConfigError(f"pad_deg {cfg['pipeline']['pad_deg']} is not a whole number of pixels")
    return int(round(px))


def model_config(cfg, in_channels: int) -> ModelConfig:
    return ModelConfig.from_json({"in_channels": in_channels, **cfg["model"]})


def switches_of(cfg) -> tuple:
    return tuple(sorted(set(cfg.get("ablate", []))))


def variant_name(cfg) -> str:
    sw = switches_of(cfg)
    return "ablate-" + "+".join(sw) if sw else ""


def validate_config(cfg):
    if not isinstance(cfg.get("seed"), int) or cfg["seed"] < 0:
        raise ConfigError("'seed' must be a non-negative integer")
    ranges = split_ranges(cfg)
    for s, (a, b) in ranges.items():
        if b < a:
            raise ConfigError(f"split {s!r} ends before it starts")
    for i, s in enumerate(SPLITS):
        for t in SPLITS[i + 1:]:
            (a0, a1), (b0, b1) = ranges[s], ranges[t]
            if a0 <= b1 and b0 <= a1:
                raise ConfigError(f"splits {s!r} and {t!r} overlap")
    for s in SPLITS:
        n = cfg["scenes"][s]
        if not isinstance(n, int) or n < 1:
            raise ConfigError(f"scenes.{s} must be a positive integer")
        if n > (ranges[s][1] - ranges[s][0]).days + 1:
            raise ConfigError(f"split {s!r} has fewer days than scenes")
    leads = cfg["leads"]
    if not leads or any(l <= 0 or l > MAX_LEAD_MIN or l % STEP_MIN for l in leads):
        raise ConfigError(f"leads must be positive multiples of {STEP_MIN} up to {MAX_LEAD_MIN}")
    if sorted(set(leads)) != list(leads):
        raise ConfigError("leads must be strictly increasing")
    if cfg["scenes"]["steps"] <= history_steps(cfg) + max(lead_steps(cfg)):
        raise ConfigError("scenes are too short for the source history plus the longest lead")
    for sw in cfg.get("ablate", []):
        if sw not in SWITCHES:
            raise ConfigError(f"unknown ablation switch {sw!r}; choose from {sorted(SWITCHES)}")
    if cfg.get("catalog") and not Path(cfg["catalog"]).is_file():
        raise ConfigError(f"catalog {cfg['catalog']} does not exist")
    try:
        check_rates(cfg["calibrate"]["rates"])
        world = cfg["world"]
        SceneParams(height=world["height"], width=world["width"], n_cells=world["n_cells"],
                    radius_range=tuple(world["radius_range"]),
                    intensity_range=tuple(world["intensity_range"]),
                    velocity=tuple(max(abs(v) for v in r) for r in world["velocity_range"]))
        SwathParams(**{k: cfg["swath"][k] for k in ("width", "inclination", "revisit")})
        mc = model_config(cfg, 1)
        p = pad_px(cfg)
        h, w = world["height"] // 2 + 2 * p, world["width"] // 2 + 2 * p
        if mc.output_shape(h, w, "main") != (world["height"], world["width"]):
            raise ConfigError("pad_deg does not match the model's crops: main output "
                              f"{mc.output_shape(h, w, 'main')} vs grid {(world['height'], world['width'])}")
        [Region.from_json(r) for r in cfg["evaluate"]["regions"]]
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"invalid config: {e}") from None


# -- artifact bookkeeping -----------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _stage_sections(cfg, stage):
    catalog = cfg.get("catalog")
    sections = {
        "gen": {k: cfg[k] for k in ("seed", "splits", "scenes", "world", "swath", "sources")},
        "preprocess": {k: cfg[k] for k in ("sources", "pipeline", "leads")},
        "train": {k: cfg[k] for k in ("model", "train", "seed")},
        "calibrate": {k: cfg[k] for k in ("calibrate", "leads")},
        "evaluate": {k: cfg[k] for k in ("evaluate", "calibrate", "leads", "sources")},
    }[stage]
    if stage == "gen":
        sections["catalog"] = sha256_file(catalog) if catalog else "bundled"
    if stage != "gen":
        sections["ablate"] = list(switches_of(cfg))
    return sections


class Workspace:
    """Paths and manifests for one output directory and experiment variant."""

    def __init__(self, out, cfg):
        self.out = Path(out)
        self.cfg = cfg
        self.variant = variant_name(cfg)

    def stage_dir(self, stage) -> Path:
        area = self.out / STAGE_AREA[stage]
        if stage == "gen":
            return area / "gen"
        if stage == "preprocess":
            area = area / "pre"
        return area / self.variant if self.variant else area

    def manifest_path(self, stage) -> Path:
        return self.stage_dir(stage) / f"{stage}.manifest.json"

    def expected_key(self, stage) -> str:
        i = STAGES.index(stage)
        upstream = [self.manifest_hash(s) for s in STAGES[:i]]
        return _hash_json({"stage": stage, "config": _stage_sections(self.cfg, stage),
                           "upstream": upstream})

    def manifest_hash(self, stage) -> str:
        p = self.manifest_path(stage)
        if not p.exists():
            raise MissingArtifact(f"missing upstream artifact: stage {stage!r} has not been run")
        return sha256_file(p)

    def is_current(self, stage) -> bool:
        p = self.manifest_path(stage)
        if not p.exists():
            return False
        try:
            m = json.loads(p.read_text())
            if m.get("key") != self.expected_key(stage):
                return False
        except MissingArtifact:
            return False
        for rel, digest in m["files"].items():
            f = self.out / rel
            if not f.exists() or sha256_file(f) != digest:
                return False
        return True

    def require(self, stage):
        if not self.is_current(stage):
            raise MissingArtifact(
                f"missing upstream artifact: stage {stage!r} is absent or out of date; "
                f"run it first (--stage {stage} or --stage all)")

    def record(self, stage, files):
        key = self.expected_key(stage)
        entries = {str(Path(f).resolve().relative_to(self.out.resolve())): sha256_file(f)
                   for f in sorted(files)}
        _write_json(self.manifest_path(stage), {"stage": stage, "variant": self.variant,
                                                "key": key, "files": entries})


def artifact_hashes(out) -> dict:
    """sha256 of every artifact under the output areas (wall-clock files excluded)."""
    out = Path(out)
    result = {}
    for area in AREAS:
        base = out / area
        if not base.exists():
            continue
        for f in sorted(base.rglob("*")):
            if f.is_file() and f.name != "timing.json":
                result[str(f.relative_to(out))] = sha256_file(f)
    return result


# -- the synthetic world -----------------------------------------------------------

def scene_dates(cfg, split) -> list[date]:
    a, b = split_ranges(cfg)[split]
    n = cfg["scenes"][split]
    span = (b - a).days
    return [a + timedelta(days=(i * span) // max(n - 1, 1)) if n > 1 else a for i in range(n)]


def _scene_draws(cfg, split, i):
    rng = np.random.default_rng([cfg["seed"], SPLITS.index(split), i])
    (vx0, vx1), (vy0, vy1) = cfg["world"]["velocity_range"]
    vel = (float(rng.uniform(vx0, vx1)), float(rng.uniform(vy0, vy1)))
    s = cfg["sources"]["nwp"]["max_shift_px"]
    shift = [int(v) for v in rng.integers(-s, s + 1, 2)]
    return vel, int(rng.integers(2 ** 31)), shift


def _nwp_proxy(rain, shift, blur, noise, rng):
    f = gaussian_filter(np.roll(rain, shift, axis=(0, 1)).astype(np.float64), blur, mode="wrap")
    f = f * np.exp(noise * rng.standard_normal(f.shape))
    h, w = f.shape
    return f.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3)).astype(np.float32)


def generate_split(cfg, split):
    world, steps = cfg["world"], cfg["scenes"]["steps"]
    src = cfg["sources"]
    truth, mosaics, nwp, swath, meta = [], [], [], [], []
    for i, day in enumerate(scene_dates(cfg, split)):
        vel, seed, shift = _scene_draws(cfg, split, i)
        sp = SceneParams(height=world["height"], width=world["width"], res=world["res"],
                         lat0=world["lat0"], lon0=world["lon0"], n_cells=world["n_cells"],
                         radius_range=tuple(world["radius_range"]),
                         intensity_range=tuple(world["intensity_range"]),
                         velocity=vel, growth=world["growth"], seed=seed)
        sw = SwathParams(cfg["swath"]["width"], cfg["swath"]["inclination"],
                         cfg["swath"]["revisit"], seed)
        frames = generate_scene(sp, steps)
        rng = np.random.default_rng([seed, 1])
        truth.append(np.stack([g.data[:, :, 0] for g in frames]))
        mosaics.append(np.stack([
            observe_channels(g, src["mosaics"]["channels"], src["mosaics"]["noise_sigma"],
                             seed=seed + t).data for t, g in enumerate(frames)]))
        nwp.append(np.stack([_nwp_proxy(g.data[:, :, 0], shift, src["nwp"]["blur_px"],
                                        src["nwp"]["noise"], rng) for g in frames]))
        swath.append(np.stack([swath_mask(sp.height, sp.width, sw, t) for t in range(steps)]))
        meta.append({"split": split, "index": i, "date": day.isoformat(), "seed": seed,
                     "velocity": list(vel), "nwp_shift": shift})
    return ({"truth": np.stack(truth), "mosaics": np.stack(mosaics), "nwp": np.stack(nwp),
             "swath": np.stack(swath)}, meta)


def _save_arrays(directory, arrays) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for name, arr in sorted(arrays.items()):
        p = directory / f"{name}.npy"
        np.save(p, np.ascontiguousarray(arr))
        files.append(p)
    return files


def _load_arrays(directory, names) -> dict:
    return {n: np.load(Path(directory) / f"{n}.npy") for n in names}


# -- stages ------------------------------------------------------------------------

def stage_gen(ws: Workspace, log):
    cfg = ws.cfg
    files = []
    catalog = load_catalog(cfg["catalog"]) if cfg.get("catalog") else table_catalog()
    plan_path = ws.out / "plans" / "mosaic_plan.json"
    plan_path.parent.mkdir(parents=True, exist_ok=True)
    plan_path.write_text(plan_to_json(plan_mosaics(catalog)))
    files.append(plan_path)
    scenes = []
    for split in SPLITS:
        arrays, meta = generate_split(cfg, split)
        files += _save_arrays(ws.stage_dir("gen") / split, arrays)
        scenes += meta
        log(f"  gen {split}: {len(meta)} scenes")
    p = ws.stage_dir("gen") / "scenes.json"
    _write_json(p, scenes)
    files.append(p)
    return files


def _frame_time(day: str, step: int) -> datetime:
    return datetime.fromisoformat(day) + timedelta(minutes=STEP_MIN * step)


class SplitData:
    """Generated frames of one split, addressable by scene and time."""

    def __init__(self, ws: Workspace, split: str):
        cfg = ws.cfg
        self.split = split
        self.cfg = cfg
        self.arrays = _load_arrays(ws.stage_dir("gen") / split, ("truth", "mosaics", "nwp", "swath"))
        scenes = json.loads((ws.stage_dir("gen") / "scenes.json").read_text())
        self.scenes = [s for s in scenes if s["split"] == split]
        w = cfg["world"]
        self.fine = (w["lat0"], w["lon0"], w["res"])
        self.coarse = (w["lat0"], w["lon0"], 2 * w["res"])

    def grid(self, kind, scene, step):
        arr = self.arrays[kind][scene, step]
        geo = self.coarse if kind == "nwp" else self.fine
        data = arr if arr.ndim == 3 else arr[:, :, None]
        return GeoGrid(*geo, data.astype(np.float32))

    def time(self, scene, step) -> datetime:
        return _frame_time(self.scenes[scene]["date"], step)

    def source_frames(self, scene, sources):
        steps = self.arrays["truth"].shape[1]
        kinds = {"radar": "truth", "mosaics": "mosaics", "nwp": "nwp"}
        return [(s, {self.time(scene, t): self.grid(kinds[s.name], scene, t) for t in range(steps)})
                for s in sources]

    def init_steps(self):
        steps = self.arrays["truth"].shape[1]
        return range(history_steps(self.cfg), steps - max(lead_steps(self.cfg)))

    def samples(self):
        return [(s, k) for s in range(len(self.scenes)) for k in self.init_steps()]


def _zero_sources(cfg):
    return tuple(SWITCHES[s][1] for s in switches_of(cfg) if SWITCHES[s][0] == "zero")


def stage_preprocess(ws: Workspace, log):
    cfg = ws.cfg
    sources = source_configs(cfg)
    bins = RateBinning.default(**cfg["pipeline"]["bins"])
    train = SplitData(ws, "train")
    stats = {}
    kinds = {"radar": "truth", "mosaics": "mosaics", "nwp": "nwp"}
    for s in sources:
        n_scenes, n_steps = train.arrays["truth"].shape[:2]
        grids = (train.grid(kinds[s.name], i, t) for i in range(n_scenes) for t in range(n_steps))
        stats[s.name] = fit_norm_stats(grids, s.log_flags(), [f"{s.name}[{c}]" for c in range(s.channels)])
    out = ws.stage_dir("preprocess")
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "norm_stats.json"]
    _write_json(files[0], {k: v.to_json() for k, v in stats.items()})
    zero = _zero_sources(cfg)
    for split in SPLITS:
        data = train if split == "train" else SplitData(ws, split)
        inputs, samples, meta = [], [], []
        for scene, k in data.samples():
            init = data.time(scene, k)
            assembled = assemble_input(data.source_frames(scene, sources), init, stats,
                                       zero_sources=zero)
            if assembled.missing:
                raise ExperimentError(f"missing frames for {init}: {assembled.missing}")
            targets = _targets(data, scene, k, bins, lead_steps(cfg))
            inputs.append(assembled.tensor)
            samples.append(Sample(init, assembled.tensor, list(cfg["leads"]), targets,
                                  {"scene": scene, "step": k}))
            meta.append({"scene": scene, "init_step": k, "init_time": init.isoformat()})
        kept = filter_target_patches(samples, cfg["pipeline"]["keep_empty_fraction"],
                                     seed=cfg["seed"])
        keep = np.zeros((len(samples), len(cfg["leads"])), bool)
        kept_by_init = {s.init_time: s.lead_times for s in kept}
        for i, s in enumerate(samples):
            for j, lead in enumerate(s.lead_times):
                keep[i, j] = lead in kept_by_init.get(s.init_time, ())
        arrays = {
            "inputs": np.stack(inputs).astype(np.float32),
            "keep": keep,
            **{f"{h}_classes": np.stack([s.targets[h][0] for s in samples]).astype(np.uint8)
               for h in ("main", "aux")},
            **{f"{h}_mask": np.stack([s.targets[h][1] for s in samples]) for h in ("main", "aux")},
        }
        files += _save_arrays(out / split, arrays)
        p = out / split / "samples.json"
        _write_json(p, meta)
        files.append(p)
        log(f"  preprocess {split}: {len(samples)} samples, input {arrays['inputs'].shape[1:]}")
    return files


def _targets(data: SplitData, scene, k, bins, steps):
    main_c, main_m, aux_c, aux_m = [], [], [], []
    for d in steps:
        truth = data.grid("truth", scene, k + d)
        swath = data.arrays["swath"][scene, k + d]
        sparse = truth.with_data(np.where(swath[:, :, None], truth.data, 0), swath)
        c, m = discretize_target(sparse, bins)
        main_c.append(c)
        main_m.append(m)
        c, m = discretize_target(resample(truth, 2 * truth.res), bins)
        aux_c.append(c)
        aux_m.append(m)
    return {"main": (np.stack(main_c), np.stack(main_m)), "aux": (np.stack(aux_c), np.stack(aux_m))}


def _load_pre(ws, split):
    out = ws.stage_dir("preprocess") / split
    arrays = _load_arrays(out, ("inputs", "keep", "main_classes", "main_mask",
                                "aux_classes", "aux_mask"))
    return arrays, json.loads((out / "samples.json").read_text())


def _padded(ws, x):
    p = pad_px(ws.cfg)
    return pad_cyclic_array(x, p, p)


def stage_train(ws: Workspace, log):
    cfg = ws.cfg
    arrays, _ = _load_pre(ws, "train")
    tcfg = cfg["train"]
    mcfg = model_config(cfg, arrays["inputs"].shape[-1])
    leads = np.array(cfg["leads"])
    heads = [h.name for h in mcfg.heads
             if ("head", h.name) not in {SWITCHES[s] for s in switches_of(cfg)}]
    params = init_params(mcfg, seed=cfg["seed"])
    state = init_opt_state(params)
    schedule = Schedule(tcfg["steps"], tcfg["lr"])
    pairs = np.argwhere(arrays["keep"])
    if len(pairs) == 0:
        raise ExperimentError("no training pairs left after target filtering")
    rng = np.random.default_rng([cfg["seed"], 7])
    losses = []
    t0 = time.perf_counter()
    for step in range(tcfg["steps"]):
        pick = pairs[rng.choice(len(pairs), size=min(tcfg["batch_size"], len(pairs)), replace=False)]
        n, j = pick[:, 0], pick[:, 1]
        batch = {"input": _padded(ws, arrays["inputs"][n]), "lead": leads[j],
                 "targets": {h: (arrays[f"{h}_classes"][n, j], arrays[f"{h}_mask"][n, j])
                             for h in heads}}
        params, state, metrics = train_step(params, state, batch, mcfg, schedule,
                                            tcfg["polyak_decay"])
        if metrics["rejected"]:
            raise NumericFailure(f"non-finite loss at training step {step}")
        losses.append(metrics["loss"])
        if (step + 1) % max(1, tcfg["steps"] // 10) == 0:
            recent = float(np.mean(losses[-max(1, tcfg["steps"] // 10):]))
            log(f"  train step {step + 1}/{tcfg['steps']}: loss {recent:.4f} "
                f"({time.perf_counter() - t0:.0f} s)")
    out = ws.stage_dir("train")
    files = []
    for name, p in (("params", state.avg), ("raw", params)):
        m = save_checkpoint(out, p, mcfg, step=state.step, phase=schedule.phase(state.step - 1),
                            name=name, extra={"polyak": name == "params", "heads_trained": heads})
        files += [m, out / f"{name}.bin"]
    p = out / "train_log.json"
    _write_json(p, {"loss": losses, "heads_trained": heads})
    files.append(p)
    return files


def _main_probs(ws, params, mcfg, inputs, leads):
    """Main-head probabilities ``(L, H, W, bins)`` for one unpadded input."""
    x = _padded(ws, inputs)
    batch = np.broadcast_to(x, (len(leads),) + x.shape)
    return forward(params, batch, np.asarray(leads), mcfg)["main"]


def stage_calibrate(ws: Workspace, log):
    cfg = ws.cfg
    params, mcfg, _ = load_checkpoint(ws.stage_dir("train") / "params.json")
    arrays, meta = _load_pre(ws, "threshold")
    data = SplitData(ws, "threshold")
    bins = RateBinning.default(**cfg["pipeline"]["bins"])
    leads, steps = cfg["leads"], lead_steps(cfg)

    def heldout():
        for i, m in enumerate(meta):
            probs = _main_probs(ws, params, mcfg, arrays["inputs"][i], leads)
            for j, lead in enumerate(leads):
                truth = data.arrays["truth"][m["scene"], m["init_step"] + steps[j]]
                swath = data.arrays["swath"][m["scene"], m["init_step"] + steps[j]]
                yield lead, probs[j], truth, swath

    a, b = cfg["splits"]["threshold"]
    table = fit_thresholds(heldout(), cfg["calibrate"]["rates"], bins,
                           metadata={"split": "threshold", "split_dates": [a, b],
                                     "samples": len(meta)})
    out = ws.stage_dir("calibrate")
    out.mkdir(parents=True, exist_ok=True)
    p = out / "thresholds.json"
    p.write_text(table.dumps() + "\n")
    low = sum(e.low_confidence for e in table.entries.values())
    log(f"  calibrate: {len(table.entries)} thresholds, {low} low-confidence")
    return [p]


def stage_evaluate(ws: Workspace, log):
    cfg = ws.cfg
    params, mcfg, _ = load_checkpoint(ws.stage_dir("train") / "params.json")
    table = ThresholdTable.from_json(json.loads((ws.stage_dir("calibrate") / "thresholds.json").read_text()))
    arrays, meta = _load_pre(ws, "test")
    data = SplitData(ws, "test")
    bins = RateBinning.default(**cfg["pipeline"]["bins"])
    rates = check_rates(cfg["calibrate"]["rates"])
    leads = cfg["leads"]

    truth = {}
    for s in range(len(data.scenes)):
        for t in range(data.arrays["truth"].shape[1]):
            truth[data.time(s, t)] = data.grid("truth", s, t)

    forecasts = {}
    for i, m in enumerate(meta):
        init = datetime.fromisoformat(m["init_time"])
        probs = _main_probs(ws, params, mcfg, arrays["inputs"][i], leads)
        for j, lead in enumerate(leads):
            field = apply_thresholds(probs[j], table, rates, lead, bins)
            forecasts[(init, lead)] = GeoGrid(*data.fine, field[:, :, None].astype(np.float32))

    radar_latency = cfg["sources"]["radar"]["latency_min"]
    runs = [
        ModelRun("model", lambda init, lead: forecasts.get((init, lead))),
        # persistence: the newest radar frame, held for every lead
        ModelRun("persistence", lambda init, lead: truth.get(init), LatencySpec(0, radar_latency)),
    ]
    regions = [Region.from_json(r) for r in cfg["evaluate"]["regions"]] or [GLOBAL]
    init_times = [datetime.fromisoformat(m["init_time"]) for m in meta]
    rows = evaluate(runs, truth, init_times, leads, rates, regions, dense_truth=True,
                    fss_sizes=tuple(cfg["evaluate"]["fss_sizes"]))
    out = ws.stage_dir("evaluate")
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "verification.csv"
    csv_path.write_text(report_csv(rows))
    files = [csv_path] + write_plots(rows, out / "plots")
    summary = summarize(rows, rates[0], regions[0].name)
    p = out / "summary.json"
    _write_json(p, summary)
    files.append(p)
    for lead, mc, pc, b in zip(summary["leads"], summary["csi"]["model"],
                               summary["csi"]["persistence"], summary["bias"]["model"]):
        log(f"  lead {lead:3d} min: CSI model {mc:.3f} persistence {pc:.3f}, model bias {b:.2f}")
    return files


def summarize(rows, rate, region) -> dict:
    """CSI and frequency bias per lead at one rate, for every model."""
    leads = sorted({r.lead for r in rows})
    models = sorted({r.model for r in rows})
    out = {"rate_mm_hr": rate, "region": region, "leads": leads, "csi": {}, "bias": {}}
    for metric, key in (("csi", "csi"), ("frequency_bias", "bias")):
        for model in models:
            vals = {r.lead: r.value for r in rows if r.model == model and r.metric == metric
                    and r.rate == rate and r.region == region}
            out[key][model] = [None if np.isnan(vals[l]) else vals[l] for l in leads]
    return out


STAGE_FUNCS = {"gen": stage_gen, "preprocess": stage_preprocess, "train": stage_train,
               "calibrate": stage_calibrate, "evaluate": stage_evaluate}


def run_stages(ws: Workspace, stage: str, log=print, force: bool = False) -> dict:
    """Run ``stage`` (or every stage for ``"all"``); returns stage -> "cached" | "done"."""
    if stage != "all" and stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    todo = STAGES if stage == "all" else (stage,)
    if stage != "all":
        for up in STAGES[:STAGES.index(stage)]:
            ws.require(up)
    status = {}
    for s in todo:
        if not force and ws.is_current(s):
            status[s] = "cached"
            log(f"stage {s}: cached")
            continue
        t0 = time.perf_counter()
        files = STAGE_FUNCS[s](ws, log)
        ws.record(s, files)
        status[s] = "done"
        log(f"stage {s}: done in {time.perf_counter() - t0:.1f} s")
    return status


def ablation_rows(full_csv: str, ablated_csv: str, switch: str) -> list[dict]:
    """Per (region, rate, lead) CSI of both runs and their difference."""
    def table(text):
        return {(r.region, r.rate, r.lead): r for r in read_report(text)
                if r.model == "model" and r.metric == "csi"}
    full, abl = table(full_csv), table(ablated_csv)
    rows = []
    for key in sorted(full):
        a, b = full[key], abl.get(key)
        ok = b is not None and a.defined == "1" and b.defined == "1"
        rows.append({"switch": switch, "region": key[0], "rate_mm_hr": key[1], "lead_min": key[2],
                     "csi_full": a.value, "csi_ablated": b.value if b else float("nan"),
                     "delta_csi": (b.value - a.value) if ok else float("nan")})
    return rows


ABLATION_COLUMNS = ["switch", "region", "rate_mm_hr", "lead_min", "csi_full", "csi_ablated",
                    "delta_csi"]


def ablation_csv(rows) -> str:
    lines = [ABLATION_NOTE, ",".join(ABLATION_COLUMNS)]
    for r in rows:
        lines.append(",".join(repr(float(r[c])) if isinstance(r[c], float) else str(r[c])
                              for c in ABLATION_COLUMNS))
    return "\n".join(lines) + "\n"


def read_ablation(text: str) -> list[dict]:
    import csv
    import io
    body = "\n".join(l for l in text.splitlines() if not l.startswith("#"))
    out = []
    for rec in csv.DictReader(io.StringIO(body)):
        out.append({"switch": rec["switch"], "region": rec["region"],
                    "rate_mm_hr": float(rec["rate_mm_hr"]), "lead_min": int(rec["lead_min"]),
                    "csi_full": float(rec["csi_full"]), "csi_ablated": float(rec["csi_ablated"]),
                    "delta_csi": float(rec["delta_csi"])})
    return out


def with_switches(cfg, switches) -> dict:
    c = copy.deepcopy(cfg)
    c["ablate"] = sorted(set(switches))
    validate_config(c)
    return c
