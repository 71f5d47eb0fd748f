"""Adam with a two-phase learning rate, Polyak averaging, checkpoints, inference."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ForecastCube, ModelConfig, check_params, forward, loss_and_grads


@dataclass(frozen=True)
class Schedule:
    """``base_lr`` for the first half of ``total_steps``, then ``base_lr * drop``."""
    total_steps: int
    base_lr: float = 3e-4
    drop: float = 0.5

    def lr(self, step: int) -> float:
        return self.base_lr if 2 * step < self.total_steps else self.base_lr * self.drop

    def phase(self, step: int) -> int:
        return 0 if 2 * step < self.total_steps else 1


@dataclass
class OptState:
    step: int
    m: dict
    v: dict
    avg: dict            # Polyak shadow parameters


def init_opt_state(params: dict) -> OptState:
    return OptState(0, {k: np.zeros_like(v) for k, v in params.items()},
                    {k: np.zeros_like(v) for k, v in params.items()},
                    {k: v.copy() for k, v in params.items()})


def adam_update(params, grads, state: OptState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
                polyak_decay: float = 0.999):
    """One Adam step; returns new ``(params, state)`` without touching the inputs."""
    t = state.step + 1
    alpha = max(1.0 - polyak_decay, 1.0 / t)
    new_p, new_m, new_v, new_avg = {}, {}, {}, {}
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        step = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        q = p - step
        new_p[k], new_m[k], new_v[k] = q, m.astype(p.dtype), v.astype(p.dtype)
        new_avg[k] = (alpha * q + (1 - alpha) * state.avg[k]).astype(p.dtype)
    return new_p, OptState(t, new_m, new_v, new_avg)


def train_step(params, state: OptState, batch, cfg: ModelConfig, schedule: Schedule,
               polyak_decay: float = 0.999, head_weights=None):
    """Forward, backward and one optimizer update.

    A non-finite loss or gradient leaves parameters and state untouched and
    sets ``metrics["rejected"]``.
    """
    loss, grads, per_head = loss_and_grads(params, batch, cfg, head_weights)
    lr = schedule.lr(state.step)
    metrics = {"loss": loss, "lr": lr, "step": state.step, **{f"loss_{k}": v for k, v in per_head.items()}}
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        metrics["rejected"] = True
        return params, state, metrics
    params, state = adam_update(params, grads, state, lr, polyak_decay=polyak_decay)
    metrics["rejected"] = False
    return params, state, metrics


# -- checkpoints --

def save_checkpoint(directory, params: dict, cfg: ModelConfig, step: int = 0, phase: int = 0,
                    name: str = "params", extra: dict | None = None) -> Path:
    """Write ``<name>.json`` (manifest) and ``<name>.bin`` (little-endian float32)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = [{"name": k, "shape": list(v.shape), "dtype": "<f4"} for k, v in params.items()]
    manifest = {"config": cfg.to_json(), "step": step, "schedule_phase": phase,
                "tensors": tensors, "data": f"{name}.bin", **(extra or {})}
    with open(d / f"{name}.bin", "wb") as fh:
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    path = d / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(manifest_path):
    path = Path(manifest_path)
    manifest = json.loads(path.read_text())
    cfg = ModelConfig.from_json(manifest["config"])
    raw = (path.parent / manifest["data"]).read_bytes()
    params, off = {}, 0
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        params[t["name"]] = np.frombuffer(raw, "<f4", n, off).reshape(t["shape"]).astype(np.float32)
        off += 4 * n
    if off != len(raw):
        raise ValueError(f"{path}: data file has {len(raw) - off} trailing bytes")
    check_params(params, cfg)
    return params, cfg, manifest


# -- inference --

def infer(params, x, cfg: ModelConfig, init_time: str, geometry: dict, leads=None,
          chunk: int = 8) -> ForecastCube:
    """Probabilities for every lead (default: 15..720 min, plus 0 if configured).

    ``x`` is one assembled input ``(H, W, C)``; ``geometry`` maps each head
    to the ``(lat0, lon0, res)`` of its output grid.
    """
    leads = cfg.leads() if leads is None else list(leads)
    t0 = time.perf_counter()
    probs = {h.name: {} for h in cfg.heads}
    for i in range(0, len(leads), chunk):
        part = leads[i:i + chunk]
        batch = np.broadcast_to(x, (len(part),) + x.shape)
        out = forward(params, batch, np.array(part), cfg)
        for name, arr in out.items():
            for j, lead in enumerate(part):
                probs[name][lead] = arr[j].astype(np.float32)
    return ForecastCube(init_time, probs, dict(geometry), time.perf_counter() - t0)
