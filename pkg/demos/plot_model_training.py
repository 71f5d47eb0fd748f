"""
Training the lead-conditioned network
=====================================

The network is pure numpy with a hand-written backward pass.  One set of
weights serves every lead time: the lead indexes an embedding table whose
vector modulates the features (scale and shift) at the input and inside
every residual block.

Here a tiny model learns a toy task in which the rain class at each fine
pixel depends on both the input and the lead.
"""

import numpy as np

from nowcast.model import ModelConfig, forward, init_params, param_count
from nowcast.training import Schedule, init_opt_state, infer, load_checkpoint, save_checkpoint, train_step

cfg = ModelConfig(in_channels=4, stages=1, blocks_per_stage=1, stage_channels=(8,),
                  crop_per_stage=2, embed_dim=4)
params = init_params(cfg, seed=0)
print("parameters:", param_count(params))

rng = np.random.default_rng(0)
H = W = 24
oh, ow = cfg.output_shape(H, W, "main")
aux_h, _ = cfg.output_shape(H, W, "aux")
print("input", (H, W), "-> main head", (oh, ow), "aux head", (aux_h, aux_h))


def make_batch(n):
    x = rng.normal(size=(n, H, W, cfg.in_channels)).astype(np.float32)
    leads = rng.choice([15, 120], size=n)
    # the coarse signal, repeated onto the fine grid, sets the class;
    # long leads shift every class up by one
    c = (H - aux_h) // 2
    sig = x[:, c:H - c, c:W - c, 0]
    cls = (sig > 0).astype(np.int64) + (leads[:, None, None] == 120)
    fine = cls.repeat(2, axis=1).repeat(2, axis=2)
    ones = np.ones(fine.shape, bool)
    return {"input": x, "lead": leads,
            "targets": {"main": (fine, ones), "aux": (cls, np.ones(cls.shape, bool))}}


schedule = Schedule(total_steps=200, base_lr=1e-2)
state = init_opt_state(params)
for step in range(schedule.total_steps):
    params, state, m = train_step(params, state, make_batch(4), cfg, schedule, polyak_decay=0.9)
    if step % 50 == 0 or step == schedule.total_steps - 1:
        print(f"step {step:3d}  lr {m['lr']:.4f}  loss {m['loss']:.3f}")

# The Polyak average is what inference uses.
test = make_batch(8)
probs = forward(state.avg, test["input"], test["lead"], cfg)["main"]
acc = (probs.argmax(-1) == test["targets"]["main"][0]).mean()
print(f"main-head accuracy on fresh data: {acc:.2f}")

# Checkpoints round-trip exactly.
path = save_checkpoint("demo_ckpt", state.avg, cfg, step=state.step, phase=schedule.phase(state.step))
loaded, cfg2, manifest = load_checkpoint(path)
assert all(np.array_equal(loaded[k], state.avg[k]) for k in loaded)

# One input, every lead from 15 to 720 minutes.
cube = infer(loaded, test["input"][0], cfg2, "2023-06-01T00:00:00",
             {"main": (0.0, 0.0, 0.05), "aux": (0.0, 0.0, 0.1)})
print("leads:", cube.leads[:3], "...", cube.leads[-1], " sum of probabilities:",
      float(cube.probs["main"][60].sum(-1).mean()))
