# %% a short training run on a handful of phantom pairs, then Dice before/after
#    (a few minutes on one core; raise ITERS for better alignment)
import time

import numpy as np

from firereg.data import PerturbationSpec, generate_phantom_pair, pair_seeds, perturbed_pairs
from firereg.evaluation import evaluate
from firereg.model import FireModel, ModelConfig
from firereg.trainer import TrainConfig, train

ITERS = 300
spec = PerturbationSpec(strength=(0.2, 0.5))

cases = [generate_phantom_pair(s, 2, 64) for s in pair_seeds(0, 40)]
pairs = perturbed_pairs(cases, spec)  # moving images get one fixed warp each
held_out = [generate_phantom_pair(s, 2, 64) for s in pair_seeds(1, 4)]

cfg = TrainConfig(iters=ITERS, lr_taf=3e-3, lr_tnr=1e-3, lr_gf=1e-3, checkpoint_every=0,
                  model=ModelConfig(base_channels=16, resnet_blocks=2))
print(FireModel.initialize(cfg.model).parameter_count(), "parameters")

# %%
before = evaluate(FireModel.initialize(cfg.model, seed=cfg.seed), held_out, repeat=3, spec=spec)
t0 = time.perf_counter()
model, trace = train(pairs, cfg, "demo_run")
print(f"{ITERS} iterations in {time.perf_counter() - t0:.0f}s, trace at {trace}")

# %% the loss trace is a plain CSV
rows = np.loadtxt(trace, delimiter=",", skiprows=1)
print("total loss, first 20 vs last 20:", rows[:20, 1].mean().round(3), rows[-20:, 1].mean().round(3))

# %%
after = evaluate(model, held_out, repeat=3, spec=spec)
print(after.summary())
print("before training, full Dice:", round(before.mean_dice("full"), 3))
