# %% synthetic phantoms, ground-truth warps and how Dice reacts to them
import numpy as np

from firereg.data import (PerturbationSpec, STRUCTURES, apply_ground_truth_warp, generate_phantom_pair,
                          invert_grid, random_warp, write_pgm)
from firereg.evaluation import dice
from firereg.warp import sample_nearest

a, b = generate_phantom_pair(seed=0, dim=2, size=64, style_a="t1", style_b="flair")
print(a.image.shape, a.spacing, sorted(a.labels))
write_pgm(a, "phantom_t1.pgm")
write_pgm(b, "phantom_flair.pgm")

# %% one random perturbation: an affine part plus a smooth field
spec = PerturbationSpec(strength=(0.2, 0.5))
rng = np.random.default_rng(1)
matrix, field = random_warp(spec, a.shape, rng)
print(np.round(matrix, 3))
print("max |u| =", np.abs(field).max())

moved = apply_ground_truth_warp(a, matrix, field)
write_pgm(moved, "phantom_t1_warped.pgm")

# %% unaligned overlap vs. the true inverse
#    (anything the warp pushed out of view stays lost, so the inverse is not always perfect)
back = invert_grid(matrix, field, a.shape)
for s in STRUCTURES:
    undone = sample_nearest(moved.labels[s][None], back)[0]
    print(f"{s:<7} unaligned {dice(moved.labels[s], b.labels[s]):.3f}   true inverse {dice(undone, b.labels[s]):.3f}")
