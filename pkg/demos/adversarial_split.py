"""Adversarial train/test split built from a target task and a distractor.

Training keeps only points where the two tasks agree, so a model can not tell
which one it is learning; the test side is where they disagree.
Run: python demos/adversarial_split.py
"""
import numpy as np

from taskdisc import (
    StochasticityConfig, SyntheticSpec, TrainConfig, adversarial_split, evaluate_split,
    generate_synthetic, matched_random_split, pixel_threshold_task, planted_task, similarity,
)

ds = generate_synthetic(SyntheticSpec(2048, 16, 16, 0.0), seed=0)
target = planted_task(ds, 0)
sims = np.array([similarity(target, pixel_threshold_task(ds, c)) for c in range(ds.D)])
coord = int(np.argmin(np.abs(sims - 0.5)))
distractor = pixel_threshold_task(ds, coord)
print(f"distractor: pixel coord {coord}, similarity to target {sims[coord]:.3f}")

cfg = TrainConfig()
adv = adversarial_split(target, distractor, min_side=2 * cfg.batch_size)
rnd = matched_random_split(target, adv, seed=0)
for name, sp in (("adversarial", adv), ("matched random", rnd)):
    rep = evaluate_split(ds, sp, target, cfg, StochasticityConfig(), n_runs=4)
    print(f"{name:15s} train {rep.n_train:4d} test {rep.n_test:4d}  "
          f"test acc {rep.acc_mean:.3f} +- {rep.acc_std:.3f}")
