#!/usr/bin/env python3
# Gradient-sign attacks and the query-only GAN-GRID attack against a
# freshly trained discriminator.  Detection = fraction of attacked rows the
# model labels unstable.

import numpy as np

from ganstab.attacks import AttackConfig, GanGridConfig, verify_budget
from ganstab.data import split_stable_only, zscore_apply, zscore_fit
from ganstab.evaluation import ScenarioReport, baseline_row, gan_grid, table2_text, white_box
from ganstab.gan import TrainConfig, train
from ganstab.standin import standin_dataset

raw = standin_dataset(2000, seed=1)
bundle = split_stable_only(raw, seed=1)
stats = zscore_fit(bundle.train_stable)
norm = type(bundle)(*(zscore_apply(p, stats) for p in (bundle.train_stable, bundle.test_stable,
                                                      bundle.test_unstable)))

at, _ = train(norm.train_stable, TrainConfig(epochs=5, seed=1), norm_stats=stats)
plain, _ = train(norm.train_stable, TrainConfig(epochs=5, seed=1, adversarial_layer=False),
                 norm_stats=stats)

# %% white-box: the attacker differentiates through the discriminator itself
cfg = AttackConfig(epsilon=0.05, seed=1)
cells, batches = white_box(at, norm, cfg)
for name, b in batches.items():
    rep = verify_budget(b)
    print(f"{name:>6}: max L-inf {rep.max_linf:.6f}  mean L2 {rep.l2.mean():.4f}")

# %% grey-box 2: only labels and scores come back from the oracle
gg = GanGridConfig(episodes=100, seed=1)
rate, info = gan_grid(at, gg, n_samples=1000)
print(f"gan-grid spent {info['queries']} queries; detection {rate:.3f}")

rows = [ScenarioReport("white-box", {**cells, "gan-grid": rate}),
        baseline_row(plain, norm, cfg, gg, 1000)]
print()
print(table2_text(rows))
print("mean detection, AT vs no AT:", np.round([r.mean() for r in rows], 3))
