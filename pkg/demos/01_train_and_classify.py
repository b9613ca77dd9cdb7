#!/usr/bin/env python3
# Train the GAN on stable rows only and use its discriminator as a
# stable/unstable classifier.
#
# The real grid-stability table is not bundled, so this walk-through uses the
# schema-compatible stand-in generator.  Numbers here say nothing about the
# real task; they only show the moving parts.

import sys

import numpy as np

from ganstab.data import augment_sixfold, split_stable_only, zscore_apply, zscore_fit
from ganstab.evaluation import class_report, table3_text
from ganstab.gan import TrainConfig, classify, train
from ganstab.standin import standin_dataset

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5

# %% data: 10k rows, six consumer orderings each, then a stable-only split
raw = augment_sixfold(standin_dataset(1000, seed=0))
bundle = split_stable_only(raw, train_frac=0.9, seed=0)
print(f"{len(raw)} rows, {raw.n_stable} stable; training on {len(bundle.train_stable)} stable rows")

# statistics come from the training rows only
stats = zscore_fit(bundle.train_stable)
norm = type(bundle)(*(zscore_apply(p, stats) for p in (bundle.train_stable, bundle.test_stable,
                                                      bundle.test_unstable)))

# %% train with and without the FGSM layer
models = {}
for adv in (False, True):
    cfg = TrainConfig(epochs=epochs, seed=0, adversarial_layer=adv)
    model, report = train(norm.train_stable, cfg, norm_stats=stats)
    label = "AT" if adv else "no AT"
    models[label] = model
    print(f"{label:>5}: final d_real {report.records[-1].d_loss_real:.3f} "
          f"g {report.records[-1].g_loss:.3f} repulsion {report.records[-1].repulsion_loss:.3f}")

# %% per-class accuracy on the held-out rows
print()
print(table3_text([class_report(k, m, norm) for k, m in models.items()]))

# classify() takes raw feature units and normalizes internally
scores, labels = classify(models["AT"], raw.features[:6])
print("first six raw rows:", np.round(scores, 3), labels)
