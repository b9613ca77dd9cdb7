"""Synthetic stand-in for the 10,000-row grid-stability table.

Same schema and feature ranges as the public simulated dataset, but the
``stab`` column is a closed-form score, not the output of a grid model:

    stab = (sum_j tau_j * g_j * (0.5 + |p_j| / 2) - THRESHOLD) / 100

It is symmetric under permutations of the three consumers, so sixfold
augmentation keeps labels valid, and THRESHOLD puts roughly 36% of uniformly
drawn rows on the stable side (stab < 0).  Use it for smoke runs and demos
when the real CSV is not available; reported numbers on it say nothing about
the real data.
"""

from __future__ import annotations

import numpy as np

from .data import FEATURE_NAMES, STABLE, UNSTABLE, Dataset, write_csv

THRESHOLD = 12.5124  # 36.2% quantile of the score under the sampling ranges below
TAU_RANGE = (0.5, 10.0)
CONSUMER_P_RANGE = (-2.0, -0.5)
G_RANGE = (0.05, 1.0)


def stability_score(features: np.ndarray) -> np.ndarray:
    tau, p, g = features[:, 0:4], features[:, 4:8], features[:, 8:12]
    return ((tau * g * (0.5 + np.abs(p) / 2)).sum(axis=1) - THRESHOLD) / 100.0


def standin_dataset(n: int = 10_000, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    tau = rng.uniform(*TAU_RANGE, size=(n, 4))
    pc = rng.uniform(*CONSUMER_P_RANGE, size=(n, 3))
    p = np.column_stack([-pc.sum(axis=1), pc])
    g = rng.uniform(*G_RANGE, size=(n, 4))
    x = np.column_stack([tau, p, g])
    stab = stability_score(x)
    labels = np.where(stab < 0, STABLE, UNSTABLE)
    return Dataset(x, labels, FEATURE_NAMES, stab)


def write_standin_csv(path, n: int = 10_000, seed: int = 0) -> Dataset:
    """Write the stand-in table in the public CSV layout (no row_id column)."""
    d = standin_dataset(n, seed)
    write_csv(d, path, with_row_id=False)
    return d
