"""Recurrent surrogate classifier for transfer (grey-box) attacks.

The attacker has the labeled data but not the target model.  It fits its
own normalization, trains an LSTM over row windows, crafts gradient attacks
on whole windows, and unrolls them back into rows for the target.  Nothing
here touches the target's parameters.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .attacks import GRADIENT_ATTACKS, AdversarialBatch, AttackConfig, run_gradient_attack
from .data import STABLE, Dataset, NormStats, WindowConfig, window_label, window_starts, zscore_fit
from .nn import AdamState, LSTMCell, Network, adam_step, bce_loss

MODEL_KIND = "surrogate-recurrent"


@dataclass(frozen=True)
class SurrogateConfig:
    hidden: int = 64
    epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 32
    train_frac: float = 0.70
    window: WindowConfig = WindowConfig()
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_frac < 1:
            raise ValueError("train_frac must be in (0, 1)")
        if self.epochs < 0 or self.hidden < 1 or self.batch_size < 1:
            raise ValueError(f"invalid surrogate config {self}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SurrogateConfig":
        doc = dict(doc)
        if isinstance(doc.get("window"), dict):
            doc["window"] = WindowConfig(**doc["window"])
        return cls(**doc)


@dataclass
class SurrogateModel:
    cell: LSTMCell
    head: Network
    norm_stats: NormStats
    config: SurrogateConfig
    heldout_accuracy: float | None = None

    @classmethod
    def fresh(cls, cfg: SurrogateConfig, norm_stats: NormStats, n_features: int = 12):
        cell_seed, head_seed = np.random.SeedSequence(cfg.seed).spawn(2)
        cell = LSTMCell(n_features, cfg.hidden, rng=np.random.default_rng(cell_seed))
        head = Network([cfg.hidden, 1], ["sigmoid"], rng=np.random.default_rng(head_seed))
        return cls(cell, head, norm_stats, cfg)

    def _steps(self, windows: np.ndarray) -> list[np.ndarray]:
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3:
            raise ValueError(f"expected (n, T, features) windows, got {windows.shape}")
        return [windows[:, t] for t in range(windows.shape[1])]

    def score(self, windows: np.ndarray) -> np.ndarray:
        """P(stable) per window; ``windows`` in the surrogate's own normalized units."""
        hs = self.cell.forward(self._steps(windows))
        return self.head.predict(hs[-1])[:, 0]

    def _loss_and_backward(self, windows, y):
        hs = self.cell.forward(self._steps(windows))
        out = self.head.forward(hs[-1])[-1]
        loss, g = bce_loss(out, np.asarray(y, dtype=np.float64).reshape(-1, 1))
        dh = self.head.backward(g)
        dxs = self.cell.backward([None] * (len(hs) - 1) + [dh])
        return loss, np.stack(dxs, axis=1)

    def loss_gradient(self, windows: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self._loss_and_backward(windows, y)[1]


@dataclass
class SurrogateReport:
    heldout_accuracy: float
    train_windows: int
    heldout_windows: int
    epoch_losses: list = field(default_factory=list)


def windows_of(d: Dataset, cfg: WindowConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Windows over ``d`` in row order: (features [n,T,F], labels [n], row_ids [n,T])."""
    starts = window_starts(len(d), cfg)
    idx = starts[:, None] + np.arange(cfg.window_size)[None, :]
    labels = np.array([window_label(d.labels[i]) for i in idx], dtype=np.int8)
    return d.features[idx], labels, d.row_ids[idx]


def train_surrogate(full: Dataset, cfg: SurrogateConfig = SurrogateConfig()
                    ) -> tuple[SurrogateModel, SurrogateReport]:
    """Fit normalization on ``full`` (raw units, both labels), window it in row
    order, and train on a seeded ``train_frac`` share of the windows."""
    ns = zscore_fit(full, seed=cfg.seed)
    x, y, _ = windows_of(full.with_features(ns.apply(full.features)), cfg.window)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    perm = rng.permutation(len(y))
    n_train = int(round(cfg.train_frac * len(y)))
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    if len(np.unique(y[tr])) < 2:
        raise ValueError("surrogate training windows contain a single class")
    model = SurrogateModel.fresh(cfg, ns, full.features.shape[1])
    cell_opt = AdamState(model.cell.params.size, cfg.learning_rate, 0.9, 0.999)
    head_opt = AdamState(model.head.params.size, cfg.learning_rate, 0.9, 0.999)
    losses = []
    for _ in range(cfg.epochs):
        order = tr[rng.permutation(len(tr))]
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            loss, _ = model._loss_and_backward(x[b], y[b])
            adam_step(model.cell.params, model.cell.grads, cell_opt)
            adam_step(model.head.params, model.head.grads, head_opt)
            total += loss * len(b)
        losses.append(total / len(tr))
    acc = float(np.mean((model.score(x[te]) >= 0.5) == (y[te] == STABLE))) if len(te) else float("nan")
    model.heldout_accuracy = acc
    return model, SurrogateReport(acc, len(tr), len(te), losses)


class _EvalSpace:
    """Presents the surrogate in the evaluator's normalized units.

    x_s = (x_e * std_e + mean_e - mean_s) / std_s, so dL/dx_e = dL/dx_s * std_e / std_s.
    """

    def __init__(self, model: SurrogateModel, eval_stats: NormStats | None):
        self.model = model
        if eval_stats is None:
            self.scale, self.shift = 1.0, 0.0
        else:
            s = model.norm_stats
            self.scale = eval_stats.std / s.std
            self.shift = (eval_stats.mean - s.mean) / s.std

    def loss_gradient(self, x, y):
        return self.model.loss_gradient(x * self.scale + self.shift, y) * self.scale


def transfer_attack(surrogate: SurrogateModel, attack_name: str, cfg: AttackConfig,
                    windows: np.ndarray, labels: np.ndarray, row_ids: np.ndarray,
                    row_labels: dict | None = None, eval_stats: NormStats | None = None
                    ) -> AdversarialBatch:
    """Attack whole windows through the surrogate, then unroll to rows.

    ``windows`` are in ``eval_stats`` normalized units (the surrogate's own
    units if None), so the budget ``cfg.epsilon`` applies in those units.
    Overlapping windows keep the first occurrence of each row; output rows
    are ordered by row id.  ``row_labels`` maps row id to true row label
    (window labels are used when omitted).
    """
    if attack_name not in GRADIENT_ATTACKS:
        raise ValueError(f"unknown attack {attack_name!r}; valid: {', '.join(GRADIENT_ATTACKS)}")
    windows = np.asarray(windows, dtype=np.float64)
    space = _EvalSpace(surrogate, eval_stats)
    win_batch = run_gradient_attack(attack_name, space, windows, labels, cfg)
    fool = fooling_rate(surrogate, win_batch.x_adv * space.scale + space.shift, labels)
    flat_ids = np.asarray(row_ids).reshape(-1)
    first = np.unique(flat_ids, return_index=True)[1]  # sorted ids, first occurrence
    f = windows.shape[-1]
    x_clean = windows.reshape(-1, f)[first]
    x_adv = win_batch.x_adv.reshape(-1, f)[first]
    ids = flat_ids[first]
    if row_labels is None:
        y_rows = np.repeat(np.asarray(labels), windows.shape[1])[first]
    else:
        y_rows = np.array([row_labels[int(i)] for i in ids])
    conf = {**cfg.to_dict(), "transfer_from": MODEL_KIND, "windows": int(windows.shape[0]),
            "surrogate_fooling_rate": fool}
    return AdversarialBatch(x_clean, x_adv, y_rows.astype(np.int8), attack_name, conf, ids,
                            cfg.epsilon)


def fooling_rate(surrogate: SurrogateModel, batch_windows: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of windows (surrogate units) the surrogate misclassifies."""
    pred = surrogate.score(batch_windows) >= 0.5
    return float(np.mean(pred != (np.asarray(labels) == STABLE)))


def save_surrogate(model: SurrogateModel, path) -> None:
    checkpoint.write({
        "model_kind": MODEL_KIND,
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "norm_stats": model.norm_stats.to_dict(),
        "heldout_accuracy": model.heldout_accuracy,
        "cell": {"input_dim": model.cell.input_dim, "hidden_dim": model.cell.hidden_dim,
                 "params": model.cell.params},
        "head": {"params": model.head.params},
    }, path)


def load_surrogate(path) -> SurrogateModel:
    doc = checkpoint.read(path, MODEL_KIND)
    try:
        cfg = SurrogateConfig.from_dict(doc["config"])
        ns = NormStats.from_dict(doc["norm_stats"])
        model = SurrogateModel.fresh(cfg, ns, int(doc["cell"]["input_dim"]))
        model.cell.params[...] = checkpoint.array(doc["cell"], "params", model.cell.params.size)
        model.head.params[...] = checkpoint.array(doc["head"], "params", model.head.params.size)
        model.heldout_accuracy = doc.get("heldout_accuracy")
    except (KeyError, TypeError, ValueError) as exc:
        raise checkpoint.CheckpointError(f"{path}: malformed surrogate checkpoint: {exc}") from None
    return model
