"""Evasion attacks: the L-infinity gradient-sign family (FGSM, BIM, RFGSM,
PGD) and GAN-GRID, a query-only generator trained with REINFORCE.

Gradient attacks work on any object with ``loss_gradient(x, y) -> dL/dx``
where ``L`` is the model's binary cross-entropy against the true label and
``x`` is in normalized feature units.  Arrays of any shape are accepted, so
the same code perturbs single rows and whole windows.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .data import FEATURE_NAMES, LABEL_NAMES, STABLE
from .gan import GeneratorConfig
from .nn import AdamState, Network, adam_step

BUDGET_TOL = 1e-9
GRADIENT_ATTACKS = ("fgsm", "bim", "rfgsm", "pgd")
ALL_ATTACKS = GRADIENT_ATTACKS + ("gan-grid",)


class GradientModel(Protocol):
    def loss_gradient(self, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.05
    alpha: float | None = None
    iterations: int = 10
    noise_sigma: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.epsilon / 4)
        if self.noise_sigma is None:
            object.__setattr__(self, "noise_sigma", self.epsilon / 2)
        if not 0 <= self.alpha <= self.epsilon:
            raise ValueError(f"need 0 <= alpha <= epsilon, got alpha={self.alpha}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AdversarialBatch:
    x_clean: np.ndarray | None
    x_adv: np.ndarray
    true_labels: np.ndarray
    attack_name: str
    config: dict = field(default_factory=dict)
    row_ids: np.ndarray | None = None
    budget: float | None = None

    def __post_init__(self):
        if self.row_ids is None:
            self.row_ids = np.arange(self.x_adv.shape[0])


def _sign_step(model: GradientModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.sign(model.loss_gradient(x, y))


def _project(x: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    return np.clip(x, center - radius, center + radius)


def fgsm(model: GradientModel, x: np.ndarray, y: np.ndarray, eps: float = 0.05) -> AdversarialBatch:
    x = np.asarray(x, dtype=np.float64)
    x_adv = x + eps * _sign_step(model, x, y)
    return AdversarialBatch(x, x_adv, np.asarray(y), "fgsm", {"epsilon": eps}, budget=eps)


def _iterate(model, x0, y, center, radius, alpha, iterations, check=None):
    x = x0
    for _ in range(iterations):
        x = _project(x + alpha * _sign_step(model, x, y), center, radius)
        if check is not None:
            check(x)
    return x


def bim(model: GradientModel, x: np.ndarray, y: np.ndarray,
        cfg: AttackConfig = AttackConfig()) -> AdversarialBatch:
    x = np.asarray(x, dtype=np.float64)
    x_adv = _iterate(model, x, y, x, cfg.epsilon, cfg.alpha, cfg.iterations)
    return AdversarialBatch(x, x_adv, np.asarray(y), "bim", cfg.to_dict(), budget=cfg.epsilon)


def rfgsm(model: GradientModel, x: np.ndarray, y: np.ndarray,
          cfg: AttackConfig = AttackConfig()) -> AdversarialBatch:
    """Random sign step of size ``noise_sigma``, then BIM steps confined to the
    remaining ``epsilon - noise_sigma`` around the noised point."""
    if cfg.noise_sigma > cfg.epsilon:
        raise ValueError(f"noise_sigma {cfg.noise_sigma} exceeds epsilon {cfg.epsilon}")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    x_noisy = x + cfg.noise_sigma * np.sign(rng.standard_normal(x.shape))
    remaining = cfg.epsilon - cfg.noise_sigma
    x_adv = _iterate(model, x_noisy, y, x_noisy, remaining, min(cfg.alpha, remaining), cfg.iterations)
    return AdversarialBatch(x, x_adv, np.asarray(y), "rfgsm", cfg.to_dict(), budget=cfg.epsilon)


def pgd(model: GradientModel, x: np.ndarray, y: np.ndarray,
        cfg: AttackConfig = AttackConfig()) -> AdversarialBatch:
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    start = x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)

    def check(xi):
        # every iterate must stay inside the ball
        assert np.max(np.abs(xi - x), initial=0.0) <= cfg.epsilon + BUDGET_TOL

    check(start)
    x_adv = _iterate(model, start, y, x, cfg.epsilon, cfg.alpha, cfg.iterations, check)
    return AdversarialBatch(x, x_adv, np.asarray(y), "pgd", cfg.to_dict(), budget=cfg.epsilon)


def run_gradient_attack(name: str, model: GradientModel, x: np.ndarray, y: np.ndarray,
                        cfg: AttackConfig = AttackConfig()) -> AdversarialBatch:
    if name == "fgsm":
        batch = fgsm(model, x, y, cfg.epsilon)
        batch.config = cfg.to_dict()
        return batch
    if name == "bim":
        return bim(model, x, y, cfg)
    if name == "rfgsm":
        return rfgsm(model, x, y, cfg)
    if name == "pgd":
        return pgd(model, x, y, cfg)
    raise ValueError(f"unknown attack {name!r}; valid: {', '.join(GRADIENT_ATTACKS)}")


@dataclass
class BudgetReport:
    linf: np.ndarray
    l2: np.ndarray
    budget: float | None
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def max_linf(self) -> float:
        return float(self.linf.max(initial=0.0))


def verify_budget(batch: AdversarialBatch, budget: float | None = None,
                  tol: float = BUDGET_TOL) -> BudgetReport:
    """Per-row L-inf and L2 deviations; rows beyond ``budget + tol`` are listed."""
    budget = batch.budget if budget is None else budget
    if batch.x_clean is None:
        n = batch.x_adv.shape[0]
        return BudgetReport(np.zeros(n), np.zeros(n), None, [])
    d = (batch.x_adv - batch.x_clean).reshape(batch.x_adv.shape[0], -1)
    linf = np.max(np.abs(d), axis=1, initial=0.0)
    l2 = np.sqrt(np.sum(d * d, axis=1))
    bad = [] if budget is None else [int(i) for i in np.flatnonzero(linf > budget + tol)]
    return BudgetReport(linf, l2, budget, bad)


def export_batch(batch: AdversarialBatch, path, extra: dict | None = None) -> None:
    """CSV of rows plus a ``.json`` sidecar with config and provenance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_feat = batch.x_adv.shape[-1]
    names = list(FEATURE_NAMES) if n_feat == len(FEATURE_NAMES) else [f"f{i}" for i in range(n_feat)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "attack"] + [f"clean_{c}" for c in names]
                   + [f"adv_{c}" for c in names] + ["true_label"])
        for i in range(batch.x_adv.shape[0]):
            clean = ([""] * n_feat if batch.x_clean is None
                     else [format(float(v), ".17g") for v in batch.x_clean[i]])
            adv = [format(float(v), ".17g") for v in batch.x_adv[i]]
            w.writerow([int(batch.row_ids[i]), batch.attack_name] + clean + adv
                       + [LABEL_NAMES[int(batch.true_labels[i])]])
    side = {"attack": batch.attack_name, "config": batch.config, "budget": batch.budget,
            "rows": int(batch.x_adv.shape[0]), **(extra or {})}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")


def import_batch(path) -> tuple[AdversarialBatch, dict]:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n_feat = (len(header) - 3) // 2
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    has_clean = bool(body) and body[0][2] != ""
    clean = (np.array([[float(v) for v in r[2:2 + n_feat]] for r in body]).reshape(-1, n_feat)
             if has_clean else None)
    adv = np.array([[float(v) for v in r[2 + n_feat:2 + 2 * n_feat]] for r in body]).reshape(-1, n_feat)
    labels = np.array([STABLE if r[-1] == "stable" else 0 for r in body], dtype=np.int8)
    batch = AdversarialBatch(clean, adv, labels, side["attack"], side.get("config", {}), ids,
                             side.get("budget"))
    return batch, side


# --- GAN-GRID -------------------------------------------------------------

class QueryOracle:
    """Query-only access to a classifier.

    Wraps ``fn(x) -> (labels, scores_or_None)`` and counts queried rows.
    Nothing else about the target is reachable through this object.
    """

    __slots__ = ("_fn", "queries", "exposes_scores")

    def __init__(self, fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray | None]],
                 exposes_scores: bool = True):
        self._fn = fn
        self.queries = 0
        self.exposes_scores = exposes_scores

    def query(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        x = np.atleast_2d(x)
        self.queries += x.shape[0]
        labels, scores = self._fn(x)
        return np.asarray(labels), (np.asarray(scores) if self.exposes_scores and scores is not None else None)


@dataclass(frozen=True)
class GanGridConfig:
    latent_dim: int = 100
    episodes: int = 300
    batch_per_episode: int = 32
    learning_rate: float = 1e-3
    exploration_sigma: float = 0.5
    baseline_decay: float = 0.9
    reward_target: int = STABLE
    n_features: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.exploration_sigma <= 0:
            raise ValueError("exploration_sigma must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class GanGridResult:
    generator: Network
    queries: int
    success_rate: float
    best_episode: int
    history: list = field(default_factory=list)

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        z = np.random.default_rng(seed).standard_normal((n, self.generator.input_dim))
        return self.generator.predict(z)


def _reward(oracle: QueryOracle, x: np.ndarray, target: int) -> tuple[np.ndarray, np.ndarray]:
    labels, scores = oracle.query(x)
    hit = (labels == target).astype(np.float64)
    if scores is None:
        return hit, hit
    shaped = scores if target == STABLE else 1.0 - scores
    return np.asarray(shaped, dtype=np.float64), hit


def gan_grid_train(oracle: QueryOracle, cfg: GanGridConfig = GanGridConfig()) -> GanGridResult:
    """Train an attack generator against a query-only oracle with REINFORCE.

    The policy is Gaussian around the generator output; each episode draws a
    batch of candidates, queries the oracle, and takes one Adam step on
    -mean((r - baseline) * log pi).  The generator whose own (noise-free)
    outputs fooled the oracle most often is returned.
    """
    gen_cfg = GeneratorConfig(cfg.latent_dim, GeneratorConfig.hidden, cfg.n_features)
    ss = np.random.SeedSequence(cfg.seed)
    init_seed, run_seed = ss.spawn(2)
    gen = Network(gen_cfg.sizes(), gen_cfg.activations(), rng=np.random.default_rng(init_seed))
    opt = AdamState(gen.params.size, cfg.learning_rate, 0.9, 0.999)
    rng = np.random.default_rng(run_seed)
    sigma2 = cfg.exploration_sigma ** 2
    baseline = None
    best = (-1.0, 0, gen.params.copy())
    history = []
    for ep in range(1, cfg.episodes + 1):
        z = rng.standard_normal((cfg.batch_per_episode, cfg.latent_dim))
        mu = gen.forward(z)[-1]
        x = mu + cfg.exploration_sigma * rng.standard_normal(mu.shape)
        r, _ = _reward(oracle, x, cfg.reward_target)
        baseline = float(r.mean()) if baseline is None else (
            cfg.baseline_decay * baseline + (1 - cfg.baseline_decay) * float(r.mean()))
        adv = r - baseline
        # d/dmu of -mean(adv * log N(x; mu, sigma^2))
        g_mu = -(adv[:, None] * (x - mu) / sigma2) / cfg.batch_per_episode
        gen.backward(g_mu)
        adam_step(gen.params, gen.grads, opt)
        # success of the deterministic outputs, on the pre-update batch
        _, hit = _reward(oracle, mu, cfg.reward_target)
        rate = float(hit.mean())
        loss = float(-np.mean(adv * -np.sum((x - mu) ** 2, axis=1) / (2 * sigma2)))
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite policy loss at episode {ep}")
        history.append({"episode": ep, "mean_reward": float(r.mean()), "success_rate": rate,
                        "baseline": baseline, "loss": loss})
        if rate > best[0]:
            best = (rate, ep, gen.params.copy())
    gen.params[...] = best[2]
    return GanGridResult(gen, oracle.queries, best[0], best[1], history)
