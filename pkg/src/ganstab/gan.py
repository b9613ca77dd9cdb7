"""GAN whose discriminator doubles as a stable/unstable classifier.

The generator is trained with the usual non-saturating objective plus a
hinge ("repulsion") penalty that keeps its samples at least ``margin`` away
from stable rows, so the discriminator sees out-of-distribution negatives
instead of near-copies of the data.  Optionally every batch also trains the
discriminator to reject FGSM-perturbed stable rows.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from . import checkpoint
from .data import STABLE, UNSTABLE, Dataset, NormStats
from .nn import AdamState, Network, ShapeError, adam_step, bce_loss

MODEL_KIND = "gan-stability"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 100
    hidden: tuple = (128, 64)
    output_dim: int = 12

    def sizes(self) -> list[int]:
        return [self.latent_dim, *self.hidden, self.output_dim]

    def activations(self) -> list[str]:
        return ["leaky_relu"] * len(self.hidden) + ["linear"]


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_dim: int = 12
    hidden: tuple = (160, 200, 256, 512)
    output_dim: int = 1

    def __post_init__(self):
        if self.output_dim != 1:
            raise ValueError("discriminator has a single sigmoid output")

    def sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    def activations(self) -> list[str]:
        return ["leaky_relu"] * len(self.hidden) + ["sigmoid"]


GENERATOR_OBJECTIVES = ("non_saturating", "algorithm_literal")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    learning_rate: float = 2e-4
    batch_size: int = 4
    margin: float = 4.0
    fgsm_epsilon_train: float = 0.05
    adversarial_layer: bool = True
    seed: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    generator_objective: str = "non_saturating"
    generator: GeneratorConfig = GeneratorConfig()
    discriminator: DiscriminatorConfig = DiscriminatorConfig()

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.fgsm_epsilon_train < 0:
            raise ValueError("fgsm_epsilon_train must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if self.generator_objective not in GENERATOR_OBJECTIVES:
            raise ValueError(f"generator_objective must be one of {GENERATOR_OBJECTIVES}")
        if self.generator.output_dim != self.discriminator.input_dim:
            raise ValueError("generator output_dim must equal discriminator input_dim")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        gen = doc.pop("generator", {})
        disc = doc.pop("discriminator", {})
        gen = GeneratorConfig(**{**gen, "hidden": tuple(gen.get("hidden", GeneratorConfig.hidden))})
        disc = DiscriminatorConfig(**{**disc, "hidden": tuple(disc.get("hidden", DiscriminatorConfig.hidden))})
        return cls(**doc, generator=gen, discriminator=disc)


@dataclass
class EpochRecord:
    epoch: int
    d_loss_real: float
    d_loss_fake: float
    d_loss_adv: float | None
    g_loss: float
    repulsion_loss: float
    wall_time_s: float


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    d_steps: int = 0
    g_steps: int = 0
    batches: int = 0

    COLUMNS = ("epoch", "d_loss_real", "d_loss_fake", "d_loss_adv", "g_loss",
               "repulsion_loss", "wall_time_s")

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name)
                         for r in self.records])

    def to_csv(self, path, include_time: bool = True) -> None:
        cols = self.COLUMNS if include_time else self.COLUMNS[:-1]
        lines = [",".join(cols)]
        for r in self.records:
            cells = []
            for c in cols:
                v = getattr(r, c)
                cells.append("" if v is None else (str(v) if c == "epoch" else format(v, ".17g")))
            lines.append(",".join(cells))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass
class GanModel:
    generator: Network
    discriminator: Network
    norm_stats: NormStats | None
    config: TrainConfig
    provenance: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, cfg: TrainConfig, norm_stats: NormStats | None = None) -> "GanModel":
        ss = np.random.SeedSequence(cfg.seed)
        g_seed, d_seed = ss.spawn(2)
        gen = Network(cfg.generator.sizes(), cfg.generator.activations(),
                      rng=np.random.default_rng(g_seed))
        disc = Network(cfg.discriminator.sizes(), cfg.discriminator.activations(),
                       rng=np.random.default_rng(d_seed))
        return cls(gen, disc, norm_stats, cfg)

    @property
    def n_features(self) -> int:
        return self.discriminator.input_dim

    def score(self, x_norm: np.ndarray) -> np.ndarray:
        """Discriminator probability of 'stable' for already-normalized rows."""
        return self.discriminator.predict(x_norm)[:, 0]

    def loss_gradient(self, x_norm: np.ndarray, y: np.ndarray) -> np.ndarray:
        """d BCE(D(x), y) / dx, with y = 1 for stable rows."""
        x_norm = np.asarray(x_norm, dtype=np.float64)
        out = self.discriminator.forward(x_norm)[-1]
        _, g = bce_loss(out, np.asarray(y, dtype=np.float64).reshape(-1, 1))
        return self.discriminator.backward(g)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.config.generator.latent_dim))
        return self.generator.predict(z)


def repulsion_loss(x_gen: np.ndarray, s_real: np.ndarray, m: float) -> tuple[float, np.ndarray]:
    """Mean hinge ReLU(m - ||x_i - s_i||) over paired rows, and its gradient on x_gen.

    A pair at exactly zero distance contributes m to the loss and a zero
    (sub)gradient.
    """
    if x_gen.shape != s_real.shape:
        raise ShapeError(f"paired batches differ: {x_gen.shape} vs {s_real.shape}")
    if m <= 0:
        raise ValueError("margin must be positive")
    b = x_gen.shape[0]
    diff = x_gen - s_real
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    active = dist < m
    loss = float(np.sum(np.where(active, m - dist, 0.0)) / b)
    grad = np.zeros_like(x_gen)
    live = active & (dist > 0)
    grad[live] = -diff[live] / dist[live, None] / b
    return loss, grad


def generator_loss(d_out_on_fake: np.ndarray, repulsion: float,
                   objective: str = "non_saturating") -> float:
    """-mean(log D(G(z))) + repulsion; ``algorithm_literal`` flips the first sign."""
    p = np.clip(np.asarray(d_out_on_fake, dtype=np.float64), 1e-7, 1 - 1e-7)
    adv = -np.mean(np.log(p))
    if objective == "algorithm_literal":
        adv = -adv
    return float(adv + repulsion)


def _d_step(disc: Network, state: AdamState, x: np.ndarray, target: float) -> float:
    assert target in (0.0, 1.0)
    out = disc.forward(x)[-1]
    loss, g = bce_loss(out, np.full_like(out, target))
    disc.backward(g)
    adam_step(disc.params, disc.grads, state)
    return loss


def train(stable_train: Dataset | np.ndarray, cfg: TrainConfig = TrainConfig(),
          norm_stats: NormStats | None = None,
          on_epoch_end: Callable[[int, GanModel, EpochRecord], None] | None = None,
          ) -> tuple[GanModel, TrainReport]:
    """Run the four-step per-batch loop for ``cfg.epochs`` epochs.

    ``stable_train`` holds normalized stable rows only.  Per batch:
    discriminator on real rows (target 1), on generated rows (target 0), on
    FGSM-perturbed real rows (target 0, only with ``adversarial_layer``), then
    one generator step on the adversarial term plus repulsion against the
    shuffled real batch.
    """
    if isinstance(stable_train, Dataset):
        if np.any(stable_train.labels != STABLE):
            raise ValueError("training data must contain stable rows only")
        x_all = stable_train.features
    else:
        x_all = np.asarray(stable_train, dtype=np.float64)
    if x_all.ndim != 2 or x_all.shape[1] != cfg.discriminator.input_dim:
        raise ShapeError(f"expected (n, {cfg.discriminator.input_dim}) training rows, got {x_all.shape}")
    model = GanModel.fresh(cfg, norm_stats)
    report = TrainReport()
    gen, disc = model.generator, model.discriminator
    d_opt = AdamState(disc.params.size, cfg.learning_rate, cfg.beta1, cfg.beta2)
    g_opt = AdamState(gen.params.size, cfg.learning_rate, cfg.beta1, cfg.beta2)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    n, bs, latent = x_all.shape[0], cfg.batch_size, cfg.generator.latent_dim

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(5)
        n_batches = 0
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            x_real = x_all[perm[start:start + bs]]
            b = x_real.shape[0]

            # 1: real stable rows -> 1
            l_real = _d_step(disc, d_opt, x_real, 1.0)

            # 2: generated rows -> 0
            x_fake = gen.predict(rng.standard_normal((b, latent)))
            l_fake = _d_step(disc, d_opt, x_fake, 0.0)

            # 3: FGSM on the real rows -> 0
            l_adv = 0.0
            if cfg.adversarial_layer:
                grad_x = model.loss_gradient(x_real, np.ones(b))
                x_adv = x_real + cfg.fgsm_epsilon_train * np.sign(grad_x)
                l_adv = _d_step(disc, d_opt, x_adv, 0.0)

            # 4: generator
            z = rng.standard_normal((b, latent))
            x_gen = gen.forward(z)[-1]
            d_out = disc.forward(x_gen)[-1]
            adv_loss, g_dout = bce_loss(d_out, np.ones_like(d_out))
            if cfg.generator_objective == "algorithm_literal":
                adv_loss, g_dout = -adv_loss, -g_dout
            g_x = disc.backward(g_dout)
            rep, g_rep = repulsion_loss(x_gen, x_real[rng.permutation(b)], cfg.margin)
            gen.backward(g_x + g_rep)
            adam_step(gen.params, gen.grads, g_opt)
            g_total = adv_loss + rep

            step = (l_real, l_fake, l_adv, g_total, rep)
            if not np.all(np.isfinite(step)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {n_batches + 1}: {step}")
            sums += step
            n_batches += 1
            report.d_steps += 3 if cfg.adversarial_layer else 2
            report.g_steps += 1
        report.batches += n_batches
        means = sums / max(n_batches, 1)
        rec = EpochRecord(epoch, float(means[0]), float(means[1]),
                          float(means[2]) if cfg.adversarial_layer else None,
                          float(means[3]), float(means[4]), time.perf_counter() - t0)
        report.records.append(rec)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, rec)
    model.provenance.setdefault("seed", cfg.seed)
    return model, report


def classify(model: GanModel, x_raw: np.ndarray, threshold: float = 0.5
             ) -> tuple[np.ndarray, np.ndarray]:
    """Scores in (0, 1) and labels (stable iff score >= threshold) for raw-unit rows."""
    x_raw = np.atleast_2d(np.asarray(x_raw, dtype=np.float64))
    if x_raw.shape[1] != model.n_features:
        raise ShapeError(f"expected {model.n_features} features, got {x_raw.shape[1]}")
    if model.norm_stats is None:
        raise ValueError("model has no normalization statistics")
    scores = model.score(model.norm_stats.apply(x_raw))
    return scores, labels_from_scores(scores, threshold)


def labels_from_scores(scores: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.where(np.asarray(scores) >= threshold, STABLE, UNSTABLE).astype(np.int8)


def ood_margin_fraction(model: GanModel, stable_ref, n_samples: int = 1000,
                        seed: int = 0) -> float:
    """Fraction of generator samples at least ``margin`` from every reference stable row.

    ``stable_ref`` is in normalized units (Dataset or array).
    """
    ref = stable_ref.features if isinstance(stable_ref, Dataset) else np.asarray(stable_ref)
    x = model.sample(n_samples, np.random.default_rng(seed))
    dist, _ = cKDTree(ref).query(x, k=1)
    return float(np.mean(dist >= model.config.margin))


def _net_doc(net: Network) -> dict:
    return {"sizes": list(net.sizes), "activations": list(net.activations), "slope": net.slope,
            "layers": [{"weights": l.weights, "bias": l.bias} for l in net.layers]}


def _net_from_doc(doc: dict) -> Network:
    try:
        net = Network(doc["sizes"], doc["activations"], rng=np.random.default_rng(0),
                      slope=doc.get("slope", 0.2))
        layers = doc["layers"]
        if len(layers) != len(net.layers):
            raise checkpoint.CheckpointError("layer count mismatch")
        for layer, ld in zip(net.layers, layers):
            layer.weights[...] = checkpoint.array(ld, "weights", layer.weights.size).reshape(layer.weights.shape)
            layer.bias[...] = checkpoint.array(ld, "bias", layer.bias.size)
    except (KeyError, TypeError, ValueError) as exc:
        raise checkpoint.CheckpointError(f"malformed network section: {exc}") from None
    return net


def save_checkpoint(model: GanModel, path) -> None:
    checkpoint.write({
        "model_kind": MODEL_KIND,
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "norm_stats": None if model.norm_stats is None else model.norm_stats.to_dict(),
        "generator": _net_doc(model.generator),
        "discriminator": _net_doc(model.discriminator),
        "provenance": model.provenance,
    }, path)


def load_checkpoint(path) -> GanModel:
    doc = checkpoint.read(path, MODEL_KIND)
    try:
        cfg = TrainConfig.from_dict(doc["config"])
        ns = None if doc["norm_stats"] is None else NormStats.from_dict(doc["norm_stats"])
        gen = _net_from_doc(doc["generator"])
        disc = _net_from_doc(doc["discriminator"])
    except (KeyError, TypeError, ValueError) as exc:
        raise checkpoint.CheckpointError(f"{path}: malformed checkpoint: {exc}") from None
    if list(gen.sizes) != cfg.generator.sizes() or list(disc.sizes) != cfg.discriminator.sizes():
        raise checkpoint.CheckpointError(f"{path}: network sizes disagree with config")
    return GanModel(gen, disc, ns, cfg, dict(doc.get("provenance") or {}))
