"""Detection metrics, ROC, scenario tables and timing.

Throughout, the positive class is *unstable* (label 0): a detector "hits"
when it flags an unstable or attacked row.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import (
    GRADIENT_ATTACKS, AttackConfig, GanGridConfig, QueryOracle, gan_grid_train,
    run_gradient_attack, verify_budget,
)
from .data import STABLE, UNSTABLE, SplitBundle
from .gan import GanModel, TrainConfig, labels_from_scores, train

SCENARIOS = ("white-box", "grey-box-1", "grey-box-2")
TABLE2_COLUMNS = ("fgsm", "bim", "rfgsm", "pgd", "gan-grid")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    f1: float


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float
    fpr: float


def confusion(labels_true, labels_pred) -> ConfusionMatrix:
    t = np.asarray(labels_true)
    p = np.asarray(labels_pred)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {p.shape}")
    pos_t, pos_p = t == UNSTABLE, p == UNSTABLE
    return ConfusionMatrix(int(np.sum(pos_t & pos_p)), int(np.sum(~pos_t & ~pos_p)),
                           int(np.sum(~pos_t & pos_p)), int(np.sum(pos_t & ~pos_p)))


def metrics(cm: ConfusionMatrix) -> Metrics:
    if cm.total <= 0:
        raise ValueError("empty confusion matrix")
    denom = 2 * cm.tp + cm.fp + cm.fn
    return Metrics((cm.tp + cm.tn) / cm.total, 0.0 if denom == 0 else 2 * cm.tp / denom)


def roc(unstable_scores, labels, n_thresholds: int = 101) -> tuple[list[RocPoint], float]:
    """Sweep ``predict unstable iff score >= t`` over a uniform grid on [0, 1],
    every distinct score, and one point above the maximum.  AUC by trapezoid."""
    s = np.asarray(unstable_scores, dtype=np.float64)
    pos = np.asarray(labels) == UNSTABLE
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC/AUC undefined for single-class labels")
    grid = np.linspace(0.0, 1.0, n_thresholds)
    top = max(1.0, float(s.max())) + 1e-9
    thr = np.unique(np.concatenate([grid, s, [top]]))
    order = np.argsort(s)
    s_sorted, pos_sorted = s[order], pos[order]
    # rows with score >= t are those from searchsorted(left) onward
    cut = np.searchsorted(s_sorted, thr, side="left")
    pos_above = np.concatenate([np.cumsum(pos_sorted[::-1])[::-1], [0]])
    tp = pos_above[cut]
    fp = (len(s) - cut) - tp
    tpr, fpr = tp / n_pos, fp / n_neg
    pts = [RocPoint(float(a), float(b), float(c)) for a, b, c in zip(thr, tpr, fpr)]
    # thresholds ascend, so rates descend; integrate in increasing fpr
    auc = float(np.trapezoid(tpr[::-1], fpr[::-1]))
    return pts, auc


def per_class_accuracy(labels_true, labels_pred) -> dict:
    t, p = np.asarray(labels_true), np.asarray(labels_pred)
    out = {}
    for name, cls in (("stable", STABLE), ("unstable", UNSTABLE)):
        mask = t == cls
        out[name] = float(np.mean(p[mask] == cls)) if mask.any() else float("nan")
    return out


def detection_rate(model: GanModel, x_norm: np.ndarray) -> float:
    """Fraction of (attacked) rows the model flags as unstable."""
    return float(np.mean(labels_from_scores(model.score(x_norm)) == UNSTABLE))


@dataclass
class ScenarioReport:
    scenario: str
    cells: dict
    provenance: dict = field(default_factory=dict)
    model: str = "AT"

    def mean(self) -> float:
        vals = [v for v in self.cells.values() if v is not None]
        return float(np.mean(vals)) if vals else float("nan")


@dataclass
class ClassReport:
    """Table-3 style accuracy of one model on clean test rows."""
    label: str
    stable: float
    unstable: float
    both: Metrics
    mean_class_accuracy: float
    auc: float | None = None
    roc_points: list = field(default_factory=list)


def class_report(label: str, model: GanModel, bundle: SplitBundle, n_thresholds: int = 101) -> ClassReport:
    test = bundle.test_rows()
    scores = model.score(test.features)
    pred = labels_from_scores(scores)
    pc = per_class_accuracy(test.labels, pred)
    both = metrics(confusion(test.labels, pred))
    try:
        pts, auc = roc(1.0 - scores, test.labels, n_thresholds)
    except ValueError:
        pts, auc = [], None
    return ClassReport(label, pc["stable"], pc["unstable"], both,
                       (pc["stable"] + pc["unstable"]) / 2, auc, pts)


@dataclass
class ScenarioInputs:
    """Everything a scenario run may need; absent pieces disable scenarios."""
    bundle: SplitBundle
    model: GanModel | None = None
    baseline: GanModel | None = None
    surrogate: object | None = None
    attack_cfg: AttackConfig = AttackConfig()
    gan_grid_cfg: GanGridConfig = GanGridConfig()
    gan_grid_samples: int = 2000
    transfer_batches: dict | None = None


def white_box(model: GanModel, bundle: SplitBundle, cfg: AttackConfig,
              attacks=GRADIENT_ATTACKS) -> tuple[dict, dict]:
    test = bundle.test_rows()
    cells, batches = {}, {}
    for name in attacks:
        b = run_gradient_attack(name, model, test.features, test.labels, cfg)
        b.row_ids = test.row_ids
        if not verify_budget(b).ok:
            raise AssertionError(f"{name}: budget violated")
        cells[name] = detection_rate(model, b.x_adv)
        batches[name] = b
    return cells, batches


def gan_grid(model: GanModel, cfg: GanGridConfig, n_samples: int) -> tuple[float, dict]:
    """Query-only attack on ``model``; detection over fresh generator samples."""
    def target(x):
        s = model.score(x)
        return labels_from_scores(s), s
    oracle = QueryOracle(target)
    res = gan_grid_train(oracle, cfg)
    x = res.sample(n_samples, seed=cfg.seed)
    return detection_rate(model, x), {"queries": res.queries, "train_success": res.success_rate,
                                      "best_episode": res.best_episode}


def run_scenarios(inp: ScenarioInputs, scenarios=SCENARIOS) -> list[ScenarioReport]:
    """Table-2 cells: detection accuracy of each attack per scenario.

    Missing cells (attack not performed in that scenario) are None.
    """
    reports = []
    for sc in scenarios:
        if sc not in SCENARIOS:
            raise ValueError(f"unknown scenario {sc!r}")
        if inp.model is None:
            raise ValueError(f"scenario {sc} needs the primary model")
        cells = {c: None for c in TABLE2_COLUMNS}
        prov = {"seed": inp.model.config.seed}
        if sc == "white-box":
            got, _ = white_box(inp.model, inp.bundle, inp.attack_cfg)
            cells.update(got)
        elif sc == "grey-box-1":
            if inp.transfer_batches is None:
                raise ValueError("grey-box-1 needs transfer batches from a surrogate")
            for name, b in inp.transfer_batches.items():
                cells[name] = detection_rate(inp.model, b.x_adv)
        else:
            cells["gan-grid"], extra = gan_grid(inp.model, inp.gan_grid_cfg, inp.gan_grid_samples)
            prov.update(extra)
        reports.append(ScenarioReport(sc, cells, prov))
    return reports


def baseline_row(baseline: GanModel, bundle: SplitBundle, cfg: AttackConfig,
                 gan_grid_cfg: GanGridConfig | None = None, n_samples: int = 2000) -> ScenarioReport:
    """Undefended model under the same white-box suite (and optionally GAN-GRID)."""
    cells, _ = white_box(baseline, bundle, cfg)
    cells = {c: cells.get(c) for c in TABLE2_COLUMNS}
    prov = {"seed": baseline.config.seed}
    if gan_grid_cfg is not None:
        cells["gan-grid"], extra = gan_grid(baseline, gan_grid_cfg, n_samples)
        prov.update(extra)
    return ScenarioReport("white-box", cells, prov, model="no AT")


def _fmt(v) -> str:
    return "N/A" if v is None else format(v, ".4f")


def table2_csv(reports: list[ScenarioReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "scenario", *TABLE2_COLUMNS, "mean"])
    for r in reports:
        w.writerow([r.model, r.scenario, *[_fmt(r.cells.get(c)) for c in TABLE2_COLUMNS], _fmt(r.mean())])
    return buf.getvalue()


def table2_text(reports: list[ScenarioReport]) -> str:
    head = f"{'Model':<8}{'Scenario':<12}" + "".join(f"{c.upper():>10}" for c in TABLE2_COLUMNS)
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(f"{r.model:<8}{r.scenario:<12}"
                     + "".join(f"{_fmt(r.cells.get(c)):>10}" for c in TABLE2_COLUMNS))
    return "\n".join(lines) + "\n"


def table3_csv(rows: list[ClassReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "stable_accuracy", "unstable_accuracy", "both_accuracy", "both_f1",
                "mean_class_accuracy", "auc"])
    for r in rows:
        w.writerow([r.label, _fmt(r.stable), _fmt(r.unstable), _fmt(r.both.accuracy),
                    _fmt(r.both.f1), _fmt(r.mean_class_accuracy), _fmt(r.auc)])
    return buf.getvalue()


def table3_text(rows: list[ClassReport]) -> str:
    lines = [f"{'Class':<16}" + "".join(f"{r.label:>18}" for r in rows)]
    lines.append("-" * len(lines[0]))
    lines.append(f"{'Stable':<16}" + "".join(f"{_fmt(r.stable):>18}" for r in rows))
    lines.append(f"{'Unstable':<16}" + "".join(f"{_fmt(r.unstable):>18}" for r in rows))
    lines.append(f"{'Both (acc/F1)':<16}" + "".join(
        f"{_fmt(r.both.accuracy) + ' / ' + _fmt(r.both.f1):>18}" for r in rows))
    return "\n".join(lines) + "\n"


def roc_csv(rows: list[ClassReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "threshold", "tpr", "fpr"])
    for r in rows:
        for p in r.roc_points:
            w.writerow([r.label, format(p.threshold, ".17g"), format(p.tpr, ".17g"), format(p.fpr, ".17g")])
    return buf.getvalue()


@dataclass
class TimingReport:
    epoch_s_no_at: tuple[float, float]
    epoch_s_at: tuple[float, float]
    inference_ms: tuple[float, float]
    repetitions: int

    def text(self) -> str:
        f = lambda t, u: f"{t[0]:.4f} +/- {t[1]:.4f} {u}"
        return (f"training epoch, no AT : {f(self.epoch_s_no_at, 's')}\n"
                f"training epoch, AT    : {f(self.epoch_s_at, 's')}\n"
                f"one-batch inference   : {f(self.inference_ms, 'ms')}\n"
                f"repetitions           : {self.repetitions}\n")


def bench_timing(stable_rows: np.ndarray, cfg: TrainConfig, repetitions: int = 10,
                 inference_batch: int = 4) -> TimingReport:
    """Mean and stddev of one-epoch wall time with/without the adversarial
    layer on identical data and seed, and of one-batch inference latency."""
    def epochs(adv: bool) -> np.ndarray:
        c = TrainConfig.from_dict({**cfg.to_dict(), "epochs": repetitions + 1, "adversarial_layer": adv})
        _, rep = train(stable_rows, c)
        return rep.column("wall_time_s")[1:]  # first epoch is warm-up

    no_at, at = epochs(False), epochs(True)
    model = GanModel.fresh(cfg)
    x = stable_rows[:inference_batch]
    model.score(x)
    lat = []
    for _ in range(max(repetitions, 10)):
        t0 = time.perf_counter()
        model.score(x)
        lat.append((time.perf_counter() - t0) * 1e3)
    ms = lambda a: (float(np.mean(a)), float(np.std(a)))
    return TimingReport(ms(no_at), ms(at), ms(lat), repetitions)


def write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
