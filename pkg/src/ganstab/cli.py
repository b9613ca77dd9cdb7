"""Command line: prepare -> train -> surrogate -> attack -> evaluate -> bench.

Configuration is one JSON document; any key can be overridden with a flag of
the same dotted name (``--train.learning_rate 1e-3``).  Exit codes: 0 ok,
2 usage/config/input problems, 3 numeric failure, 4 internal invariant.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import attacks as atk
from . import evaluation as ev
from . import surrogate as sg
from .checkpoint import CheckpointError
from .data import (
    ParseError, SchemaError, SplitBundle, augment_sixfold, load_csv,
    read_norm_stats, split_stable_only, write_csv, write_norm_stats, zscore_apply, zscore_fit,
)
from .gan import TrainConfig, TrainingError, load_checkpoint, save_checkpoint, train

log = logging.getLogger("ganstab")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_INTERNAL = 0, 2, 3, 4
ORIGINAL_ROWS = 10_000
MODEL_FILES = {"at": "gan_at.json", "no-at": "gan_noat.json"}
MODEL_LABELS = {"at": "GAN-Stability (AT)", "no-at": "GAN-Stability (no AT)"}


class UsageError(Exception):
    pass


class InvariantError(Exception):
    pass


def default_config() -> dict:
    return {
        "seed": 0,
        "out": "runs/default",
        "data": {"dataset": None, "augment": "auto", "train_frac": 0.9, "subsample": None},
        "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
        "attack": {"epsilon": 0.05, "alpha": None, "iterations": 10, "noise_sigma": None},
        "surrogate": {k: v for k, v in sg.SurrogateConfig().to_dict().items() if k != "seed"},
        "gan_grid": {k: v for k, v in atk.GanGridConfig().to_dict().items() if k != "seed"},
        "gan_grid_samples": 2000,
        "attacks": list(atk.ALL_ATTACKS),
        "scenarios": list(ev.SCENARIOS),
        "bench": {"repetitions": 10, "rows": 2000},
        "quick": False,
    }


QUICK = {"train.epochs": 10, "data.subsample": 2000, "surrogate.epochs": 5,
         "gan_grid.episodes": 100, "bench.repetitions": 3, "bench.rows": 400, "quick": True}


def _set(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = doc
    for k in keys[:-1]:
        if not isinstance(cur.get(k), dict):
            raise UsageError(f"unknown config key {dotted!r}")
        cur = cur[k]
    if keys[-1] not in cur:
        raise UsageError(f"unknown config key {dotted!r}")
    cur[keys[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _merge(base: dict, upd: dict, prefix="") -> None:
    for k, v in upd.items():
        if k not in base:
            raise UsageError(f"unknown config key {prefix + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, prefix + k + ".")
        else:
            base[k] = v


def build_config(args: argparse.Namespace, overrides: list[str]) -> dict:
    cfg = default_config()
    if args.config:
        try:
            _merge(cfg, json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if args.quick or cfg.get("quick"):
        for k, v in QUICK.items():
            _set(cfg, k, v)
    if len(overrides) % 2:
        raise UsageError(f"override {overrides[-1]!r} needs a value")
    for flag, val in zip(overrides[::2], overrides[1::2]):
        if not flag.startswith("--"):
            raise UsageError(f"unexpected argument {flag!r}")
        _set(cfg, flag[2:], _parse_value(val))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    if getattr(args, "dataset", None):
        cfg["data"]["dataset"] = args.dataset
    if args.attack:
        names = [a.strip() for a in args.attack.split(",") if a.strip()]
        bad = [a for a in names if a not in atk.ALL_ATTACKS]
        if bad:
            raise UsageError(f"unknown attack {', '.join(bad)}; valid: {', '.join(atk.ALL_ATTACKS)}")
        cfg["attacks"] = names
    if args.scenario:
        cfg["scenarios"] = [args.scenario]
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    try:
        train_config(cfg, True)
        attack_config(cfg)
        surrogate_config(cfg)
        gan_grid_config(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    for s in cfg["scenarios"]:
        if s not in ev.SCENARIOS:
            raise UsageError(f"unknown scenario {s!r}; valid: {', '.join(ev.SCENARIOS)}")


# config sections that shape each stage's artifacts
STAGE_SECTIONS = {
    "prepare": ("seed", "data"),
    "train": ("seed", "data", "train"),
    "surrogate": ("seed", "data", "surrogate"),
    "attack": ("seed", "data", "train", "surrogate", "attack", "gan_grid", "gan_grid_samples"),
}


def config_hash(cfg: dict, stage: str = "attack") -> str:
    """Hash of the settings that shape ``stage``.

    Paths, attack/scenario selections and the AT flag are excluded; the
    prepared provenance records the input file's digest instead of its path.
    """
    doc = {k: copy.deepcopy(cfg[k]) for k in STAGE_SECTIONS[stage]}
    if "train" in doc:
        doc["train"].pop("adversarial_layer", None)
    doc["data"].pop("dataset", None)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def train_config(cfg: dict, adversarial: bool) -> TrainConfig:
    return TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"], "adversarial_layer": adversarial})


def attack_config(cfg: dict) -> atk.AttackConfig:
    return atk.AttackConfig(**cfg["attack"], seed=cfg["seed"])


def surrogate_config(cfg: dict) -> sg.SurrogateConfig:
    return sg.SurrogateConfig.from_dict({**cfg["surrogate"], "seed": cfg["seed"]})


def gan_grid_config(cfg: dict) -> atk.GanGridConfig:
    return atk.GanGridConfig(**cfg["gan_grid"], seed=cfg["seed"])


# --- artifact plumbing -----------------------------------------------------

class Run:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.hash = config_hash(cfg)
        self.produced: list[str] = []
        self.started = time.time()

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, p: Path) -> None:
        self.produced.append(str(p.relative_to(self.out)))

    def provenance(self, stage: str = "attack") -> dict:
        return {"seed": self.cfg["seed"], "config_hash": config_hash(self.cfg, stage),
                "stage": stage, "quick": bool(self.cfg["quick"])}

    def write_manifest(self, command: str) -> None:
        path = self.path("manifest.json")
        prior = {}
        if path.exists():
            try:
                prior = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                prior = {}
        artifacts = sorted(set(prior.get("artifacts", [])) | set(self.produced) | {"manifest.json"})
        doc = {
            "config_hash": self.hash,
            "seed": self.cfg["seed"],
            "code_version": _code_version(),
            "commands": prior.get("commands", []) + [{
                "command": command,
                "config_hash": self.hash,
                "started": _iso(self.started),
                "finished": _iso(time.time()),
            }],
            "config": self.cfg,
            "artifacts": artifacts,
        }
        tmp = path.with_name("manifest.json.tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)


def _iso(t: float) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(run: Run, *rel: str, hint: str) -> None:
    missing = [r for r in rel if not (run.out / r).exists()]
    if missing:
        raise UsageError(f"missing inputs {', '.join(missing)}; run `{hint}` first")


def _check_hash(run: Run, where: str, prov: dict) -> None:
    stage = prov.get("stage", "attack")
    want = config_hash(run.cfg, stage) if stage in STAGE_SECTIONS else None
    if prov.get("config_hash") != want:
        raise UsageError(f"{where} was produced with config hash {prov.get('config_hash')}, "
                         f"current settings give {want}; refusing to mix inputs")


def load_bundle(run: Run) -> tuple[SplitBundle, object]:
    _require(run, "prepared/train_stable.csv", "prepared/norm_stats.json", hint="ganstab prepare")
    prov = json.loads((run.out / "prepared/provenance.json").read_text(encoding="utf-8"))
    _check_hash(run, "prepared data", prov)
    parts = [load_csv(run.out / "prepared" / f"{n}.csv", check_balance=False)
             for n in ("train_stable", "test_stable", "test_unstable")]
    return SplitBundle(*parts), read_norm_stats(run.out / "prepared/norm_stats.json")


def load_model(run: Run, tag: str):
    rel = f"models/{MODEL_FILES[tag]}"
    _require(run, rel, hint="ganstab train" + (" --no-adversarial-layer" if tag == "no-at" else ""))
    m = load_checkpoint(run.out / rel)
    _check_hash(run, rel, m.provenance)
    return m


def available_models(run: Run) -> list[str]:
    return [t for t in MODEL_FILES if (run.out / "models" / MODEL_FILES[t]).exists()]


# --- commands --------------------------------------------------------------

def cmd_prepare(run: Run) -> None:
    cfg = run.cfg
    src = cfg["data"]["dataset"]
    if not src:
        raise UsageError("no dataset given (use --dataset PATH or data.dataset in the config)")
    if not Path(src).exists():
        raise UsageError(f"dataset {src} does not exist")
    raw = load_csv(src)
    aug = cfg["data"]["augment"]
    if aug is True or (aug == "auto" and len(raw) == ORIGINAL_ROWS):
        raw = augment_sixfold(raw)
    sub = cfg["data"]["subsample"]
    if sub and sub < len(raw):
        idx = np.sort(np.random.default_rng(cfg["seed"]).choice(len(raw), sub, replace=False))
        raw = raw.subset(idx)
    bundle = split_stable_only(raw, cfg["data"]["train_frac"], cfg["seed"])
    ns = zscore_fit(bundle.train_stable, seed=cfg["seed"])
    for name, part in (("train_stable", bundle.train_stable), ("test_stable", bundle.test_stable),
                       ("test_unstable", bundle.test_unstable)):
        p = run.path("prepared", f"{name}.csv")
        write_csv(zscore_apply(part, ns), p)
        run.record(p)
    p = run.path("prepared", "full_raw.csv")
    write_csv(raw, p)
    run.record(p)
    p = run.path("prepared", "norm_stats.json")
    write_norm_stats(ns, p)
    run.record(p)
    p = run.path("prepared", "provenance.json")
    digest = hashlib.sha256(Path(src).read_bytes()).hexdigest()
    _write_json(p, {**run.provenance("prepare"), "source": Path(src).name, "source_sha256": digest,
                    "rows": len(raw), "stable": raw.n_stable,
                    "train_stable": len(bundle.train_stable)})
    run.record(p)
    log.info("prepared %d rows (%d stable, %d train)", len(raw), raw.n_stable, len(bundle.train_stable))


def cmd_train(run: Run, adversarial: bool) -> None:
    bundle, ns = load_bundle(run)
    tag = "at" if adversarial else "no-at"
    tc = train_config(run.cfg, adversarial)

    def progress(epoch, _m, rec):
        if epoch == 1 or epoch % 10 == 0 or epoch == tc.epochs:
            log.info("[%s] epoch %d/%d d_real %.4f d_fake %.4f g %.4f rep %.4f (%.1fs)", tag, epoch,
                     tc.epochs, rec.d_loss_real, rec.d_loss_fake, rec.g_loss, rec.repulsion_loss,
                     rec.wall_time_s)

    model, report = train(bundle.train_stable, tc, norm_stats=ns, on_epoch_end=progress)
    model.provenance.update(run.provenance("train"))
    p = run.path("models", MODEL_FILES[tag])
    save_checkpoint(model, p)
    run.record(p)
    p = run.path("reports", f"train_{tag}.csv")
    report.to_csv(p, include_time=False)
    run.record(p)
    p = run.path("reports", f"train_{tag}_timing.csv")
    report.to_csv(p, include_time=True)
    run.record(p)


def cmd_surrogate(run: Run) -> None:
    _require(run, "prepared/full_raw.csv", hint="ganstab prepare")
    full = load_csv(run.out / "prepared/full_raw.csv")
    model, rep = sg.train_surrogate(full, surrogate_config(run.cfg))
    p = run.path("models", "surrogate.json")
    sg.save_surrogate(model, p)
    run.record(p)
    p = run.path("reports", "surrogate.json")
    _write_json(p, {**run.provenance("surrogate"), "heldout_accuracy": rep.heldout_accuracy,
                    "train_windows": rep.train_windows, "heldout_windows": rep.heldout_windows,
                    "epoch_losses": rep.epoch_losses})
    run.record(p)
    log.info("surrogate held-out window accuracy %.4f", rep.heldout_accuracy)


def _export(run: Run, batch: atk.AdversarialBatch, rel: str, extra: dict) -> None:
    rep = atk.verify_budget(batch)
    if not rep.ok:
        raise InvariantError(f"{rel}: {len(rep.violations)} rows exceed the L-inf budget "
                             f"{rep.budget} (max {rep.max_linf})")
    p = run.path(rel)
    atk.export_batch(batch, p, {**run.provenance(), **extra,
                                "max_linf": rep.max_linf, "max_l2": float(rep.l2.max(initial=0.0))})
    run.record(p)
    run.record(p.with_suffix(".json"))


def cmd_attack(run: Run) -> None:
    bundle, ns = load_bundle(run)
    tags = available_models(run)
    if not tags:
        _require(run, f"models/{MODEL_FILES['at']}", hint="ganstab train")
    test = bundle.test_rows()
    acfg = attack_config(run.cfg)
    grad_attacks = [a for a in run.cfg["attacks"] if a in atk.GRADIENT_ATTACKS]
    surrogate = None
    for tag in tags:
        model = load_model(run, tag)
        for sc in run.cfg["scenarios"]:
            if sc == "white-box":
                for name in grad_attacks:
                    b = atk.run_gradient_attack(name, model, test.features, test.labels, acfg)
                    b.row_ids = test.row_ids
                    _export(run, b, f"attacks/{tag}/white-box/{name}.csv", {"target": tag})
            elif sc == "grey-box-1" and grad_attacks:
                if surrogate is None:
                    _require(run, "models/surrogate.json", hint="ganstab surrogate")
                    _check_hash(run, "surrogate", json.loads(
                        (run.out / "reports/surrogate.json").read_text(encoding="utf-8")))
                    surrogate = sg.load_surrogate(run.out / "models/surrogate.json")
                x, y, ids = sg.windows_of(test, surrogate.config.window)
                row_labels = dict(zip(test.row_ids.tolist(), test.labels.tolist()))
                for name in grad_attacks:
                    b = sg.transfer_attack(surrogate, name, acfg, x, y, ids, row_labels, ns)
                    _export(run, b, f"attacks/{tag}/grey-box-1/{name}.csv",
                            {"target": tag, "surrogate_fooling_rate": b.config["surrogate_fooling_rate"]})
            elif sc == "grey-box-2" and "gan-grid" in run.cfg["attacks"]:
                gcfg = gan_grid_config(run.cfg)

                def target(xq, model=model):
                    s = model.score(xq)
                    return ev.labels_from_scores(s), s

                oracle = atk.QueryOracle(target)
                res = atk.gan_grid_train(oracle, gcfg)
                xs = res.sample(run.cfg["gan_grid_samples"], seed=gcfg.seed)
                b = atk.AdversarialBatch(None, xs, np.zeros(len(xs), dtype=np.int8), "gan-grid",
                                         gcfg.to_dict())
                _export(run, b, f"attacks/{tag}/grey-box-2/gan-grid.csv",
                        {"target": tag, "queries": res.queries, "train_success": res.success_rate,
                         "best_episode": res.best_episode})
                log.info("[%s] gan-grid used %d queries", tag, res.queries)




def _table2_reports(run: Run, bundle: SplitBundle) -> list[ev.ScenarioReport]:
    reports = []
    for tag in ("at", "no-at"):
        if not (run.out / "models" / MODEL_FILES[tag]).exists():
            continue
        model = load_model(run, tag)
        for sc in ev.SCENARIOS:
            d = run.out / "attacks" / tag / sc
            files = sorted(d.glob("*.csv")) if d.is_dir() else []
            if not files:
                continue
            cells = {c: None for c in ev.TABLE2_COLUMNS}
            prov = {"seed": run.cfg["seed"], "config_hash": config_hash(run.cfg)}
            for f in files:
                batch, side = atk.import_batch(f)
                _check_hash(run, str(f.relative_to(run.out)), side)
                cells[batch.attack_name] = ev.detection_rate(model, batch.x_adv)
                if "queries" in side:
                    prov["queries"] = side["queries"]
            reports.append(ev.ScenarioReport(sc, cells, prov, model="AT" if tag == "at" else "no AT"))
    return reports


def cmd_evaluate(run: Run) -> dict:
    bundle, _ = load_bundle(run)
    tags = available_models(run)
    if not tags:
        raise UsageError("no trained model found; run `ganstab train` (and/or "
                         "`ganstab train --no-adversarial-layer`) first")
    rows = [ev.class_report("no AT" if t == "no-at" else "AT", load_model(run, t), bundle)
            for t in ("no-at", "at") if t in tags]
    reports = _table2_reports(run, bundle)
    if not reports:
        raise UsageError("no adversarial batches found; run `ganstab attack` first")
    outputs = {
        "table2.csv": ev.table2_csv(reports), "table2.txt": ev.table2_text(reports),
        "table3.csv": ev.table3_csv(rows), "table3.txt": ev.table3_text(rows),
        "roc.csv": ev.roc_csv(rows),
    }
    summary = {
        **run.provenance(),
        "table3": {r.label: {"stable": r.stable, "unstable": r.unstable, "accuracy": r.both.accuracy,
                             "f1": r.both.f1, "mean_class_accuracy": r.mean_class_accuracy, "auc": r.auc}
                   for r in rows},
        "table2": [{"model": r.model, "scenario": r.scenario, "cells": r.cells, "mean": r.mean(),
                    "provenance": r.provenance} for r in reports],
    }
    outputs["summary.json"] = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    for name, text in outputs.items():
        p = run.path("tables", name)
        ev.write_text(p, text)
        run.record(p)
    print(outputs["table3.txt"])
    print(outputs["table2.txt"])
    return summary


def cmd_bench(run: Run) -> ev.TimingReport:
    bundle, _ = load_bundle(run)
    rows = bundle.train_stable.features[: run.cfg["bench"]["rows"]]
    rep = ev.bench_timing(rows, train_config(run.cfg, True), run.cfg["bench"]["repetitions"])
    p = run.path("reports", "bench.txt")
    ev.write_text(p, rep.text())
    run.record(p)
    p = run.path("reports", "bench.json")
    _write_json(p, {**run.provenance(), **dataclasses.asdict(rep), "rows": len(rows)})
    run.record(p)
    print(rep.text(), end="")
    return rep


def cmd_reproduce(run: Run) -> None:
    stages = [
        ("prepare", lambda: cmd_prepare(run)),
        ("train (AT)", lambda: cmd_train(run, True)),
        ("train (no AT)", lambda: cmd_train(run, False)),
        ("surrogate", lambda: cmd_surrogate(run)),
        ("attack", lambda: cmd_attack(run)),
        ("evaluate", lambda: cmd_evaluate(run)),
        ("bench", lambda: cmd_bench(run)),
    ]
    for name, fn in stages:
        log.info("stage: %s", name)
        try:
            fn()
        except Exception as exc:
            exc.stage = name
            raise


# --- entry point ------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--epochs", type=int)
    common.add_argument("--dataset", help="raw dataset CSV (prepare/reproduce)")
    common.add_argument("--no-adversarial-layer", action="store_true",
                        help="train the baseline without the FGSM layer")
    common.add_argument("--attack", help="comma-separated: " + ",".join(atk.ALL_ATTACKS))
    common.add_argument("--scenario", help="one of " + ",".join(ev.SCENARIOS))
    common.add_argument("--quick", action="store_true", help="10 epochs on a 2k-row subsample (CI only)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="ganstab", description=__doc__.splitlines()[0], allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("prepare", "augment, split and normalize the raw CSV"),
                        ("train", "train a GAN-Stability model"),
                        ("surrogate", "train the recurrent surrogate (grey-box 1)"),
                        ("attack", "generate adversarial batches"),
                        ("evaluate", "write Table 2/3 and ROC files"),
                        ("bench", "time training epochs and inference"),
                        ("reproduce", "run every stage in order"),
                        ("config", "print the effective configuration")):
        sub.add_parser(name, parents=[common], help=help_, allow_abbrev=False)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("reproduce", "train")
                        else logging.WARNING, format="%(asctime)s %(message)s", stream=sys.stderr)
    stage = args.command
    try:
        cfg = build_config(args, extra)
        run = Run(cfg)
        if args.command == "config":
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return EXIT_OK
        if args.command == "prepare":
            cmd_prepare(run)
        elif args.command == "train":
            cmd_train(run, not args.no_adversarial_layer)
        elif args.command == "surrogate":
            cmd_surrogate(run)
        elif args.command == "attack":
            cmd_attack(run)
        elif args.command == "evaluate":
            cmd_evaluate(run)
        elif args.command == "bench":
            cmd_bench(run)
        elif args.command == "reproduce":
            cmd_reproduce(run)
        run.write_manifest(args.command)
        return EXIT_OK
    except Exception as exc:
        stage = getattr(exc, "stage", stage)
        code, kind = _classify(exc)
        if code is None:
            raise
        print(f"ganstab {stage}: {kind}: {exc}", file=sys.stderr)
        return code


def _classify(exc: Exception) -> tuple[int | None, str]:
    if isinstance(exc, (SchemaError, ParseError)):
        return EXIT_USAGE, "input error"
    if isinstance(exc, (UsageError, CheckpointError, FileNotFoundError)):
        return EXIT_USAGE, "usage error"
    if isinstance(exc, ValueError):
        return EXIT_USAGE, "invalid input"
    if isinstance(exc, (TrainingError, FloatingPointError)):
        return EXIT_NUMERIC, "numeric failure"
    if isinstance(exc, (InvariantError, AssertionError)):
        return EXIT_INTERNAL, "internal invariant violated"
    return None, ""


if __name__ == "__main__":
    sys.exit(main())
