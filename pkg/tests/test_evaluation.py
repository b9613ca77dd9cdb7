import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ganstab.attacks import AttackConfig, GanGridConfig
from ganstab.data import STABLE, UNSTABLE, split_stable_only, zscore_fit
from ganstab.evaluation import (
    ConfusionMatrix, ScenarioInputs, bench_timing, class_report, confusion, metrics, roc,
    run_scenarios, table2_csv, table2_text, table3_csv,
)
from ganstab.gan import DiscriminatorConfig, GanModel, GeneratorConfig, TrainConfig
from ganstab.standin import standin_dataset

SMALL = dict(generator=GeneratorConfig(8, (16,), 12), discriminator=DiscriminatorConfig(12, (16, 8)))


def _tally(t, p):
    # independent oracle: one row at a time
    tp = tn = fp = fn = 0
    for a, b in zip(t, p):
        if a == UNSTABLE and b == UNSTABLE:
            tp += 1
        elif a == STABLE and b == STABLE:
            tn += 1
        elif a == STABLE:
            fp += 1
        else:
            fn += 1
    return ConfusionMatrix(tp, tn, fp, fn)


def _pairwise_auc(s, y):
    pos = [a for a, l in zip(s, y) if l == UNSTABLE]
    neg = [a for a, l in zip(s, y) if l == STABLE]
    tot = 0.0
    for a in pos:
        for b in neg:
            tot += 1.0 if a > b else 0.5 if a == b else 0.0
    return tot / (len(pos) * len(neg))


def test_confusion_simple_cases():
    y = np.array([UNSTABLE] * 5 + [STABLE] * 5)
    assert confusion(y, y) == ConfusionMatrix(5, 5, 0, 0)
    cm = confusion(y, 1 - y)
    assert cm.tp == 0 and cm.tn == 0
    with pytest.raises(ValueError):
        confusion(y, y[:3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=200))
def test_confusion_matches_tally(pairs):
    t, p = map(np.array, zip(*pairs))
    cm = confusion(t, p)
    assert cm == _tally(t, p)
    assert cm.total == len(pairs)
    perm = np.random.default_rng(0).permutation(len(t))
    assert metrics(confusion(t[perm], p[perm])).accuracy == metrics(cm).accuracy


def test_metrics_values():
    m = metrics(ConfusionMatrix(1, 0, 0, 0))
    assert (m.accuracy, m.f1) == (1.0, 1.0)
    assert metrics(ConfusionMatrix(0, 3, 1, 2)).f1 == 0.0
    assert metrics(ConfusionMatrix(0, 3, 0, 0)).f1 == 0.0
    with pytest.raises(ValueError):
        metrics(ConfusionMatrix(0, 0, 0, 0))
    m = metrics(ConfusionMatrix(3, 4, 1, 2))
    assert m.accuracy == 0.7 and abs(m.f1 - 6 / 9) < 1e-15


def test_roc_perfect_and_chance():
    y = np.array([UNSTABLE] * 4 + [STABLE] * 6)
    s = np.where(y == UNSTABLE, 0.9, 0.1)
    assert roc(s, y)[1] == 1.0
    assert abs(roc(np.full(10, 0.3), y)[1] - 0.5) < 1e-12
    with pytest.raises(ValueError):
        roc(s, np.full(10, STABLE))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 1000), st.integers(0, 10_000), st.booleans())
def test_auc_matches_pairwise_oracle(n, seed, coarse):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0], y[1] = STABLE, UNSTABLE
    s = rng.random(n)
    if coarse:
        s = np.round(s, 1)  # many ties
    pts, auc = roc(s, y, 21)
    if n <= 300:
        assert abs(auc - _pairwise_auc(s, y)) < 1e-9
    thr = [p.threshold for p in pts]
    assert thr == sorted(thr)
    assert np.all(np.diff([p.tpr for p in pts]) <= 0)
    assert np.all(np.diff([p.fpr for p in pts]) <= 0)
    assert 0 <= auc <= 1


def test_auc_pairwise_at_1000_rows():
    rng = np.random.default_rng(11)
    y = rng.integers(0, 2, 1000)
    s = np.round(rng.random(1000), 2)
    assert abs(roc(s, y)[1] - _pairwise_auc(s, y)) < 1e-9


def _bundle(n=300, seed=0):
    d = standin_dataset(n, seed)
    ns = zscore_fit(d)
    return split_stable_only(d.with_features(ns.apply(d.features)), seed=seed)


def test_scenarios_structure_and_determinism():
    b = _bundle()
    model = GanModel.fresh(TrainConfig(seed=1, **SMALL))
    gg = GanGridConfig(latent_dim=4, episodes=5, batch_per_episode=8)
    inp = ScenarioInputs(b, model, attack_cfg=AttackConfig(seed=2), gan_grid_cfg=gg, gan_grid_samples=50)
    r1 = run_scenarios(inp, ("white-box", "grey-box-2"))
    r2 = run_scenarios(inp, ("white-box", "grey-box-2"))
    assert table2_csv(r1) == table2_csv(r2)
    assert r1[0].cells["gan-grid"] is None and r1[1].cells["fgsm"] is None
    assert "N/A" in table2_text(r1)
    assert all(0 <= v <= 1 for r in r1 for v in r.cells.values() if v is not None)
    assert r1[1].provenance["queries"] == 5 * 8 * 2
    with pytest.raises(ValueError):
        run_scenarios(inp, ("grey-box-1",))
    with pytest.raises(ValueError):
        run_scenarios(ScenarioInputs(b), ("white-box",))


def test_class_report_and_table3():
    b = _bundle()
    model = GanModel.fresh(TrainConfig(seed=1, **SMALL))
    r = class_report("no AT", model, b)
    assert abs(r.mean_class_accuracy - (r.stable + r.unstable) / 2) < 1e-15
    assert 0 <= r.both.accuracy <= 1 and r.auc is not None
    assert table3_csv([r]).startswith("model,stable_accuracy")


def test_bench_timing_shape():
    x = np.random.default_rng(0).normal(size=(40, 12))
    t = bench_timing(x, TrainConfig(**SMALL), repetitions=2)
    assert t.epoch_s_at[0] > 0 and t.epoch_s_no_at[0] > 0
    assert t.inference_ms[0] < 50
    assert "ms" in t.text()
