"""Grid-stability table handling: CSV ingest, consumer-permutation
augmentation, z-score normalization, stable-only splitting and windowing."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FEATURE_NAMES = (
    "tau1", "tau2", "tau3", "tau4",
    "p1", "p2", "p3", "p4",
    "g1", "g2", "g3", "g4",
)
N_FEATURES = len(FEATURE_NAMES)

# label codes follow the discriminator's target: 1 = real/stable
STABLE = 1
UNSTABLE = 0
LABEL_NAMES = {STABLE: "stable", UNSTABLE: "unstable"}

# p1 = -(p2 + p3 + p4) in the source table; checked loosely, warning only
PRODUCER_BALANCE_TOL = 1e-6


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple = FEATURE_NAMES
    stab: np.ndarray | None = None
    row_ids: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.features.ndim != 2:
            raise ValueError("features must be 2-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels")
        if self.row_ids is None:
            self.row_ids = np.arange(len(self.labels))
        self.row_ids = np.asarray(self.row_ids, dtype=np.int64)
        if self.stab is not None:
            self.stab = np.asarray(self.stab, dtype=np.float64)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_stable(self) -> int:
        return int(np.sum(self.labels == STABLE))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], self.feature_names,
                       None if self.stab is None else self.stab[idx], self.row_ids[idx])

    def with_features(self, features: np.ndarray) -> "Dataset":
        return Dataset(features, self.labels.copy(), self.feature_names,
                       None if self.stab is None else self.stab.copy(), self.row_ids.copy())


def concat(parts) -> Dataset:
    parts = list(parts)
    stab = None
    if all(p.stab is not None for p in parts):
        stab = np.concatenate([p.stab for p in parts])
    return Dataset(np.concatenate([p.features for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   parts[0].feature_names, stab,
                   np.concatenate([p.row_ids for p in parts]))


def _parse_label(raw: str, row: int) -> int:
    v = raw.strip().lower()
    if v == "stable":
        return STABLE
    if v == "unstable":
        return UNSTABLE
    raise ParseError(f"row {row}: unknown stabf label {raw!r}", row)


def load_csv(path, check_balance: bool = True) -> Dataset:
    """Read a grid-stability CSV; columns are matched by header name.

    A ``row_id`` column, if present, is kept as provenance.  Data rows are
    numbered from 1 in error messages.  Pass ``check_balance=False`` for
    normalized files, where the producer/consumer balance does not hold.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        missing = [c for c in (*FEATURE_NAMES, "stab", "stabf") if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        cols = [header.index(c) for c in FEATURE_NAMES]
        i_stab, i_stabf = header.index("stab"), header.index("stabf")
        i_id = header.index("row_id") if "row_id" in header else None
        feats, stab, labels, ids = [], [], [], []
        for r, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"{path}: row {r}: expected {len(header)} cells, got {len(rec)}", r)
            try:
                feats.append([float(rec[c]) for c in cols])
                stab.append(float(rec[i_stab]))
                if i_id is not None:
                    ids.append(int(rec[i_id]))
            except ValueError as exc:
                raise ParseError(f"{path}: row {r}: non-numeric cell ({exc})", r) from None
            labels.append(_parse_label(rec[i_stabf], r))
    feats = np.array(feats, dtype=np.float64).reshape(-1, N_FEATURES)
    stab = np.array(stab)
    labels = np.array(labels, dtype=np.int8)
    if not np.all(np.isfinite(feats)):
        bad = int(np.argwhere(~np.isfinite(feats))[0, 0]) + 1
        raise ParseError(f"{path}: row {bad}: non-finite value", bad)
    inconsistent = np.flatnonzero((stab < 0) != (labels == STABLE))
    if inconsistent.size:
        r = int(inconsistent[0]) + 1
        raise SchemaError(f"{path}: row {r}: stabf disagrees with sign of stab "
                          f"({inconsistent.size} rows in total)")
    ds = Dataset(feats, labels, FEATURE_NAMES, stab, np.array(ids) if i_id is not None else None)
    if check_balance:
        check_producer_balance(ds)
    return ds


def check_producer_balance(d: Dataset, tol: float = PRODUCER_BALANCE_TOL) -> int:
    """Warn when p1 != -(p2+p3+p4); returns the number of offending rows."""
    p = d.features[:, 4:8]
    off = np.abs(p[:, 0] + p[:, 1:].sum(axis=1))
    n_bad = int(np.sum(off > tol))
    if n_bad:
        warnings.warn(f"{n_bad} rows violate producer balance (max |p1+p2+p3+p4| = {off.max():.3g})",
                      stacklevel=2)
    return n_bad


def write_csv(d: Dataset, path, with_row_id: bool = True) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stab = d.stab if d.stab is not None else np.where(d.labels == STABLE, -1.0, 1.0)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["row_id"] if with_row_id else []) + list(d.feature_names) + ["stab", "stabf"])
        for i in range(len(d)):
            row = [repr(float(v)) for v in d.features[i]] + [repr(float(stab[i])), LABEL_NAMES[int(d.labels[i])]]
            w.writerow(([str(int(d.row_ids[i]))] if with_row_id else []) + row)


CONSUMER_PERMUTATIONS = tuple(itertools.permutations((1, 2, 3)))


def augment_sixfold(d: Dataset) -> Dataset:
    """Emit every row under all 3! orderings of the consumer nodes 2-4.

    The same permutation is applied to tau, p and g; node 1 is untouched.
    Output rows of one source row are consecutive, identity permutation first.
    """
    n = len(d)
    out = np.empty((6 * n, N_FEATURES))
    for k, perm in enumerate(CONSUMER_PERMUTATIONS):
        cols = []
        for base in (0, 4, 8):
            cols += [base] + [base + j for j in perm]
        out[k::6] = d.features[:, cols]
    stab = None if d.stab is None else np.repeat(d.stab, 6)
    return Dataset(out, np.repeat(d.labels, 6), d.feature_names, stab, np.arange(6 * n))


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    feature_names: tuple = FEATURE_NAMES
    seed: int | None = None
    degenerate: tuple = field(default=())

    def to_dict(self) -> dict:
        return {"feature_names": list(self.feature_names), "mean": [float(v) for v in self.mean],
                "std": [float(v) for v in self.std], "seed": self.seed,
                "degenerate": list(self.degenerate)}

    @classmethod
    def from_dict(cls, doc: dict) -> "NormStats":
        return cls(np.array(doc["mean"], dtype=np.float64), np.array(doc["std"], dtype=np.float64),
                   tuple(doc["feature_names"]), doc.get("seed"), tuple(doc.get("degenerate", ())))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


def zscore_fit(train: Dataset, seed: int | None = None) -> NormStats:
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    degenerate = tuple(train.feature_names[i] for i in np.flatnonzero(std == 0))
    if degenerate:
        warnings.warn(f"zero-variance feature(s) {degenerate}; std set to 1", stacklevel=2)
        std = np.where(std == 0, 1.0, std)
    return NormStats(mean, std, tuple(train.feature_names), seed, degenerate)


def zscore_apply(d: Dataset, s: NormStats) -> Dataset:
    return d.with_features(s.apply(d.features))


def zscore_inverse(d: Dataset, s: NormStats) -> Dataset:
    return d.with_features(s.inverse(d.features))


def write_norm_stats(s: NormStats, path) -> None:
    Path(path).write_text(json.dumps(s.to_dict(), indent=2) + "\n", encoding="utf-8")


def read_norm_stats(path) -> NormStats:
    return NormStats.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class SplitBundle:
    train_stable: Dataset
    test_stable: Dataset
    test_unstable: Dataset

    def test_rows(self) -> Dataset:
        """Stable and unstable test rows merged back into source order."""
        both = concat([self.test_stable, self.test_unstable])
        return both.subset(np.argsort(both.row_ids, kind="stable"))

    def everything(self) -> Dataset:
        allrows = concat([self.train_stable, self.test_stable, self.test_unstable])
        return allrows.subset(np.argsort(allrows.row_ids, kind="stable"))


def split_stable_only(d: Dataset, train_frac: float = 0.90, seed: int = 0) -> SplitBundle:
    """Shuffle stable rows and split them; every unstable row goes to test."""
    stable_idx = np.flatnonzero(d.labels == STABLE)
    if stable_idx.size == 0:
        raise ValueError("dataset has no stable rows")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(stable_idx)
    n_train = int(round(train_frac * stable_idx.size))
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    unstable_idx = np.flatnonzero(d.labels == UNSTABLE)
    return SplitBundle(d.subset(train_idx), d.subset(test_idx), d.subset(unstable_idx))


@dataclass(frozen=True)
class WindowConfig:
    window_size: int = 16
    step: int | None = None

    def __post_init__(self):
        if self.step is None:
            object.__setattr__(self, "step", max(1, self.window_size // 2))
        if self.window_size < 1 or not 1 <= self.step <= self.window_size:
            raise ValueError(f"invalid window config {self}")


def window_starts(n: int, cfg: WindowConfig) -> np.ndarray:
    if n < cfg.window_size:
        raise ValueError(f"{n} rows is fewer than window size {cfg.window_size}")
    return np.arange(0, n - cfg.window_size + 1, cfg.step)


def window_label(labels: np.ndarray) -> int:
    # strict majority for stable; ties count as unstable
    return STABLE if 2 * int(np.sum(labels == STABLE)) > len(labels) else UNSTABLE


def make_windows(d: Dataset, cfg: WindowConfig = WindowConfig()) -> list[tuple[np.ndarray, int]]:
    out = []
    for s in window_starts(len(d), cfg):
        sl = slice(s, s + cfg.window_size)
        out.append((d.features[sl], window_label(d.labels[sl])))
    return out
