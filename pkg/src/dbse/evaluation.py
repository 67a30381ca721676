"""Evaluation battery: judges, leakage gaps, swaps, generation metrics, EER, embedding export.

The protocols only need four things from a model: ``codes(x)``,
``decode(s, d)``, ``sample_dynamics(n, rng)`` and ``config.s_dim``. That
keeps them usable with hand-built oracle models in tests.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.neural_network import MLPClassifier

from . import metrics
from .synthdata import DataError, SequenceDataset, split

REPORT_FIELDS = ("protocol", "metric", "value", "seed", "config_digest")


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    protocol: str
    metrics: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    config_digest: str = ""

    def __post_init__(self):
        for k, v in self.metrics.items():
            if not np.isfinite(v):
                raise EvalError(f"{self.protocol}: metric {k} is not finite ({v})")

    def rows(self) -> list[list]:
        return [[self.protocol, k, repr(float(v)), self.seed, self.config_digest] for k, v in self.metrics.items()]


def write_reports(reports: list[EvalReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in reports:
            w.writerows(r.rows())


def read_reports(path) -> list[EvalReport]:
    out: dict[str, EvalReport] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rep = out.setdefault(row["protocol"], EvalReport(row["protocol"], {}, int(row["seed"]), row["config_digest"]))
            rep.metrics[row["metric"]] = float(row["value"])
    return list(out.values())


# -- classifiers ------------------------------------------------------------------------

class Judge:
    """Two-hidden-layer MLP over flattened inputs, standardised with train-set statistics."""

    def __init__(self, hidden: int = 64, max_iter: int = 300, seed: int = 0):
        self.hidden, self.max_iter, self.seed = hidden, max_iter, seed
        self.test_accuracy: float | None = None
        self.n_classes = 0

    def _prep(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return ((x.reshape(len(x), -1) - self._mu) / self._sd)

    def fit(self, x, y) -> "Judge":
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        y = np.asarray(y)
        classes = np.unique(y)
        if len(classes) < 2:
            raise EvalError("judge needs at least two classes in the training labels")
        self.n_classes = int(y.max()) + 1
        self._mu = x.mean(axis=0)
        self._sd = x.std(axis=0) + 1e-8
        self.clf = MLPClassifier((self.hidden, self.hidden), max_iter=self.max_iter, random_state=self.seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            self.clf.fit(self._prep(x), y)
        return self

    def predict_proba(self, x) -> np.ndarray:
        """Probabilities over ``range(n_classes)`` (classes unseen in training get 0)."""
        p = self.clf.predict_proba(self._prep(x))
        full = np.zeros((len(p), self.n_classes))
        full[:, self.clf.classes_] = p
        return full

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)

    def score(self, x, y) -> float:
        return metrics.accuracy(self.predict(x), np.asarray(y))


def _labels(ds: SequenceDataset, kind: str) -> np.ndarray:
    lab = ds.static_labels if kind == "static" else ds.dynamic_labels
    if lab is None:
        raise EvalError(f"dataset has no {kind} labels")
    return lab


def train_judge(train: SequenceDataset, test: SequenceDataset, kind: str, hidden: int = 64,
                max_iter: int = 300, seed: int = 0) -> Judge:
    """Judge for ``kind`` in {static, dynamic} on raw sequences; records test accuracy."""
    train.require_nonempty("judge training set")
    judge = Judge(hidden, max_iter, seed).fit(train.values, _labels(train, kind))
    if len(test):
        judge.test_accuracy = judge.score(test.values, _labels(test, kind))
    return judge


@dataclass
class Judges:
    static: Judge
    dynamic: Judge


def train_judges(train: SequenceDataset, test: SequenceDataset, hidden=64, max_iter=300, seed=0) -> Judges:
    return Judges(train_judge(train, test, "static", hidden, max_iter, seed),
                  train_judge(train, test, "dynamic", hidden, max_iter, seed))


# -- protocols --------------------------------------------------------------------------

def _check_model(model):
    if getattr(model, "epochs_trained", 1) == 0:
        raise EvalError("model has not been trained (epoch counter is 0)")


def leakage_generation(model, judges: Judges, test: SequenceDataset, mode: str, seed: int = 0,
                       config_digest: str = "") -> EvalReport:
    """Swap one factor for a prior draw, decode, and let the judges label the result.

    ``resample_static``: dec(s_bar, d) with s_bar ~ N(0, I); the dynamic label should survive.
    ``resample_dynamic``: dec(s, d_hat) with d_hat from the learned prior; the static label should survive.
    """
    _check_model(model)
    test.require_nonempty("test set")
    ys, yd = _labels(test, "static"), _labels(test, "dynamic")
    rng = np.random.default_rng([seed, 0x6E4])
    s, d = model.codes(test.values)
    if mode == "resample_static":
        x_gen = model.decode(rng.standard_normal(s.shape), d)
    elif mode == "resample_dynamic":
        x_gen = model.decode(s, model.sample_dynamics(len(s), rng))
    else:
        raise EvalError(f"unknown generation mode {mode!r}")
    acc_s = metrics.accuracy(judges.static.predict(x_gen), ys)
    acc_d = metrics.accuracy(judges.dynamic.predict(x_gen), yd)
    gap = acc_d - acc_s if mode == "resample_static" else acc_s - acc_d
    vals = {"static_acc": acc_s, "dynamic_acc": acc_d, "leakage_gap": gap,
            "chance_static": 1.0 / judges.static.n_classes, "chance_dynamic": 1.0 / judges.dynamic.n_classes}
    return EvalReport(f"leakage-gen/{mode}", vals, seed, config_digest)


def generation_metrics(model, judges: Judges, test: SequenceDataset, seed: int = 0, config_digest: str = "") -> EvalReport:
    """Acc / IS / H(y|x) / H(y) of the dynamic judge on sequences decoded with a fresh static code."""
    _check_model(model)
    test.require_nonempty("test set")
    rng = np.random.default_rng([seed, 0x6E4])
    s, d = model.codes(test.values)
    x_gen = model.decode(rng.standard_normal(s.shape), d)
    p = judges.dynamic.predict_proba(x_gen)
    h_cond, h_marg = metrics.entropy_metrics(p)
    vals = {"acc": metrics.accuracy(np.argmax(p, 1), _labels(test, "dynamic")), "is": metrics.inception_score(p),
            "h_y_given_x": h_cond, "h_y": h_marg}
    return EvalReport("metrics", vals, seed, config_digest)


CODE_MODES = ("mean", "sample")


def latent_codes(model, ds: SequenceDataset, mode: str = "mean", seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Static codes and time-averaged dynamic codes ``sum_t d_t / T``.

    ``mode="mean"`` uses posterior means. ``mode="sample"`` takes one seeded
    posterior draw per sequence, so a probe only sees what the code carries
    above its own posterior noise.
    """
    if mode == "mean":
        s, d = model.codes(ds.values)
    elif mode == "sample":
        s, d = model.sample_codes(ds.values, np.random.default_rng([seed, 0xC0DE]))
    else:
        raise EvalError(f"unknown code mode {mode!r}")
    return s, d.sum(axis=1) / d.shape[1]


def leakage_latent(model, ds: SequenceDataset, seed: int = 0, hidden: int = 64, max_iter: int = 300,
                   config_digest: str = "", codes: str = "mean") -> EvalReport:
    """Four probes (static/dynamic label from s / pooled d) on an 80-20 split of the codes."""
    _check_model(model)
    ds.require_nonempty()
    s, dp = latent_codes(model, ds, codes, seed)
    ys, yd = _labels(ds, "static"), _labels(ds, "dynamic")
    # split row indices, stratified on both labels
    idx = SequenceDataset(np.arange(len(ds), dtype=np.float64).reshape(-1, 1, 1), ys, yd)
    tr, te = split(idx, (0.8, 0.2), seed)
    a = tr.values[:, 0, 0].astype(int)
    b = te.values[:, 0, 0].astype(int)
    if len(b) == 0:
        raise EvalError("latent protocol needs a non-empty test split")

    def probe(x, y):
        return Judge(hidden, max_iter, seed).fit(x[a], y[a]).score(x[b], y[b])

    vals = {
        "static_from_s": probe(s, ys),
        "dynamic_from_s": probe(s, yd),
        "static_from_d": probe(dp, ys),
        "dynamic_from_d": probe(dp, yd),
    }
    vals["static_gap"] = vals["static_from_s"] - vals["dynamic_from_s"]
    vals["dynamic_gap"] = vals["dynamic_from_d"] - vals["static_from_d"]
    vals["chance_static"] = 1.0 / (int(ys.max()) + 1)
    vals["chance_dynamic"] = 1.0 / (int(yd.max()) + 1)
    return EvalReport("leakage-latent", vals, seed, config_digest)


def swap(model, x1, x2) -> tuple[np.ndarray, np.ndarray]:
    """``(dec(s1, d2), dec(s2, d1))`` in deterministic evaluation mode."""
    x1, x2 = np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise EvalError(f"swap: shapes {x1.shape} and {x2.shape} differ")
    s1, d1 = model.codes(x1)
    s2, d2 = model.codes(x2)
    return model.decode(s1, d2), model.decode(s2, d1)


def swap_pairs(n_items: int, n_pairs: int, seed: int) -> np.ndarray:
    if n_items < 2:
        raise EvalError("swap needs at least two sequences")
    rng = np.random.default_rng([seed, 0x5A9])
    i = rng.integers(0, n_items, n_pairs)
    j = (i + rng.integers(1, n_items, n_pairs)) % n_items
    return np.stack([i, j], axis=1)


def swap_fidelity(model, judges: Judges, test: SequenceDataset, n_pairs: int = 200, seed: int = 0,
                  config_digest: str = "") -> tuple[EvalReport, dict]:
    """Judge ``dec(s1, d2)``: its static label should be x1's, its dynamic label x2's."""
    _check_model(model)
    pairs = swap_pairs(len(test), n_pairs, seed)
    x1, x2 = test.values[pairs[:, 0]], test.values[pairs[:, 1]]
    xb1, xb2 = swap(model, x1, x2)
    ys, yd = _labels(test, "static"), _labels(test, "dynamic")
    vals = {
        "static_match": metrics.accuracy(judges.static.predict(xb1), ys[pairs[:, 0]]),
        "dynamic_match": metrics.accuracy(judges.dynamic.predict(xb1), yd[pairs[:, 1]]),
    }
    return EvalReport("swap", vals, seed, config_digest), {"pairs": pairs, "x1": x1, "x2": x2, "swap1": xb1, "swap2": xb2}


def verification_pairs(labels: np.ndarray, n_pairs: int, seed: int) -> np.ndarray:
    """Half same-label and half different-label index pairs."""
    rng = np.random.default_rng([seed, 0xEE2])
    labels = np.asarray(labels)
    by_class = {c: np.flatnonzero(labels == c) for c in np.unique(labels)}
    multi = [c for c, ix in by_class.items() if len(ix) >= 2]
    if not multi or len(by_class) < 2:
        raise EvalError("verification needs two classes and a class with two members")
    pairs = []
    for k in range(n_pairs):
        if k % 2 == 0:
            ix = by_class[multi[rng.integers(len(multi))]]
            a, b = rng.choice(ix, 2, replace=False)
        else:
            while True:
                a, b = rng.integers(0, len(labels), 2)
                if labels[a] != labels[b]:
                    break
        pairs.append((a, b))
    return np.array(pairs)


def eer_protocol(model, ds: SequenceDataset, n_pairs: int = 2000, seed: int = 0, config_digest: str = "",
                 codes: str = "mean") -> EvalReport:
    """Static-label verification by cosine similarity of s (want low EER) and of pooled d (want high)."""
    _check_model(model)
    ys = _labels(ds, "static")
    s, dp = latent_codes(model, ds, codes, seed)
    pairs = verification_pairs(ys, n_pairs, seed)
    same = ys[pairs[:, 0]] == ys[pairs[:, 1]]
    e_s = metrics.eer(metrics.cosine_similarity(s[pairs[:, 0]], s[pairs[:, 1]]), same)
    e_d = metrics.eer(metrics.cosine_similarity(dp[pairs[:, 0]], dp[pairs[:, 1]]), same)
    return EvalReport("eer", {"static_eer": e_s, "dynamic_eer": e_d, "gap": e_d - e_s}, seed, config_digest)


def export_embeddings(model, ds: SequenceDataset, path) -> int:
    """CSV ``id, static_label, dynamic_label, s0.., d0..`` with d time-averaged. Returns the row count."""
    try:
        ds.require_nonempty()
    except DataError as exc:
        raise EvalError(str(exc)) from None
    s, dp = latent_codes(model, ds)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "static_label", "dynamic_label"] + [f"s{k}" for k in range(s.shape[1])]
                   + [f"d{k}" for k in range(dp.shape[1])])
        for j in range(len(ds)):
            sl = "" if ds.static_labels is None else int(ds.static_labels[j])
            dl = "" if ds.dynamic_labels is None else int(ds.dynamic_labels[j])
            w.writerow([j, sl, dl] + [repr(float(v)) for v in s[j]] + [repr(float(v)) for v in dp[j]])
    return len(ds)
