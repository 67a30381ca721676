"""Labelled synthetic sequences, CSV ingestion and train/test splitting.

Generator: for static class ``c_s`` and dynamic class ``c_d`` every channel is

    x_t[k] = a(c_s) * sin(2*pi*f(c_d)*t/T + phi_k(c_s)) + b(c_s) + noise,   t = 0..T-1

with ``a = 0.5 + 0.25*c_s``, ``b = -1 + 0.5*c_s`` and ``f = c_d + 1`` whole cycles
per sequence. The channel phases ``phi_k(c_s)`` are fixed, irregular per class.
Whole cycles keep every per-channel time average equal to ``b``.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .serialization import read_file, write_file

log = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_sequences: int = 2000
    T: int = 20
    d: int = 10
    n_static: int = 5
    n_dynamic: int = 4
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_static < 2 or self.n_dynamic < 2:
            raise DataError("need at least two static and two dynamic classes")
        if self.T < 4:
            raise DataError("T must be >= 4")
        if self.noise < 0:
            raise DataError("noise must be non-negative")
        if self.n_sequences < 1 or self.d < 1:
            raise DataError("n_sequences and d must be positive")


@dataclass
class SequenceDataset:
    values: np.ndarray
    static_labels: np.ndarray | None = None
    dynamic_labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DataError(f"values must be (batch, T, d), got {self.values.shape}")
        for name in ("static_labels", "dynamic_labels"):
            lab = getattr(self, name)
            if lab is not None:
                lab = np.asarray(lab, dtype=np.int64)
                if lab.shape != (len(self.values),):
                    raise DataError(f"{name} has shape {lab.shape}, expected ({len(self.values)},)")
                setattr(self, name, lab)

    def __len__(self):
        return len(self.values)

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    def require_nonempty(self, what: str = "dataset") -> "SequenceDataset":
        if len(self) == 0:
            raise DataError(f"{what} is empty")
        return self

    def subset(self, idx) -> "SequenceDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SequenceDataset(
            self.values[idx],
            None if self.static_labels is None else self.static_labels[idx],
            None if self.dynamic_labels is None else self.dynamic_labels[idx],
            dict(self.meta),
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        for lab in (self.static_labels, self.dynamic_labels):
            h.update(b"-" if lab is None else np.ascontiguousarray(lab, dtype="<i8").tobytes())
        return h.hexdigest()[:16]

    def destandardize(self) -> np.ndarray:
        """Undo the z-scoring applied by ``load_csv``; identity for other data."""
        if "mean" not in self.meta:
            return self.values.copy()
        return self.values * np.asarray(self.meta["std"]) + np.asarray(self.meta["mean"])


# -- synthetic generator ------------------------------------------------------------

def amplitude(c_s) -> np.ndarray:
    return 0.5 + 0.25 * np.asarray(c_s, dtype=np.float64)


def offset(c_s) -> np.ndarray:
    return -1.0 + 0.5 * np.asarray(c_s, dtype=np.float64)


def frequency(c_d) -> np.ndarray:
    return np.asarray(c_d, dtype=np.float64) + 1.0


def channel_phases(n_static: int, d: int) -> np.ndarray:
    """``(n_static, d)`` table of phases, a fixed quasi-random function of (class, channel)."""
    c = np.arange(n_static)[:, None] + 1.0
    k = np.arange(d)[None, :] + 1.0
    return 2.0 * np.pi * np.mod(c * k * GOLDEN + 0.37 * c, 1.0)


def render(c_s, c_d, T: int, d: int, n_static: int) -> np.ndarray:
    """Noise-free sequences ``(n, T, d)`` for label arrays ``c_s``, ``c_d``."""
    c_s = np.asarray(c_s, dtype=np.int64)
    c_d = np.asarray(c_d, dtype=np.int64)
    t = np.arange(T, dtype=np.float64)
    phase = channel_phases(n_static, d)[c_s]  # (n, d)
    angle = 2.0 * np.pi * frequency(c_d)[:, None] * t[None, :] / T  # (n, T)
    a = amplitude(c_s)[:, None, None]
    b = offset(c_s)[:, None, None]
    return a * np.sin(angle[:, :, None] + phase[:, None, :]) + b


def generate(spec: SyntheticSpec) -> SequenceDataset:
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    n = spec.n_sequences
    # balanced labels in random order
    c_s = rng.permutation(np.arange(n) % spec.n_static)
    c_d = rng.permutation(np.arange(n) % spec.n_dynamic)
    x = render(c_s, c_d, spec.T, spec.d, spec.n_static)
    if spec.noise > 0:
        x = x + spec.noise * rng.standard_normal(x.shape)
    meta = {"source": "synthetic", **{f"spec.{k}": v for k, v in spec.__dict__.items()}}
    return SequenceDataset(x, c_s, c_d, meta)


# -- persistence ----------------------------------------------------------------------

def save_dataset(ds: SequenceDataset, path) -> None:
    tensors = {"values": ds.values}
    if ds.static_labels is not None:
        tensors["static_labels"] = ds.static_labels.astype(np.float64)
    if ds.dynamic_labels is not None:
        tensors["dynamic_labels"] = ds.dynamic_labels.astype(np.float64)
    meta = {"kind": "dataset", "data_digest": ds.digest()}
    for k, v in ds.meta.items():
        if isinstance(v, (str, int, float, bool)):
            meta[f"meta.{k}"] = str(v)
    write_file(path, meta, tensors)


def load_dataset(path) -> SequenceDataset:
    meta, tensors = read_file(path)
    if meta.get("kind") != "dataset":
        raise DataError(f"{path} is not a dataset file")
    lab = lambda name: tensors[name].astype(np.int64) if name in tensors else None  # noqa: E731
    ds = SequenceDataset(tensors["values"], lab("static_labels"), lab("dynamic_labels"),
                         {k[5:]: v for k, v in meta.items() if k.startswith("meta.")})
    if ds.digest() != meta.get("data_digest"):
        raise DataError(f"{path}: content digest mismatch")
    return ds


def export_csv(ds: SequenceDataset, path, values: np.ndarray | None = None) -> None:
    """Long-format CSV: one row per (sequence, step) with labels and feature columns."""
    vals = ds.values if values is None else values
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["seq", "t", "static_label", "dynamic_label"] + [f"x{k}" for k in range(vals.shape[2])])
        for j in range(vals.shape[0]):
            sl = "" if ds.static_labels is None else int(ds.static_labels[j])
            dl = "" if ds.dynamic_labels is None else int(ds.dynamic_labels[j])
            for t in range(vals.shape[1]):
                w.writerow([j, t, sl, dl] + [repr(float(v)) for v in vals[j, t]])


def load_csv(path, T: int, columns: list[str] | None = None, label_column: str | None = None,
             label_kind: str = "static", stats_path=None) -> SequenceDataset:
    """Cut a wide CSV (header row, one time step per row) into non-overlapping windows of T rows.

    Selected columns are z-scored; the statistics go to ``stats_path``
    (default ``<path>.stats.csv``). Trailing rows that do not fill a window
    are dropped with a warning. A label column, if given, must be constant
    within a window (its first value is used).
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    if columns is None or not columns:
        columns = [h for h in header if h != label_column]
    missing = [c for c in columns + ([label_column] if label_column else []) if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    cidx = [header.index(c) for c in columns]
    lidx = header.index(label_column) if label_column else None
    data = np.empty((len(rows), len(cidx)))
    labels: list[str] = []
    for r, row in enumerate(rows):
        line = r + 2  # header is line 1
        if len(row) != len(header):
            raise DataError(f"{path}: row {line} has {len(row)} fields, expected {len(header)}")
        for j, ci in enumerate(cidx):
            try:
                data[r, j] = float(row[ci])
            except ValueError:
                raise DataError(f"{path}: row {line}, column {header[ci]!r}: non-numeric value {row[ci]!r}") from None
        if lidx is not None:
            labels.append(row[lidx].strip())
    n_win = len(rows) // T
    if n_win == 0:
        raise DataError(f"{path}: {len(rows)} rows is fewer than T={T}")
    dropped = len(rows) - n_win * T
    if dropped:
        log.warning("%s: dropping %d trailing row(s) that do not fill a window of %d", path, dropped, T)
    data = data[: n_win * T]
    mu = data.mean(axis=0)
    sd = data.std(axis=0)
    sd[sd == 0] = 1.0
    stats_path = Path(stats_path) if stats_path else path.with_name(path.name + ".stats.csv")
    with open(stats_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["column", "mean", "std"])
        for c, m, s in zip(columns, mu, sd):
            w.writerow([c, repr(float(m)), repr(float(s))])
    values = ((data - mu) / sd).reshape(n_win, T, len(cidx))
    lab_arr = None
    if lidx is not None:
        win_labels = [labels[i * T] for i in range(n_win)]
        classes = sorted(set(win_labels))
        lab_arr = np.array([classes.index(v) for v in win_labels], dtype=np.int64)
    meta = {"source": str(path), "columns": list(columns), "mean": mu, "std": sd, "dropped_rows": dropped}
    return SequenceDataset(
        values,
        lab_arr if label_kind == "static" else None,
        lab_arr if label_kind == "dynamic" else None,
        meta,
    )


def split(ds: SequenceDataset, fractions=(0.8, 0.2), seed: int = 0) -> tuple[SequenceDataset, SequenceDataset]:
    """Deterministic shuffled split, stratified on whatever labels are present."""
    f_train, f_test = fractions
    if not math.isclose(f_train + f_test, 1.0, abs_tol=1e-9) or f_train < 0 or f_test < 0:
        raise DataError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    n = len(ds)
    rng = np.random.default_rng([seed, 0x5B17])
    order = rng.permutation(n)
    key = np.zeros(n, dtype=np.int64)
    if ds.static_labels is not None:
        key = key * (ds.static_labels.max(initial=0) + 1) + ds.static_labels
    if ds.dynamic_labels is not None:
        key = key * (ds.dynamic_labels.max(initial=0) + 1) + ds.dynamic_labels
    # group by stratum (stable keeps the random order inside each stratum), then deal out
    order = order[np.argsort(key[order], kind="stable")]
    j = np.arange(n)
    to_test = np.floor((j + 1) * f_test + 1e-9) > np.floor(j * f_test + 1e-9)
    test_idx = np.sort(order[to_test])
    train_idx = np.sort(order[~to_test])
    return ds.subset(train_idx), ds.subset(test_idx)


# -- oracle classifiers used to validate the generator -----------------------------

def estimate_static_features(values: np.ndarray) -> np.ndarray:
    """(amplitude, offset) estimates per sequence from per-channel time statistics."""
    offs = values.mean(axis=(1, 2))
    amp = (values.std(axis=1) * math.sqrt(2.0)).mean(axis=1)
    return np.stack([amp, offs], axis=1)


def nearest_centroid_static(values: np.ndarray, n_static: int) -> np.ndarray:
    c = np.arange(n_static)
    centroids = np.stack([amplitude(c), offset(c)], axis=1)
    feats = estimate_static_features(values)
    return np.argmin(((feats[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)


def dominant_frequency_dynamic(values: np.ndarray, n_dynamic: int) -> np.ndarray:
    spec = np.abs(np.fft.rfft(values - values.mean(axis=1, keepdims=True), axis=1)).sum(axis=2)
    peaks = np.argmax(spec[:, 1:n_dynamic + 1], axis=1) + 1
    return peaks - 1
