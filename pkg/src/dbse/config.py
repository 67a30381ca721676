"""Flat ``key=value`` run configuration.

One file drives data generation, training and evaluation. Keys are fixed;
unknown keys are rejected. The canonical form (sorted keys) hashes to the
digest stamped into every checkpoint and report.
"""
from __future__ import annotations

import hashlib
from dataclasses import MISSING, dataclass, fields, replace
from pathlib import Path

from .model import ModelConfig
from .serialization import encode_kv


class ConfigError(ValueError):
    pass


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    # objective / optimizer
    alpha: float = 0.5
    beta: float = 0.5
    lr: float = 2e-3
    batch_size: int = 32
    epochs: int = 200
    checkpoint_every: int = 0
    kl_range: str = "full"
    train_fraction: float = 0.8
    # model
    T: int = 20
    d: int = 10
    g_dim: int = 32
    mlp_width: int = 64
    s_dim: int = 8
    d_dim: int = 4
    lstm_hidden: int = 32
    dec_hidden: int = 32
    anchor_policy: str = "first"
    anchor_window: int = 1
    anchor_index: int = -1
    no_static_loss: bool = False
    no_subtraction: bool = False
    decoder_variance: str = "fixed_unit"
    # synthetic data
    n_sequences: int = 2000
    n_static: int = 5
    n_dynamic: int = 4
    noise: float = 0.05
    data_seed: int = 0
    # csv ingestion
    csv_columns: str = ""
    csv_label_column: str = ""
    csv_label_kind: str = "static"
    # evaluation
    judge_hidden: int = 64
    judge_iters: int = 300
    n_swap_pairs: int = 200
    eval_seed: int = 0
    latent_codes: str = "sample"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must lie in (0, 1]")
        if self.kl_range not in ("full", "skip_anchor"):
            raise ConfigError(f"unknown kl_range {self.kl_range!r}")
        if self.latent_codes not in ("mean", "sample"):
            raise ConfigError(f"unknown latent_codes {self.latent_codes!r}")
        if self.csv_label_kind not in ("static", "dynamic"):
            raise ConfigError(f"unknown csv_label_kind {self.csv_label_kind!r}")
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # -- conversions ------------------------------------------------------------
    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in ModelConfig.field_names()})

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ("true" if v else "false") if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)
        return out

    def canonical(self) -> str:
        return encode_kv(self.to_dict())

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, pairs: dict[str, str]) -> "RunConfig":
        types = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in pairs.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            ftype = types[key].type
            try:
                if ftype in ("bool", bool):
                    kwargs[key] = _parse_bool(raw)
                elif ftype in ("int", int):
                    kwargs[key] = int(raw)
                elif ftype in ("float", float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = raw
            except ValueError:
                raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
        missing = [f.name for f in fields(cls) if f.default is MISSING and f.name not in kwargs]
        if missing:
            raise ConfigError(f"missing required config key(s): {', '.join(missing)}")
        return cls(**kwargs)

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        pairs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key = key.strip()
            if key in pairs:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            pairs[key] = value.strip()
        return cls.from_dict(pairs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))
