"""Adam optimisation of the objective, with bit-exact checkpoint/resume.

Randomness is counter-based: the shuffle for epoch ``e`` comes from
``default_rng([seed, e, 2])`` and the noise for global step ``k`` from
``default_rng([seed, k, 1])``. A checkpoint therefore only needs the step and
epoch counters to resume the exact random stream.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig
from .model import ModelConfig, forward, init_params, param_shapes
from .objective import total_loss
from .serialization import FormatError, read_file, write_file
from .synthdata import SequenceDataset
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("step", "epoch", "recon_rest", "recon_anchor", "kl_static", "kl_dynamic", "total")


class NumericalError(RuntimeError):
    pass


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros(p.shape)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros(p.shape)
                self.v[name] = np.zeros(p.shape)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], m: dict, v: dict, lr: float, t: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Functional form of one bias-corrected Adam update (``t`` counts from 1)."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    opt = Adam(lr, beta1, beta2, eps)
    opt.t = t - 1
    opt.m = {k: np.array(a, dtype=np.float64) for k, a in m.items()}
    opt.v = {k: np.array(a, dtype=np.float64) for k, a in v.items()}
    wrapped = {k: Tensor(np.array(a, dtype=np.float64)) for k, a in params.items()}
    opt.step(wrapped, grads)
    return {k: w.data for k, w in wrapped.items()}, opt.m, opt.v


@dataclass
class TrainState:
    params: dict[str, Tensor]
    optimizer: Adam
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)


def resolve_config(cfg: RunConfig) -> RunConfig:
    """Fix run-level random choices (the random_fixed anchor) from the seed."""
    if cfg.anchor_policy == "random_fixed" and cfg.anchor_index < 0:
        rng = np.random.default_rng([cfg.seed, 3])
        return cfg.with_(anchor_index=int(rng.integers(0, cfg.T - cfg.anchor_window + 1)))
    return cfg


def new_state(cfg: RunConfig) -> TrainState:
    mc = cfg.model_config()
    return TrainState(params=init_params(mc, cfg.seed), optimizer=Adam(cfg.lr))


def train_step(cfg: RunConfig, mc: ModelConfig, state: TrainState, xb: np.ndarray) -> dict[str, float]:
    rng = np.random.default_rng([cfg.seed, state.step, 1])
    out = forward(xb, state.params, mc, rng, training=True)
    lb = total_loss(xb, out, cfg.alpha, cfg.beta, no_static_loss=mc.no_static_loss, kl_range=cfg.kl_range)
    row = lb.values()
    if not np.isfinite(row["total"]):
        raise NumericalError(f"non-finite objective at step {state.step}")
    loss = -lb.total
    for p in state.params.values():
        p.grad = None
    backward(loss)
    grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in state.params.items()}
    state.optimizer.step(state.params, grads)
    return row


def train(cfg: RunConfig, dataset: SequenceDataset, state: TrainState | None = None,
          on_epoch_end: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run (or resume) mini-batch training until ``cfg.epochs`` epochs are done."""
    dataset.require_nonempty("training set")
    if (dataset.T, dataset.d) != (cfg.T, cfg.d):
        raise ValueError(f"dataset has T={dataset.T}, d={dataset.d}; config expects T={cfg.T}, d={cfg.d}")
    cfg = resolve_config(cfg)
    mc = cfg.model_config()
    state = state or new_state(cfg)
    n = len(dataset)
    while state.epoch < cfg.epochs:
        order = np.random.default_rng([cfg.seed, state.epoch, 2]).permutation(n)
        for lo in range(0, n, cfg.batch_size):
            xb = dataset.values[order[lo:lo + cfg.batch_size]]
            row = train_step(cfg, mc, state, xb)
            state.history.append({"step": state.step, "epoch": state.epoch, **row})
            state.step += 1
        state.epoch += 1
        recent = state.history[-max(1, (n + cfg.batch_size - 1) // cfg.batch_size):]
        log.info("epoch %d  total %.4f", state.epoch, float(np.mean([r["total"] for r in recent])))
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state


def epoch_means(history: list[dict], key: str = "total") -> np.ndarray:
    if not history:
        return np.zeros(0)
    epochs = np.array([r["epoch"] for r in history])
    vals = np.array([r[key] for r in history])
    return np.array([vals[epochs == e].mean() for e in np.unique(epochs)])


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for r in history:
            w.writerow([r["step"], r["epoch"]] + [repr(float(r[k])) for k in HISTORY_FIELDS[2:]])


def read_history(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(r[k]) if k in ("step", "epoch") else float(r[k])) for k in HISTORY_FIELDS} for r in rows]


# -- checkpoints ----------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: RunConfig
    state: TrainState
    data_digest: str = ""


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    cfg, st = ckpt.config, ckpt.state
    meta = {f"config.{k}": v for k, v in cfg.to_dict().items()}
    meta.update({
        "kind": "checkpoint",
        "config_digest": cfg.digest(),
        "data_digest": ckpt.data_digest,
        "epoch": str(st.epoch),
        "step": str(st.step),
        "adam_t": str(st.optimizer.t),
        "rng": f"counter:{st.step}",
    })
    tensors = {f"param/{k}": p.data for k, p in sorted(st.params.items())}
    for k in sorted(st.optimizer.m):
        tensors[f"adam_m/{k}"] = st.optimizer.m[k]
        tensors[f"adam_v/{k}"] = st.optimizer.v[k]
    write_file(path, meta, tensors)


def load_checkpoint(path) -> Checkpoint:
    meta, tensors = read_file(path)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{path} is not a checkpoint")
    cfg = RunConfig.from_dict({k[7:]: v for k, v in meta.items() if k.startswith("config.")})
    if cfg.digest() != meta.get("config_digest"):
        raise FormatError(f"{path}: config digest mismatch")
    shapes = param_shapes(cfg.model_config())
    params = {}
    for name, shape in shapes.items():
        arr = tensors.get(f"param/{name}")
        if arr is None:
            raise FormatError(f"{path}: missing parameter {name!r}")
        if arr.shape != shape:
            raise FormatError(f"{path}: parameter {name!r} has shape {arr.shape}, config expects {shape}")
        params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
    extra = [k for k in tensors if k.startswith("param/") and k[6:] not in shapes]
    if extra:
        raise FormatError(f"{path}: unexpected parameter(s) {extra}")
    opt = Adam(cfg.lr)
    opt.t = int(meta["adam_t"])
    for k in tensors:
        if k.startswith("adam_m/"):
            name = k[7:]
            opt.m[name] = tensors[k].copy()
            opt.v[name] = tensors[f"adam_v/{name}"].copy()
    state = TrainState(params=params, optimizer=opt, epoch=int(meta["epoch"]), step=int(meta["step"]))
    return Checkpoint(cfg, state, meta.get("data_digest", ""))


def checkpoint_path(out_dir, epoch: int | None = None) -> Path:
    out_dir = Path(out_dir)
    return out_dir / ("model.ckpt" if epoch is None else f"model-epoch{epoch:04d}.ckpt")
