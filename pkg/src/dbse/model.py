"""Single-anchor sequential disentanglement network.

Data flow for a batch ``x`` of shape ``(B, T, d)``::

    x --encode--> g_{1:T} --+--(anchor window mean)--> static MLP --> q(s)
                            |
                            +--(g_t - g_anchor, anchor slot <- noise)--> LSTM --> q(d_t)
    (s, d_t) --decode--> x_hat_t
    d_{<t} --prior LSTM--> p(d_t | d_{<t})

Parameters live in a flat ``dict[str, Tensor]`` so the optimizer and the
checkpoint code can treat them uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .distributions import DiagGaussian, reparameterize
from .tensor import (
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    lstm_pointwise,
    no_grad,
    relu,
    slice_,
    stack,
    tanh,
)

ANCHOR_POLICIES = ("first", "middle", "last", "random_fixed", "random_on_batch")


@dataclass(frozen=True)
class ModelConfig:
    T: int = 20
    d: int = 10
    g_dim: int = 32
    mlp_width: int = 64
    s_dim: int = 8
    d_dim: int = 8
    lstm_hidden: int = 32
    dec_hidden: int = 32
    anchor_policy: str = "first"
    anchor_window: int = 1
    # start of the anchor window for random_fixed; -1 until the trainer draws it
    anchor_index: int = -1
    no_static_loss: bool = False
    no_subtraction: bool = False
    decoder_variance: str = "fixed_unit"

    def __post_init__(self):
        for name in ("T", "d", "g_dim", "mlp_width", "s_dim", "d_dim", "lstm_hidden", "dec_hidden", "anchor_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.anchor_policy not in ANCHOR_POLICIES:
            raise ValueError(f"unknown anchor_policy {self.anchor_policy!r}")
        if self.anchor_window > self.T:
            raise ValueError("anchor_window must not exceed T")
        if self.anchor_index >= 0 and self.anchor_index + self.anchor_window > self.T:
            raise ValueError("anchor window out of range")
        if self.decoder_variance not in ("fixed_unit", "learned"):
            raise ValueError(f"unknown decoder_variance {self.decoder_variance!r}")

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def anchor_start(config: ModelConfig, rng: np.random.Generator | None = None, training: bool = True) -> int:
    """0-based start of the anchor window for one batch."""
    T, w = config.T, config.anchor_window
    policy = config.anchor_policy
    if policy == "first":
        return 0
    if policy == "middle":
        return (T - w) // 2
    if policy == "last":
        return T - w
    if policy == "random_fixed":
        if config.anchor_index < 0:
            raise ValueError("random_fixed anchor has not been drawn yet")
        return config.anchor_index
    # random_on_batch: a fresh index per training batch, the first element at evaluation
    if not training:
        return 0
    if rng is None:
        raise ValueError("random_on_batch needs an RNG")
    return int(rng.integers(0, T - w + 1))


# -- parameters ---------------------------------------------------------------------

def _linear(params, rng, name, fan_in, fan_out):
    k = 1.0 / np.sqrt(fan_in)
    params[f"{name}.w"] = Tensor(rng.uniform(-k, k, (fan_in, fan_out)), requires_grad=True, name=f"{name}.w")
    params[f"{name}.b"] = Tensor(rng.uniform(-k, k, (fan_out,)), requires_grad=True, name=f"{name}.b")


def _lstm(params, rng, name, n_in, H):
    k = 1.0 / np.sqrt(H)
    b = rng.uniform(-k, k, (4 * H,))
    b[H:2 * H] = 1.0
    params[f"{name}.wx"] = Tensor(rng.uniform(-k, k, (n_in, 4 * H)), requires_grad=True, name=f"{name}.wx")
    params[f"{name}.wh"] = Tensor(rng.uniform(-k, k, (H, 4 * H)), requires_grad=True, name=f"{name}.wh")
    params[f"{name}.b"] = Tensor(b, requires_grad=True, name=f"{name}.b")


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    c = config
    rng = np.random.default_rng([seed, 0x5EED])
    p: dict[str, Tensor] = {}
    _linear(p, rng, "enc.l1", c.d, c.g_dim)
    _linear(p, rng, "enc.l2", c.g_dim, c.mlp_width)
    _linear(p, rng, "enc.l3", c.mlp_width, c.g_dim)
    _linear(p, rng, "static.hidden", c.g_dim, c.g_dim)
    _linear(p, rng, "static.mean", c.g_dim, c.s_dim)
    _linear(p, rng, "static.logvar", c.g_dim, c.s_dim)
    _lstm(p, rng, "dyn.lstm", c.g_dim, c.lstm_hidden)
    _linear(p, rng, "dyn.mean", c.lstm_hidden, c.d_dim)
    _linear(p, rng, "dyn.logvar", c.lstm_hidden, c.d_dim)
    p["prior.token"] = Tensor(np.zeros(c.d_dim), requires_grad=True, name="prior.token")
    _lstm(p, rng, "prior.lstm", c.d_dim, c.lstm_hidden)
    _linear(p, rng, "prior.mean", c.lstm_hidden, c.d_dim)
    _linear(p, rng, "prior.logvar", c.lstm_hidden, c.d_dim)
    _linear(p, rng, "dec.proj", c.s_dim + c.d_dim, c.dec_hidden)
    _lstm(p, rng, "dec.lstm", c.dec_hidden, c.dec_hidden)
    _linear(p, rng, "dec.l1", c.dec_hidden, c.mlp_width)
    _linear(p, rng, "dec.l2", c.mlp_width, c.dec_hidden)
    _linear(p, rng, "dec.out", c.dec_hidden, c.d)
    if c.decoder_variance == "learned":
        _linear(p, rng, "dec.logvar", c.dec_hidden, c.d)
    return p


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    return {k: v.shape for k, v in init_params(config, 0).items()}


def linear(x: Tensor, params, name: str) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


# -- building blocks ----------------------------------------------------------------

def lstm_cell(u_t: Tensor, h_prev: Tensor, c_prev: Tensor, params, name: str) -> tuple[Tensor, Tensor]:
    """One LSTM step with gate order ``[input, forget, candidate, output]``."""
    H = c_prev.shape[-1]
    z = u_t @ params[f"{name}.wx"] + h_prev @ params[f"{name}.wh"] + params[f"{name}.b"]
    hc = lstm_pointwise(z, c_prev)
    return slice_(hc, -1, 0, H), slice_(hc, -1, H, 2 * H)


def run_lstm(inputs: Tensor, params, name: str) -> Tensor:
    """Unroll an LSTM from a zero state over ``inputs`` (B, T, n_in); returns h (B, T, H)."""
    B, T, _ = inputs.shape
    H = params[f"{name}.wh"].shape[0]
    # input projections for all steps in one matmul
    zx = inputs @ params[f"{name}.wx"] + params[f"{name}.b"]
    wh = params[f"{name}.wh"]
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    hs = []
    for t in range(T):
        z = zx[:, t] if t == 0 else zx[:, t] + h @ wh
        hc = lstm_pointwise(z, c)
        h, c = slice_(hc, -1, 0, H), slice_(hc, -1, H, 2 * H)
        hs.append(h)
    return stack(hs, axis=1)


def encode(x, params) -> Tensor:
    """Per-element MLP; no information crosses time steps."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 3 or x.shape[-1] != params["enc.l1.w"].shape[0]:
        raise ShapeError(f"encode: expected (batch, T, {params['enc.l1.w'].shape[0]}), got {x.shape}")
    h = relu(linear(x, params, "enc.l1"))
    h = relu(linear(h, params, "enc.l2"))
    return relu(linear(h, params, "enc.l3"))


def anchor_summary(g: Tensor, start: int, window: int) -> Tensor:
    T = g.shape[1]
    if start < 0 or start + window > T:
        raise ShapeError(f"anchor window [{start}, {start + window}) out of range for T={T}")
    if window == 1:
        return g[:, start]
    return slice_(g, 1, start, start + window).mean(axis=1)


def static_path(g_anchor: Tensor, params, noise=None) -> tuple[DiagGaussian, Tensor]:
    """Static posterior from the anchor summary. ``noise=None`` returns the mean as the sample."""
    s_tilde = tanh(linear(g_anchor, params, "static.hidden"))
    q = DiagGaussian(linear(s_tilde, params, "static.mean"), linear(s_tilde, params, "static.logvar"))
    s = q.mean if noise is None else reparameterize(q, noise)
    return q, s


def subtract_anchor(g: Tensor, start: int, first_input, window: int = 1, subtract: bool = True) -> Tensor:
    """Dynamic-path inputs: ``g_t - g_anchor`` off the anchor slot, ``first_input`` on it."""
    B, T, G = g.shape
    if not 0 <= start < T:
        raise ShapeError(f"subtract_anchor: anchor {start} out of range for T={T}")
    first_input = first_input if isinstance(first_input, Tensor) else Tensor(first_input)
    if subtract:
        ref = anchor_summary(g, start, window)
        base = g - broadcast_to(ref.reshape(B, 1, G), (B, T, G))
    else:
        base = g
    parts = []
    if start > 0:
        parts.append(slice_(base, 1, 0, start))
    parts.append(first_input.reshape(B, 1, G))
    if start + 1 < T:
        parts.append(slice_(base, 1, start + 1, T))
    return concat(parts, axis=1)


def dynamic_path(u: Tensor, params, noise=None) -> tuple[DiagGaussian, Tensor]:
    h = run_lstm(u, params, "dyn.lstm")
    q = DiagGaussian(linear(h, params, "dyn.mean"), linear(h, params, "dyn.logvar"))
    d = q.mean if noise is None else reparameterize(q, noise)
    return q, d


def prior_teacher_forced(d: Tensor, params) -> DiagGaussian:
    """p(d_t | d_{<t}) for every t given a posterior trajectory ``d`` (B, T, d_dim)."""
    B, T, D = d.shape
    token = broadcast_to(params["prior.token"].reshape(1, 1, D), (B, 1, D))
    inputs = concat([token, slice_(d, 1, 0, T - 1)], axis=1) if T > 1 else token
    h = run_lstm(inputs, params, "prior.lstm")
    return DiagGaussian(linear(h, params, "prior.mean"), linear(h, params, "prior.logvar"))


def prior_generate(params, batch: int, T: int, rng: np.random.Generator | None) -> tuple[DiagGaussian, Tensor]:
    """Ancestral rollout of the learned prior; ``rng=None`` feeds the prior means forward."""
    name = "prior.lstm"
    D = params["prior.token"].shape[0]
    H = params[f"{name}.wh"].shape[0]
    h = Tensor(np.zeros((batch, H)))
    c = Tensor(np.zeros((batch, H)))
    inp = broadcast_to(params["prior.token"].reshape(1, D), (batch, D))
    means, logvars, samples = [], [], []
    for _ in range(T):
        h, c = lstm_cell(inp, h, c, params, name)
        mu = linear(h, params, "prior.mean")
        lv = linear(h, params, "prior.logvar")
        dist = DiagGaussian(mu, lv)
        sample = mu if rng is None else reparameterize(dist, rng.standard_normal(mu.shape))
        means.append(mu)
        logvars.append(lv)
        samples.append(sample)
        inp = sample
    return DiagGaussian(stack(means, 1), stack(logvars, 1)), stack(samples, 1)


def decode(s: Tensor, d: Tensor, params) -> tuple[Tensor, Tensor | None]:
    """Reconstruct ``(B, T, d)`` from a static code ``(B, s_dim)`` and dynamics ``(B, T, d_dim)``."""
    s = s if isinstance(s, Tensor) else Tensor(s)
    d = d if isinstance(d, Tensor) else Tensor(d)
    if s.ndim != 2 or d.ndim != 3 or s.shape[0] != d.shape[0]:
        raise ShapeError(f"decode: static {s.shape} and dynamic {d.shape} are incompatible")
    B, T, _ = d.shape
    S = s.shape[1]
    z = concat([broadcast_to(s.reshape(B, 1, S), (B, T, S)), d], axis=2)
    if z.shape[-1] != params["dec.proj.w"].shape[0]:
        raise ShapeError(f"decode: latent width {z.shape[-1]} != {params['dec.proj.w'].shape[0]}")
    h = tanh(linear(z, params, "dec.proj"))
    h = run_lstm(h, params, "dec.lstm")
    h = relu(linear(h, params, "dec.l1"))
    h = relu(linear(h, params, "dec.l2"))
    x_hat = linear(h, params, "dec.out")
    logvar = linear(h, params, "dec.logvar") if "dec.logvar.w" in params else None
    return x_hat, logvar


# -- full pass ------------------------------------------------------------------------

@dataclass
class LatentCodes:
    g: Tensor
    u: Tensor
    static: DiagGaussian
    s: Tensor
    dynamic: DiagGaussian
    d: Tensor
    prior: DiagGaussian
    anchor: int


@dataclass
class ForwardOutput:
    latents: LatentCodes
    x_hat: Tensor
    x_logvar: Tensor | None = None
    extras: dict = field(default_factory=dict)


def forward(x, params, config: ModelConfig, rng: np.random.Generator | None = None,
            training: bool = True, anchor: int | None = None) -> ForwardOutput:
    """Encode, split into static and dynamic paths, evaluate the prior, decode.

    Training mode draws (in this order) the anchor-slot noise, the static noise
    and the dynamic noise from ``rng``. Evaluation mode is deterministic: the
    anchor slot is zero and posterior means stand in for samples.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 3 or x.shape[1:] != (config.T, config.d):
        raise ShapeError(f"forward: expected (batch, {config.T}, {config.d}), got {x.shape}")
    if training and rng is None:
        raise ValueError("training forward pass needs an RNG")
    B = x.shape[0]
    start = anchor if anchor is not None else anchor_start(config, rng, training)

    g = encode(x, params)
    g_anchor = anchor_summary(g, start, config.anchor_window)
    if training:
        first = rng.standard_normal((B, config.g_dim))
        eps_s = rng.standard_normal((B, config.s_dim))
        eps_d = rng.standard_normal((B, config.T, config.d_dim))
    else:
        first = np.zeros((B, config.g_dim))
        eps_s = eps_d = None
    q_s, s = static_path(g_anchor, params, eps_s)
    u = subtract_anchor(g, start, first, config.anchor_window, subtract=not config.no_subtraction)
    q_d, d = dynamic_path(u, params, eps_d)
    prior = prior_teacher_forced(d, params)
    x_hat, x_logvar = decode(s, d, params)
    latents = LatentCodes(g=g, u=u, static=q_s, s=s, dynamic=q_d, d=d, prior=prior, anchor=start)
    return ForwardOutput(latents=latents, x_hat=x_hat, x_logvar=x_logvar)


class Model:
    """A config plus its parameters, with convenience wrappers for evaluation."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        # set from a checkpoint; evaluation refuses a model at epoch 0
        self.epochs_trained: int | None = None

    def forward(self, x, rng=None, training=True, anchor=None) -> ForwardOutput:
        return forward(x, self.params, self.config, rng, training, anchor)

    def posterior(self, x, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Evaluation-mode posterior parameters: static mean/logvar and per-step dynamic mean/logvar."""
        x = np.asarray(x, dtype=np.float64)
        parts: list[list[np.ndarray]] = [[], [], [], []]
        with no_grad():
            for lo in range(0, len(x), batch_size):
                lat = self.forward(x[lo:lo + batch_size], training=False).latents
                for acc, t in zip(parts, (lat.static.mean, lat.static.logvar, lat.dynamic.mean, lat.dynamic.logvar)):
                    acc.append(t.data)
        return tuple(np.concatenate(p) for p in parts)

    def codes(self, x, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic static means ``(N, s_dim)`` and dynamic means ``(N, T, d_dim)``."""
        ms, _, md, _ = self.posterior(x, batch_size)
        return ms, md

    def sample_codes(self, x, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """One posterior draw per sequence: ``s ~ q(s | x_anchor)``, ``d_t ~ q(d_t | ...)``."""
        ms, ls, md, ld = self.posterior(x)
        return ms + np.exp(0.5 * ls) * rng.standard_normal(ms.shape), md + np.exp(0.5 * ld) * rng.standard_normal(md.shape)

    def decode(self, s, d) -> np.ndarray:
        with no_grad():
            return decode(Tensor(np.asarray(s, dtype=np.float64)), Tensor(np.asarray(d, dtype=np.float64)), self.params)[0].data

    def sample_dynamics(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        with no_grad():
            return prior_generate(self.params, batch, self.config.T, rng)[1].data
