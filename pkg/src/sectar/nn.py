"""Feedforward and recurrent networks plus the distributions they parameterize.

Networks are stateless descriptions: parameters live in a flat ``dict`` of
named arrays (so they can be checkpointed) and every forward call takes a
mapping of name -> :class:`~sectar.autodiff.Tensor`. Pass tape leaves to
train, or :func:`constants` for inference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

Params = Mapping[str, Tensor]


def constants(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def glorot(rng: np.random.Generator, n_in: int, n_out: int, scale: float = 1.0) -> np.ndarray:
    bound = scale * math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


# -- distributions -----------------------------------------------------------

class DiagGaussian:
    """Diagonal Gaussian over the last axis; log-std is clamped to [-5, 2]."""

    def __init__(self, mean, log_std):
        self.mean = ad.as_tensor(mean)
        self.log_std = ad.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
        if self.mean.shape[-1] != self.log_std.shape[-1]:
            raise ValueError(f"DiagGaussian: mean dim {self.mean.shape} != log-std dim {self.log_std.shape}")

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.zeros(dim))

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.value)

    def log_prob(self, x) -> Tensor:
        z = (ad.as_tensor(x) - self.mean) * ad.exp(-self.log_std)
        return (-0.5 * z.square() - self.log_std - HALF_LOG_2PI).sum(axis=-1)

    def sample(self, rng: np.random.Generator) -> Tensor:
        eps = rng.standard_normal(np.broadcast_shapes(self.mean.shape, self.log_std.shape))
        return self.mean + ad.exp(self.log_std) * eps

    def entropy(self) -> Tensor:
        return (self.log_std + (HALF_LOG_2PI + 0.5)).sum(axis=-1)

    def mode(self) -> np.ndarray:
        return self.mean.value


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) summed over the last axis."""
    var_ratio = ad.exp(2.0 * (q.log_std - p.log_std))
    mahal = ((q.mean - p.mean) * ad.exp(-p.log_std)).square()
    return (0.5 * (var_ratio + mahal - 1.0) - (q.log_std - p.log_std)).sum(axis=-1)


class Categorical:
    def __init__(self, logits):
        self.logits = ad.as_tensor(logits)
        self.log_probs = ad.log_softmax(self.logits, axis=-1)

    @property
    def n(self) -> int:
        return self.logits.shape[-1]

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.value)

    def log_prob(self, actions) -> Tensor:
        """``actions`` are one-hot rows (..., n) or integer indices (...)."""
        onehot = np.asarray(actions.value if isinstance(actions, Tensor) else actions, dtype=np.float64)
        if onehot.shape != self.logits.shape:
            onehot = np.eye(self.n)[onehot.astype(np.int64)]
        return (self.log_probs * onehot).sum(axis=-1)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        cdf = np.cumsum(self.probs, axis=-1)
        u = rng.random(cdf.shape[:-1] + (1,))
        return np.minimum((u > cdf).sum(axis=-1), self.n - 1)

    def entropy(self) -> Tensor:
        return -(ad.exp(self.log_probs) * self.log_probs).sum(axis=-1)

    def mode(self) -> np.ndarray:
        return np.argmax(self.logits.value, axis=-1)


# -- layers ------------------------------------------------------------------

@dataclass(frozen=True)
class Linear:
    prefix: str
    n_in: int
    n_out: int

    def init(self, rng: np.random.Generator, scale: float = 1.0) -> dict[str, np.ndarray]:
        return {f"{self.prefix}.w": glorot(rng, self.n_in, self.n_out, scale),
                f"{self.prefix}.b": np.zeros(self.n_out)}

    def __call__(self, p: Params, x) -> Tensor:
        return ad.as_tensor(x) @ p[f"{self.prefix}.w"] + p[f"{self.prefix}.b"]


@dataclass(frozen=True)
class Mlp:
    """ReLU hidden layers, linear output."""

    prefix: str
    sizes: tuple[int, ...]  # (input, hidden..., output)

    @property
    def layers(self) -> list[Linear]:
        return [Linear(f"{self.prefix}.{i}", a, b) for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:]))]

    def init(self, rng: np.random.Generator, out_scale: float = 1.0) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        layers = self.layers
        for i, layer in enumerate(layers):
            params.update(layer.init(rng, out_scale if i == len(layers) - 1 else 1.0))
        return params

    def __call__(self, p: Params, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"{self.prefix}: input dim {x.shape[-1]} != {self.sizes[0]}")
        layers = self.layers
        for layer in layers[:-1]:
            x = layer(p, x).relu()
        return layers[-1](p, x)


@dataclass(frozen=True)
class LSTMCell:
    """Gate order in the 4H blocks: input, forget, output, candidate."""

    prefix: str
    n_in: int
    n_hidden: int

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        h = self.n_hidden
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        return {f"{self.prefix}.wx": glorot(rng, self.n_in, 4 * h),
                f"{self.prefix}.wh": glorot(rng, h, 4 * h),
                f"{self.prefix}.b": b}

    def zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = Tensor(np.zeros((batch, self.n_hidden)))
        return z, z

    def input_gates(self, p: Params, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"{self.prefix}: input dim {x.shape[-1]} != {self.n_in}")
        return x @ p[f"{self.prefix}.wx"] + p[f"{self.prefix}.b"]

    def step(self, p: Params, xg: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        """Advance one step given precomputed input gates ``xg = x @ wx + b``."""
        n = self.n_hidden
        g = xg + h @ p[f"{self.prefix}.wh"]
        i = g[..., :n].sigmoid()
        f = g[..., n:2 * n].sigmoid()
        o = g[..., 2 * n:3 * n].sigmoid()
        cand = g[..., 3 * n:].tanh()
        c = f * c + i * cand
        return o * c.tanh(), c

    def __call__(self, p: Params, x, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return self.step(p, self.input_gates(p, x), h, c)


@dataclass(frozen=True)
class BiLSTMEncoder:
    """Stacked bidirectional LSTM, mean-pooled over time, then a linear Gaussian head."""

    prefix: str
    n_in: int
    n_hidden: int
    n_layers: int
    d_z: int

    def cells(self, layer: int) -> tuple[LSTMCell, LSTMCell]:
        n_in = self.n_in if layer == 0 else 2 * self.n_hidden
        return (LSTMCell(f"{self.prefix}.l{layer}.fwd", n_in, self.n_hidden),
                LSTMCell(f"{self.prefix}.l{layer}.bwd", n_in, self.n_hidden))

    @property
    def head(self) -> Linear:
        return Linear(f"{self.prefix}.head", 2 * self.n_hidden, 2 * self.d_z)

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for layer in range(self.n_layers):
            for cell in self.cells(layer):
                params.update(cell.init(rng))
        params.update(self.head.init(rng))
        return params

    def features(self, p: Params, states) -> Tensor:
        """Mean-pooled top-layer outputs ``[forward; backward]``, shape (B, 2H)."""
        x = ad.as_tensor(states)
        if x.ndim != 3 or x.shape[1] < 1:
            raise ValueError(f"{self.prefix}: expected (batch, time>=1, dim) states, got {x.shape}")
        n = x.shape[1]
        seq = [x[:, t] for t in range(n)] if x.tape is not None else [Tensor(x.value[:, t]) for t in range(n)]
        for layer in range(self.n_layers):
            fwd_cell, bwd_cell = self.cells(layer)
            fwd = self._run(p, fwd_cell, seq)
            bwd = self._run(p, bwd_cell, seq[::-1])[::-1]
            seq = [ad.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)]
        return ad.stack(seq, axis=1).mean(axis=1)

    @staticmethod
    def _run(p: Params, cell: LSTMCell, seq: list[Tensor]) -> list[Tensor]:
        h, c = cell.zero_state(seq[0].shape[0])
        out = []
        for x in seq:
            h, c = cell(p, x, h, c)
            out.append(h)
        return out

    def __call__(self, p: Params, states) -> DiagGaussian:
        out = self.head(p, self.features(p, states))
        return DiagGaussian(out[..., :self.d_z], out[..., self.d_z:])


@dataclass(frozen=True)
class StateDecoder:
    """Open-loop LSTM over the constant input ``[z; s0]`` emitting per-step state deltas.

    The mean trajectory integrates the deltas from ``s0``; each step also has a
    learned per-dimension log-std.
    """

    prefix: str
    d_z: int
    state_dim: int
    n_hidden: int

    @property
    def cell(self) -> LSTMCell:
        return LSTMCell(f"{self.prefix}.cell", self.d_z + self.state_dim, self.n_hidden)

    @property
    def head(self) -> Linear:
        return Linear(f"{self.prefix}.head", self.n_hidden, 2 * self.state_dim)

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = self.cell.init(rng)
        params.update(self.head.init(rng, scale=0.1))
        params[f"{self.prefix}.head.b"][self.state_dim:] = -1.0
        return params

    def step(self, p: Params, h: Tensor, c: Tensor, step_input) -> tuple[Tensor, Tensor, DiagGaussian]:
        """One decoder step; ``step_input`` is ``[z; s0]``. Returns the delta distribution."""
        cell = self.cell
        h, c = cell(p, step_input, h, c)
        out = self.head(p, h)
        return h, c, DiagGaussian(out[..., :self.state_dim], out[..., self.state_dim:])

    def __call__(self, p: Params, z, s0, T: int) -> tuple[Tensor, Tensor]:
        """Returns (mean states (B, T+1, S) starting at s0, log-std (B, T, S))."""
        z, s0 = ad.as_tensor(z), ad.as_tensor(s0)
        if z.shape[-1] != self.d_z or s0.shape[-1] != self.state_dim:
            raise ValueError(f"{self.prefix}: got z {z.shape}, s0 {s0.shape}; "
                             f"expected d_z={self.d_z}, state_dim={self.state_dim}")
        cell = self.cell
        xg = cell.input_gates(p, ad.concat([z, s0], axis=-1))
        h, c = cell.zero_state(z.shape[0])
        hs = []
        for _ in range(T):
            h, c = cell.step(p, xg, h, c)
            hs.append(h)
        out = self.head(p, ad.stack(hs, axis=1))
        deltas = out[..., :self.state_dim]
        log_std = ad.clip(out[..., self.state_dim:], LOG_STD_MIN, LOG_STD_MAX)
        # cumulative sum over time as a lower-triangular matmul, anchored at s0
        lower = np.tril(np.ones((T + 1, T)), k=-1)
        s0_rows = ad.reshape(s0, (s0.shape[0], 1, self.state_dim))
        means = lower @ deltas + s0_rows
        return means, log_std


@dataclass(frozen=True)
class Policy:
    """MLP policy over ``obs``: categorical logits, or Gaussian mean with a state-independent log-std."""

    prefix: str
    obs_dim: int
    action_dim: int
    discrete: bool
    hidden: tuple[int, ...] = (400, 300, 200)

    @property
    def net(self) -> Mlp:
        return Mlp(f"{self.prefix}.mlp", (self.obs_dim, *self.hidden, self.action_dim))

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = self.net.init(rng, out_scale=0.01)
        if not self.discrete:
            params[f"{self.prefix}.log_std"] = np.full(self.action_dim, -0.5)
        return params

    def dist(self, p: Params, obs):
        out = self.net(p, obs)
        if self.discrete:
            return Categorical(out)
        log_std = p[f"{self.prefix}.log_std"] + np.zeros(out.shape)
        return DiagGaussian(out, log_std)
