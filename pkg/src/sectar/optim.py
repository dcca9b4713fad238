"""Adam with bias correction and global-norm gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import MutableMapping

import numpy as np

from .autodiff import Tape, Tensor, backward

DEFAULT_MAX_NORM = 10.0


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = DEFAULT_MAX_NORM) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class Adam:
    """Per-parameter first/second moment accumulators keyed by parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: MutableMapping[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Rebind ``params[name]`` to its updated array for every name in ``grads``."""
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise FloatingPointError(f"adam: non-finite gradient for parameter {name!r}")
            if params[name].shape != g.shape:
                raise ValueError(f"adam: gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_step(params: MutableMapping[str, np.ndarray], loss_fn, optimizer: Adam,
               names=None, max_norm: float = DEFAULT_MAX_NORM):
    """One clipped Adam step on ``loss_fn(p) -> (loss, aux)`` w.r.t. ``names`` (default: all).

    Parameters outside ``names`` enter the graph as constants.
    """
    names = set(params) if names is None else set(names)
    tape = Tape()
    p = {k: tape.leaf(v, k) if k in names else Tensor(v) for k, v in params.items()}
    loss, aux = loss_fn(p)
    grads, _ = clip_grad_norm(backward(tape, loss), max_norm)
    optimizer.step(params, grads)
    return loss.item(), aux
