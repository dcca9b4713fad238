"""Trajectory replay buffer with fresh/old mixing, and the STRJ1 dataset file format.

Dataset layout: ``b"STRJ1\\n"``, then count, T, state_dim, action_dim as little-endian u32,
then per trajectory (T+1)*state_dim and T*action_dim little-endian f64 values.
"""
from __future__ import annotations

import math
import struct
from collections import deque
from pathlib import Path

import numpy as np

from .model import Trajectory

DATASET_MAGIC = b"STRJ1\n"


class ReplayBuffer:
    """FIFO trajectory store; items added during the latest iteration form the fresh pool."""

    def __init__(self, capacity: int = 50_000):
        if capacity < 1:
            raise ValueError("buffer capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)
        self.iteration = 0

    def __len__(self) -> int:
        return len(self._items)

    def start_iteration(self, iteration: int) -> None:
        """Subsequent additions are fresh; everything already stored becomes old."""
        if iteration < self.iteration:
            raise ValueError(f"iterations must not go backwards ({iteration} < {self.iteration})")
        self.iteration = iteration

    def add(self, traj: Trajectory) -> None:
        if not isinstance(traj, Trajectory):
            traj = Trajectory(*traj)
        self._items.append((self.iteration, traj))

    def extend(self, trajs) -> None:
        for t in trajs:
            self.add(t)

    def pools(self) -> tuple[list[Trajectory], list[Trajectory]]:
        fresh = [t for it, t in self._items if it == self.iteration]
        old = [t for it, t in self._items if it != self.iteration]
        return fresh, old

    def trajectories(self) -> list[Trajectory]:
        return [t for _, t in self._items]


def replay_sample(buffer: ReplayBuffer, B: int, rho: float, rng: np.random.Generator) -> list[Trajectory]:
    """``ceil(rho*B)`` fresh plus the rest old, uniform without replacement within each pool.

    A short pool is topped up from the other one; only if both run dry are items repeated.
    """
    if len(buffer) == 0:
        raise ValueError("replay_sample: buffer is empty")
    if B < 1 or not 0.0 <= rho <= 1.0:
        raise ValueError(f"replay_sample: need B >= 1 and rho in [0, 1], got B={B}, rho={rho}")
    fresh, old = buffer.pools()
    n_fresh = min(math.ceil(rho * B), len(fresh))
    n_old = min(B - n_fresh, len(old))
    n_fresh = min(B - n_old, len(fresh))
    picks = [fresh[i] for i in rng.choice(len(fresh), size=n_fresh, replace=False)] if n_fresh else []
    picks += [old[i] for i in rng.choice(len(old), size=n_old, replace=False)] if n_old else []
    short = B - len(picks)
    if short:
        everything = fresh + old
        picks += [everything[i] for i in rng.integers(len(everything), size=short)]
    return picks


def write_dataset(path: str | Path, trajs: list[Trajectory]) -> None:
    trajs = list(trajs)
    if trajs:
        T, s_dim, a_dim = trajs[0].T, trajs[0].states.shape[1], trajs[0].actions.shape[1]
    else:
        T = s_dim = a_dim = 0
    out = [DATASET_MAGIC, struct.pack("<4I", len(trajs), T, s_dim, a_dim)]
    for t in trajs:
        if t.states.shape != (T + 1, s_dim) or t.actions.shape != (T, a_dim):
            raise ValueError("write_dataset: all trajectories must share T and dimensions")
        out.append(t.states.astype("<f8").tobytes())
        out.append(t.actions.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def read_dataset(path: str | Path) -> list[Trajectory]:
    data = Path(path).read_bytes()
    if not data.startswith(DATASET_MAGIC):
        raise ValueError(f"{path}: not a trajectory dataset (bad magic)")
    off = len(DATASET_MAGIC)
    if len(data) < off + 16:
        raise ValueError(f"{path}: truncated header")
    count, T, s_dim, a_dim = struct.unpack_from("<4I", data, off)
    off += 16
    n_s, n_a = (T + 1) * s_dim, T * a_dim
    expected = off + count * 8 * (n_s + n_a)
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    trajs = []
    for _ in range(count):
        s = np.frombuffer(data, "<f8", n_s, off).reshape(T + 1, s_dim)
        off += 8 * n_s
        a = np.frombuffer(data, "<f8", n_a, off).reshape(T, a_dim)
        off += 8 * n_a
        trajs.append(Trajectory(s.astype(np.float64), a.astype(np.float64)))
    return trajs
