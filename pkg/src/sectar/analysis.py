"""Measurements on a trained model: decoder/policy consistency, latent interpolation, task evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import Env
from .model import SectarModel, Trajectory
from .mpc import PlannerConfig, mpc_episode


def rollout_latent(env: Env, model, z: np.ndarray, s0: np.ndarray, T: int, rng: np.random.Generator,
                   greedy: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Execute the policy decoder for ``T`` steps from ``s0``; returns states (T+1, S) and actions (T, A)."""
    s = env.reset(s0)
    states, actions = [s], []
    for t in range(T):
        a = model.act(s, z, t, rng, greedy)
        s, _, _ = env.step(a)
        states.append(s)
        actions.append(env.action_to_vector(a))
    return np.array(states), np.array(actions)


def consistency_errors(env: Env, model: SectarModel, zs: np.ndarray, s0s: np.ndarray,
                       rng: np.random.Generator, greedy: bool = True) -> np.ndarray:
    """Per-latent mean step-wise L2 distance between policy rollouts and decoder mean predictions."""
    zs, s0s = np.atleast_2d(zs), np.atleast_2d(s0s)
    T = model.T
    means = model.decode_means(zs, s0s)
    out = np.empty(len(zs))
    for i, (z, s0) in enumerate(zip(zs, s0s)):
        states, _ = rollout_latent(env, model, z, s0, T, rng, greedy)
        out[i] = np.linalg.norm(states[1:] - means[i, 1:], axis=-1).mean()
    return out


@dataclass
class Interpolant:
    t: float
    z: np.ndarray
    predicted: np.ndarray  # decoder mean states (T+1, S)
    rollout: np.ndarray  # policy-decoder states (T+1, S)

    @property
    def error(self) -> float:
        return float(np.linalg.norm(self.predicted[1:] - self.rollout[1:], axis=-1).mean())


def interpolate_latents(env: Env, model: SectarModel, traj_a: Trajectory, traj_b: Trajectory, n: int,
                        rng: np.random.Generator, greedy: bool = True) -> list[Interpolant]:
    """Linear path between the posterior means of two trajectories, decoded and executed from ``traj_a``'s start."""
    if n < 2:
        raise ValueError(f"interpolate_latents: need n >= 2, got {n}")
    mu_a = model.encode(traj_a.states).mean.value
    mu_b = model.encode(traj_b.states).mean.value
    ts = np.linspace(0.0, 1.0, n)
    zs = (1.0 - ts)[:, None] * mu_a + ts[:, None] * mu_b
    zs[0], zs[-1] = mu_a, mu_b
    s0 = traj_a.states[0]
    means = model.decode_means(zs, np.repeat(s0[None], n, axis=0))
    out = []
    for t, z, pred in zip(ts, zs, means):
        states, _ = rollout_latent(env, model, z, s0, model.T, rng, greedy)
        out.append(Interpolant(float(t), z, pred, states))
    return out


def evaluate(env: Env, model, planner: PlannerConfig, H: int, episodes: int, rng: np.random.Generator) -> np.ndarray:
    """Returns of ``episodes`` MPC episodes on ``env``'s task from the default start."""
    return np.array([mpc_episode(env, model, planner, H, rng).total_reward for _ in range(episodes)])
