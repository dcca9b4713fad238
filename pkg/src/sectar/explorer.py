"""Explorer policy rewarded by the negated ELBO of its own trajectories."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .envs import Env
from .model import SectarModel, recon_log_prob
from .nn import DiagGaussian, Mlp, Policy, kl_diag_gaussians
from .optim import Adam
from .rl import Episode, PpoConfig, RolloutBatch, collect_episode, ppo_update


class StartStatePool:
    """FIFO store of env states visited by MPC; sampling is uniform."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ValueError("pool capacity must be positive")
        self.capacity = capacity
        self._states: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._states)

    def add(self, states: np.ndarray, env: Env | None = None) -> None:
        for s in np.atleast_2d(np.asarray(states, dtype=np.float64)):
            if env is not None:
                env.validate_state(s)
            self._states.append(s.copy())

    def sample(self, rng: np.random.Generator) -> np.ndarray | None:
        if not self._states:
            return None
        return self._states[int(rng.integers(len(self._states)))].copy()


def explorer_rewards(model: SectarModel, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Negated one-sample ELBO for each trajectory in ``states`` (N, T+1, S)."""
    states = np.asarray(states, dtype=np.float64)
    p = model.const()
    q = model.encoder(p, states)
    z = q.sample(rng)
    log_lik = recon_log_prob(model, p, z, states).value
    kl = kl_diag_gaussians(q, DiagGaussian.standard(model.cfg.d_z)).value
    return -log_lik + kl


def explorer_reward(model: SectarModel, states: np.ndarray, rng: np.random.Generator) -> float:
    return float(explorer_rewards(model, np.asarray(states)[None], rng)[0])


@dataclass
class Explorer:
    """State-conditioned policy ``explorer.*`` and value net ``explorer_vf.*`` with their optimizer."""

    policy: Policy
    value: Mlp
    params: dict
    ppo: PpoConfig
    optimizer: Adam = field(default_factory=Adam)

    @classmethod
    def create(cls, state_dim: int, action_dim: int, discrete: bool, rng: np.random.Generator,
               hidden=(400, 300, 200), value_hidden=(64, 64), ppo: PpoConfig | None = None) -> "Explorer":
        ppo = ppo or PpoConfig()
        # each trajectory is one undiscounted reward unit
        ppo = replace(ppo, gamma=1.0, gae_lambda=1.0)
        policy = Policy("explorer", state_dim, action_dim, discrete, hidden)
        value = Mlp("explorer_vf", (state_dim, *value_hidden, 1))
        params = {**policy.init(rng), **value.init(rng, out_scale=0.0)}
        return cls(policy, value, params, ppo, Adam(lr=ppo.lr))


def run_explorer(env: Env, explorer: Explorer, pool: StartStatePool | None, H_e: int, T: int,
                 rng: np.random.Generator, start_state: np.ndarray | None = None) -> list[tuple[Episode, np.ndarray]]:
    """H_e consecutive T-step trajectories from a pool sample (or ``start_state``, or the default reset)."""
    if H_e < 1 or T < 1:
        raise ValueError(f"run_explorer: H_e and T must be positive, got {H_e}, {T}")
    if start_state is None and pool is not None:
        start_state = pool.sample(rng)
    env.reset(start_state)
    out = []
    for _ in range(H_e):
        ep, states = collect_episode(env, explorer.policy, explorer.value, explorer.params, rng, T)
        out.append((ep, states))
    return out


def update_explorer(explorer: Explorer, episodes: list[Episode], rewards, rng: np.random.Generator) -> dict:
    """PPO step with each trajectory's reward placed on its final step."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if len(rewards) != len(episodes):
        raise ValueError(f"update_explorer: {len(rewards)} rewards for {len(episodes)} trajectories")
    shaped = []
    for ep, r in zip(episodes, rewards):
        step_rewards = [0.0] * len(ep)
        step_rewards[-1] = float(r)
        shaped.append(replace(ep, rewards=step_rewards, last_value=0.0))
    batch = RolloutBatch.from_episodes(shaped, explorer.ppo.gamma, explorer.ppo.gae_lambda)
    return ppo_update(explorer.policy, explorer.value, explorer.params, batch, explorer.ppo,
                      explorer.optimizer, rng)


def final_states(env: Env, explorer: Explorer, T: int, episodes: int, rng: np.random.Generator) -> np.ndarray:
    """Final states of ``episodes`` T-step rollouts from the fixed initial state."""
    out = []
    for _ in range(episodes):
        env.reset()
        _, states = collect_episode(env, explorer.policy, explorer.value, explorer.params, rng, T)
        out.append(states[-1])
    return np.array(out)
