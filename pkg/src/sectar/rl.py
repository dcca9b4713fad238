"""Behavior cloning, generalized advantage estimation and clipped-surrogate PPO."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nn import Mlp, Policy, constants
from .optim import Adam, train_step


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    epochs: int = 10
    minibatch_size: int = 64
    gamma: float = 0.99
    gae_lambda: float = 0.95
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    lr: float = 3e-4

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")


def gae_advantages(rewards, values, last_value: float, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """GAE for one episode segment; ``last_value`` bootstraps after the final step (0 if terminal)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ValueError(f"rewards {rewards.shape} and values {values.shape} must align")
    adv = np.zeros_like(rewards)
    next_value, running = last_value, 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


@dataclass
class Episode:
    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    logps: list = field(default_factory=list)
    values: list = field(default_factory=list)
    last_value: float = 0.0

    def __len__(self) -> int:
        return len(self.obs)


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    rewards: np.ndarray
    episode_starts: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)

    @classmethod
    def from_episodes(cls, episodes: list[Episode], gamma: float, lam: float) -> "RolloutBatch":
        advs, rets, starts = [], [], []
        n = 0
        for ep in episodes:
            a, r = gae_advantages(ep.rewards, ep.values, ep.last_value, gamma, lam)
            advs.append(a)
            rets.append(r)
            starts.append(n)
            n += len(ep)
        cat = lambda key: np.concatenate([np.asarray(getattr(ep, key), dtype=np.float64) for ep in episodes])
        return cls(obs=np.concatenate([np.asarray(ep.obs) for ep in episodes]),
                   actions=np.concatenate([np.asarray(ep.actions, dtype=np.float64) for ep in episodes]),
                   logp_old=cat("logps"), values=cat("values"),
                   advantages=np.concatenate(advs), returns=np.concatenate(rets),
                   rewards=cat("rewards"), episode_starts=np.array(starts))


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = adv - adv.mean()
    std = adv.std()
    # equal advantages carry no signal; returning exact zeros keeps the policy still
    return adv / std if std > 1e-8 else np.zeros_like(adv)


def clipped_surrogate(logp_new: ad.Tensor, logp_old: np.ndarray, adv: np.ndarray, clip_eps: float) -> tuple[ad.Tensor, ad.Tensor]:
    """Per-sample ``min(r A, clip(r, 1-eps, 1+eps) A)`` and the probability ratio r."""
    ratio = ad.exp(logp_new - logp_old)
    clipped = ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    return ad.minimum(ratio * adv, clipped * adv), ratio


def ppo_update(policy: Policy, value: Mlp, params: dict[str, np.ndarray], batch: RolloutBatch,
               cfg: PpoConfig, optimizer: Adam, rng: np.random.Generator) -> dict:
    """Minibatched clipped-surrogate + value + entropy updates over ``cfg.epochs`` passes."""
    names = [k for k in params if k.startswith(policy.prefix + ".") or k.startswith(value.prefix + ".")]
    adv_all = normalize_advantages(batch.advantages)
    n = len(batch)
    mb_size = min(cfg.minibatch_size, n)
    history = []

    def loss_fn(p, idx):
        dist = policy.dist(p, batch.obs[idx])
        logp = dist.log_prob(batch.actions[idx])
        surr, ratio = clipped_surrogate(logp, batch.logp_old[idx], adv_all[idx], cfg.clip_eps)
        v = value(p, batch.obs[idx])[:, 0]
        v_loss = (v - batch.returns[idx]).square().mean()
        entropy = dist.entropy().mean()
        loss = -surr.mean() + cfg.vf_coef * v_loss - cfg.ent_coef * entropy
        r = ratio.value
        stats = {"surrogate": surr.value.mean(), "value_loss": v_loss.item(), "entropy": entropy.item(),
                 "approx_kl": float(np.mean(batch.logp_old[idx] - logp.value)),
                 "clip_fraction": float(np.mean(np.abs(r - 1.0) > cfg.clip_eps)),
                 "max_ratio_dev": float(np.max(np.abs(r - 1.0)))}
        return loss, stats

    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, mb_size):
            idx = perm[start:start + mb_size]
            _, stats = train_step(params, lambda p: loss_fn(p, idx), optimizer, names)
            history.append(stats)
    summary = {k: float(np.mean([h[k] for h in history])) for k in history[0]} if history else {}
    summary["minibatches"] = history
    return summary


def behavior_clone(policy: Policy, params: dict[str, np.ndarray], obs: np.ndarray, actions: np.ndarray,
                   steps: int, optimizer: Adam, rng: np.random.Generator, batch_size: int = 64) -> float:
    """Maximum-likelihood fit of ``policy`` to (obs, action) pairs; returns the final full-data NLL."""
    obs, actions = np.asarray(obs, dtype=np.float64), np.asarray(actions, dtype=np.float64)
    if actions.ndim == 1 and not policy.discrete:
        actions = actions[:, None]
    if not policy.discrete and actions.shape[-1] != policy.action_dim:
        raise ValueError(f"behavior_clone: action dim {actions.shape[-1]} != {policy.action_dim}")
    names = [k for k in params if k.startswith(policy.prefix + ".")]
    n = len(obs)
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        train_step(params, lambda p: (-policy.dist(p, obs[idx]).log_prob(actions[idx]).mean(), None),
                   optimizer, names)
    return policy_nll(policy, params, obs, actions)


def policy_nll(policy: Policy, params, obs, actions) -> float:
    dist = policy.dist(constants(params), np.asarray(obs, dtype=np.float64))
    return float(-dist.log_prob(actions).value.mean())


def collect_episode(env, policy: Policy, value: Mlp, params, rng: np.random.Generator, steps: int,
                    start_state=None, extra_obs: np.ndarray | None = None, greedy: bool = False) -> tuple[Episode, np.ndarray]:
    """Roll ``policy`` for exactly ``steps`` env steps; returns the episode and visited states.

    ``extra_obs`` (e.g. a latent) is appended to every observation fed to the policy.
    """
    p = constants(params)
    s = env.reset(start_state, task_index=env.task.index) if start_state is not None else env.observe()
    ep = Episode()
    states = [s]
    for _ in range(steps):
        obs = s if extra_obs is None else np.concatenate([s, extra_obs])
        dist = policy.dist(p, obs[None])
        if policy.discrete:
            a = int(dist.mode()[0] if greedy else dist.sample(rng)[0])
            logp = float(dist.log_prob(np.array([a])).value[0])
        else:
            a = dist.mode()[0] if greedy else dist.sample(rng).value[0]
            logp = float(dist.log_prob(a[None]).value[0])
        v = float(value(p, obs[None]).value[0, 0])
        s, r, _ = env.step(a)
        ep.obs.append(obs)
        ep.actions.append(env.action_to_vector(a))
        ep.rewards.append(r)
        ep.logps.append(logp)
        ep.values.append(v)
        states.append(s)
    return ep, np.array(states)
