"""Random-shooting model-predictive control over sequences of latents.

Any model exposing ``d_z``, ``T``, ``decode_means(zs, s0s)`` and
``act(s, z, step, rng, greedy)`` can be planned with.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .envs import Env, WaypointTask, eval_reward_batch


@dataclass(frozen=True)
class PlannerConfig:
    K: int = 2048
    H_mpc: int = 5
    gamma: float = 0.99
    # candidates decoded per batch; bounds peak memory only
    chunk: int = 512
    # threads evaluating chunks; results do not depend on it
    jobs: int = 1

    def __post_init__(self):
        if self.K < 1 or self.H_mpc < 1 or self.chunk < 1 or self.jobs < 1:
            raise ValueError(f"planner needs K, H_mpc, chunk, jobs >= 1 "
                             f"(got {self.K}, {self.H_mpc}, {self.chunk}, {self.jobs})")


@dataclass
class Plan:
    latents: np.ndarray  # (H_mpc, d_z)
    states: np.ndarray  # (H_mpc * T + 1, S) chained mean states
    predicted_return: float
    index: int = 0


def simulate_batch(model, zs: np.ndarray, s0: np.ndarray, task: WaypointTask,
                   gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Chain decoded segments for candidates ``zs`` (K, H, d_z) from ``s0``.

    Returns the chained mean states (K, H*T+1, S) and each candidate's discounted return.
    """
    zs = np.asarray(zs, dtype=np.float64)
    k, h = zs.shape[:2]
    start = np.repeat(np.asarray(s0, dtype=np.float64)[None], k, axis=0)
    pieces = [start[:, None]]
    for i in range(h):
        seg = model.decode_means(zs[:, i], start)
        pieces.append(seg[:, 1:])
        # next segment is seeded with this segment's final mean state
        start = seg[:, -1]
    states = np.concatenate(pieces, axis=1)
    returns, _ = eval_reward_batch(task, states, gamma)
    return states, returns


def simulate_latents(model, zs: np.ndarray, s0: np.ndarray, task: WaypointTask, gamma: float = 0.99) -> Plan:
    zs = np.asarray(zs, dtype=np.float64)
    if zs.ndim != 2 or zs.shape[1] != model.d_z:
        raise ValueError(f"simulate_latents: expected (H, {model.d_z}) latents, got {zs.shape}")
    states, returns = simulate_batch(model, zs[None], s0, task, gamma)
    return Plan(zs, states[0], float(returns[0]))


def plan(model, s0: np.ndarray, task: WaypointTask, cfg: PlannerConfig, rng: np.random.Generator,
         candidates: np.ndarray | None = None) -> Plan:
    """Best of ``cfg.K`` latent sequences drawn from the prior (or of ``candidates`` if given).

    Draws are row-major, so the first K candidates of a 2K draw equal a K draw from the same seed.
    """
    if candidates is None:
        candidates = rng.standard_normal((cfg.K, cfg.H_mpc, model.d_z))
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.ndim != 3 or candidates.shape[2] != model.d_z:
        raise ValueError(f"plan: candidates must be (K, H, {model.d_z}), got {candidates.shape}")
    starts = range(0, len(candidates), cfg.chunk)

    def run(lo):
        return simulate_batch(model, candidates[lo:lo + cfg.chunk], s0, task, cfg.gamma)

    if cfg.jobs > 1 and len(starts) > 1:
        with ThreadPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(lo) for lo in starts]
    best_i, best_r, best_states = -1, -np.inf, None
    for lo, (states, returns) in zip(starts, results):
        i = int(np.argmax(returns))  # first maximum, so ties go to the lowest index
        if returns[i] > best_r:
            best_i, best_r, best_states = lo + i, float(returns[i]), states[i]
    return Plan(candidates[best_i], best_states, best_r, best_i)


@dataclass
class MpcResult:
    states: np.ndarray  # (H+1, S) executed states, also the visited-state log
    actions: np.ndarray  # (H, A) storage-form actions
    total_reward: float
    plans: list = field(default_factory=list)
    latents: np.ndarray | None = None  # latent executed in each meta-step

    @property
    def visited(self) -> np.ndarray:
        return self.states


def mpc_episode(env: Env, model, cfg: PlannerConfig, H: int, rng: np.random.Generator,
                start_state: np.ndarray | None = None, greedy: bool = True) -> MpcResult:
    """Plan, run the first latent's policy for T steps from the true state, replan; H steps total.

    A final segment shorter than T is truncated. Planning sees the env's live goal progress.
    """
    if H < 1:
        raise ValueError(f"mpc_episode: H must be positive, got {H}")
    s = env.reset(start_state)
    T = model.T
    states, actions, plans, used = [s], [], [], []
    total = 0.0
    for seg_start in range(0, H, T):
        p = plan(model, s, env.task, cfg, rng)
        plans.append(p)
        z = p.latents[0]
        used.append(z)
        for t in range(min(T, H - seg_start)):
            a = model.act(s, z, t, rng, greedy)
            s, r, _ = env.step(a)
            total += r
            states.append(s)
            actions.append(env.action_to_vector(a))
    return MpcResult(np.array(states), np.array(actions), total, plans, np.array(used))
