"""Outer training loop: MPC, exploration, explorer update, then SeCTAR model training."""
from __future__ import annotations

import csv
import time
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from .analysis import consistency_errors
from .buffer import ReplayBuffer, replay_sample, write_dataset
from .config import ExperimentConfig
from .envs import default_task, grid_entropy, make_env, read_goals, write_goals
from .explorer import Explorer, StartStatePool, explorer_rewards, final_states, run_explorer, update_explorer
from .model import SectarModel, Trajectory, bc_loss, consistency_rewards, stack_trajectories, vae_loss
from .mpc import PlannerConfig, mpc_episode
from .optim import Adam, train_step
from .rl import RolloutBatch, collect_episode, ppo_update

METRICS_FILE = "metrics.csv"


@dataclass
class MetricsRecord:
    iteration: int
    mpc_return: float
    vae_loss: float
    consistency_err: float
    coverage_entropy: float
    seconds: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list[str]:
        return [str(self.iteration)] + [repr(float(v)) for v in astuple(self)[1:]]


class Trainer:
    """All mutable training state: model, explorer, buffer, start-state pool, optimizers, rng.

    ``unsupervised`` skips MPC, always starts the explorer from the fixed initial state and
    trains only the trajectory VAE.
    """

    def __init__(self, cfg: ExperimentConfig, task=None, unsupervised: bool = False):
        self.cfg = cfg
        self.unsupervised = unsupervised
        self.rng = np.random.default_rng(cfg.seed)
        if task is None:
            task = read_goals(cfg.goals, cfg.env) if cfg.goals else default_task(cfg.env)
        self.task = task
        self.mpc_env = make_env(cfg.env, task)
        self.free_env = make_env(cfg.env)
        env = self.free_env
        self.model = SectarModel(cfg.model_config(env.state_dim, env.action_dim, env.discrete),
                                 seed=int(self.rng.integers(2**31)))
        mcfg = self.model.cfg
        self.explorer = Explorer.create(env.state_dim, env.action_dim, env.discrete, self.rng,
                                        mcfg.policy_hidden, mcfg.value_hidden, cfg.ppo())
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.pool = StartStatePool(cfg.pool_capacity)
        self.vae_opt = Adam(lr=cfg.vae_lr)
        self.bc_opt = Adam(lr=cfg.bc_lr)
        self.pd_opt = Adam(lr=cfg.ppo_lr)
        self.planner = PlannerConfig(K=cfg.K, H_mpc=cfg.H_mpc, gamma=cfg.gamma, jobs=cfg.jobs)
        self.iteration = 0
        self.vae_step = 0
        self.seeded = False

    # -- data collection -------------------------------------------------------
    def _explore(self, runs: int) -> list:
        """``runs`` explorer runs; every T-step trajectory enters the buffer."""
        cfg = self.cfg
        collected = []
        for _ in range(runs):
            start = self.free_env.default_state() if self.unsupervised else None
            pool = None if self.unsupervised else self.pool
            for ep, states in run_explorer(self.free_env, self.explorer, pool, cfg.H_e, cfg.T, self.rng, start):
                traj = Trajectory(states, np.array(ep.actions))
                self.buffer.add(traj)
                collected.append((ep, traj))
        return collected

    def _update_explorer(self, collected: list) -> None:
        if collected:
            states = np.stack([t.states for _, t in collected])
            rewards = explorer_rewards(self.model, states, self.rng)
            update_explorer(self.explorer, [ep for ep, _ in collected], rewards, self.rng)

    def seed_buffer(self) -> None:
        """Iteration 0: fill the buffer with rollouts of the untrained explorer."""
        self.buffer.start_iteration(0)
        self._explore(self.cfg.seed_runs)
        self.seeded = True

    # -- model training ------------------------------------------------------------
    def _beta(self) -> float:
        total = max(1, self.cfg.iters * self.cfg.vae_steps)
        warm = self.cfg.beta_warmup * total
        return self.cfg.beta * (min(1.0, self.vae_step / warm) if warm > 0 else 1.0)

    def train_vae(self, states: np.ndarray) -> float:
        cfg, model = self.cfg, self.model
        names = model.names("enc", "dec")
        losses = []
        for _ in range(cfg.vae_steps):
            idx = self.rng.choice(len(states), size=min(cfg.batch_size, len(states)), replace=False)
            beta = self._beta()
            loss, _ = train_step(model.params, lambda p: vae_loss(model, p, states[idx], beta, self.rng),
                                 self.vae_opt, names)
            losses.append(loss)
            self.vae_step += 1
        return float(np.mean(losses)) if losses else float("nan")

    def train_bc(self, states: np.ndarray, actions: np.ndarray) -> None:
        cfg, model = self.cfg, self.model
        names = model.names("enc", "pd")
        n = len(states)
        for _ in range(cfg.bc_epochs):
            perm = self.rng.permutation(n)
            for lo in range(0, n, cfg.batch_size):
                idx = perm[lo:lo + cfg.batch_size]
                train_step(model.params, lambda p: bc_loss(model, p, states[idx], actions[idx], self.rng),
                           self.bc_opt, names)

    def finetune_policy_decoder(self, states: np.ndarray) -> dict:
        """PPO on consistency rewards; each rollout starts at a sampled trajectory's s0 with a posterior z."""
        cfg, model = self.cfg, self.model
        if cfg.pd_episodes < 1:
            return {}
        pick = self.rng.choice(len(states), size=cfg.pd_episodes, replace=len(states) < cfg.pd_episodes)
        zs = model.encode(states[pick]).sample(self.rng).value
        episodes, rolled = [], []
        for i, z in zip(pick, zs):
            ep, visited = collect_episode(self.free_env, model.policy, model.value, model.params, self.rng,
                                          cfg.T, start_state=states[i, 0], extra_obs=z)
            episodes.append(ep)
            rolled.append(visited)
        rewards = consistency_rewards(model, np.array(rolled), zs) * (cfg.lam / model.cfg.state_dim)
        for ep, r in zip(episodes, rewards):
            ep.rewards = list(r)
            ep.last_value = 0.0
        ppo = cfg.ppo()
        batch = RolloutBatch.from_episodes(episodes, ppo.gamma, ppo.gae_lambda)
        return ppo_update(model.policy, model.value, model.params, batch, ppo, self.pd_opt, self.rng)

    def consistency_metric(self, sample: list[Trajectory]) -> float:
        n = min(self.cfg.consistency_latents, len(sample))
        states = np.stack([t.states for t in sample[:n]])
        zs = self.model.encode(states).mean.value
        return float(consistency_errors(self.free_env, self.model, zs, states[:, 0], self.rng).mean())

    def coverage_metric(self) -> float:
        if self.cfg.coverage_episodes < 1:
            return float("nan")
        finals = final_states(self.free_env, self.explorer, self.cfg.T, self.cfg.coverage_episodes, self.rng)
        return grid_entropy(self.free_env.agent_xy(finals))

    # -- one outer iteration -------------------------------------------------------
    def train_iteration(self) -> MetricsRecord:
        if not self.seeded:
            self.seed_buffer()
        cfg = self.cfg
        t0 = time.perf_counter()
        self.iteration += 1
        it = self.iteration
        try:
            mpc_return = float("nan")
            if not self.unsupervised:
                result = mpc_episode(self.mpc_env, self.model, self.planner, cfg.H, self.rng)
                mpc_return = result.total_reward
                self.pool.add(result.states, self.free_env)
            self.buffer.start_iteration(it)
            collected = self._explore(cfg.explorer_runs)
            # the full loop rewards the explorer before model training; the unsupervised
            # protocol fits the model to the fresh data first
            if not self.unsupervised:
                self._update_explorer(collected)
            sample = replay_sample(self.buffer, cfg.train_sample, cfg.rho, self.rng)
            states, actions = stack_trajectories(sample)
            vae = self.train_vae(states)
            if self.unsupervised:
                self._update_explorer(collected)
            consistency = float("nan")
            if not self.unsupervised:
                self.train_bc(states, actions)
                self.finetune_policy_decoder(states)
                consistency = self.consistency_metric(sample)
            coverage = self.coverage_metric()
        except Exception as exc:
            raise RuntimeError(f"training iteration {it} failed: {exc}") from exc
        seconds = time.perf_counter() - t0
        self.last_seconds = seconds
        return MetricsRecord(it, mpc_return, vae, consistency, coverage, seconds if cfg.record_time else 0.0)

    # -- persistence ---------------------------------------------------------------
    def save(self, out: str | Path) -> None:
        out = Path(out)
        meta = {"env": self.cfg.env, "iteration": self.iteration}
        self.model.save(out / "model.ckpt", extra=self.explorer.params, meta=meta)
        write_dataset(out / "buffer.strj", self.buffer.trajectories())


def run_training(cfg: ExperimentConfig, out: str | Path, unsupervised: bool = False,
                 log=None) -> tuple[Trainer, list[MetricsRecord]]:
    """Full run: writes config, goals, metrics.csv, timing.csv, the checkpoint and the final buffer."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, unsupervised=unsupervised)
    cfg.save(out / "config.txt")
    write_goals(out / "goals.txt", trainer.task, cfg.env)
    records = []
    with open(out / METRICS_FILE, "w", newline="") as mf, open(out / "timing.csv", "w", newline="") as tf:
        metrics, timing = csv.writer(mf), csv.writer(tf)
        metrics.writerow(MetricsRecord.columns())
        timing.writerow(["iteration", "seconds"])
        mf.flush()
        for _ in range(cfg.iters):
            rec = trainer.train_iteration()
            records.append(rec)
            metrics.writerow(rec.row())
            timing.writerow([rec.iteration, f"{trainer.last_seconds:.3f}"])
            mf.flush()
            tf.flush()
            if log:
                log(rec)
    trainer.save(out)
    return trainer, records


def load_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]
