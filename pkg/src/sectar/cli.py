"""Command-line entry point: ``sectar {train,explore,plan,eval,interp,coverage}``.

Exit status is 0 on success, 1 on a usage error and 2 when the command itself fails.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .analysis import evaluate, interpolate_latents
from .buffer import read_dataset
from .config import load_config
from .envs import ENV_KINDS, default_task, grid_entropy, make_env, occupancy, read_goals
from .explorer import Explorer, final_states
from .model import SectarModel
from .mpc import PlannerConfig, mpc_episode
from .trainer import run_training


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--env", choices=ENV_KINDS)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--goals", type=Path, help="goal file (x y per line; blocks: block x y)")
    p.add_argument("--jobs", type=int, help="parallel contexts; 1 is deterministic")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sectar", description="Trajectory-VAE skills, latent MPC and exploration.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, help_ in (("train", "full training loop"), ("explore", "unsupervised exploration")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--iters", type=int, help="outer iterations J")
        p.add_argument("--small", action="store_true", default=None, help="desk-scale network sizes")
        p.add_argument("--record-time", action="store_true", default=None,
                       help="write wall-clock seconds to metrics.csv")

    p = sub.add_parser("plan", help="one MPC episode from a checkpoint")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--K", type=int, help="candidate count")
    p.add_argument("--H-mpc", dest="H_mpc", type=int, help="latents per candidate")
    p.add_argument("--H", type=int, help="episode length")

    p = sub.add_parser("eval", help="mean MPC return over several episodes")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--K", type=int)
    p.add_argument("--H-mpc", dest="H_mpc", type=int)
    p.add_argument("--H", type=int)

    p = sub.add_parser("interp", help="decode and execute interpolated latents")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, help="STRJ1 dataset (default: buffer.strj next to the model)")
    p.add_argument("--pair", type=int, nargs=2, default=(0, 1), metavar=("A", "B"))
    p.add_argument("--steps", type=int, default=8, help="number of interpolants")

    p = sub.add_parser("coverage", help="final-state occupancy histogram of the explorer")
    _common(p)
    p.add_argument("--model", type=Path, help="checkpoint holding explorer parameters (default: untrained)")
    p.add_argument("--episodes", type=int, default=500)
    p.add_argument("--small", action="store_true", default=None)
    return parser


def _config(args, **extra):
    overrides = {k: getattr(args, k, None) for k in ("env", "seed", "jobs", "iters", "small", "record_time")}
    if getattr(args, "goals", None) is not None:
        overrides["goals"] = str(args.goals)
    overrides.update(extra)
    return load_config(args.config, **overrides)


def _load_model(args):
    model, extra, meta = SectarModel.load(args.model)
    env_kind = args.env or meta.get("env", "nav2d")
    cfg = _config(args, env=env_kind)
    task = read_goals(args.goals, env_kind) if args.goals else default_task(env_kind)
    return model, extra, cfg, task


def _planner(args, cfg) -> PlannerConfig:
    return PlannerConfig(K=args.K or cfg.K, H_mpc=args.H_mpc or cfg.H_mpc, gamma=cfg.gamma, jobs=cfg.jobs)


def _write_states(path: Path, states: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step"] + [f"s{i}" for i in range(states.shape[1])])
        for t, s in enumerate(states):
            w.writerow([t] + [repr(float(v)) for v in s])


def cmd_train(args, unsupervised=False) -> int:
    cfg = _config(args)

    def log(rec):
        print(f"iter {rec.iteration}: mpc_return={rec.mpc_return:.3f} vae_loss={rec.vae_loss:.4f} "
              f"consistency={rec.consistency_err:.4f} coverage={rec.coverage_entropy:.3f}", flush=True)

    trainer, _ = run_training(cfg, args.out, unsupervised=unsupervised, log=log)
    if unsupervised:
        _write_coverage(args.out / "coverage.csv", trainer.free_env, trainer.explorer, cfg.T,
                        max(cfg.coverage_episodes, 1), trainer.rng)
    print(f"wrote {args.out}")
    return 0


def _write_coverage(path: Path, env, explorer, T: int, episodes: int, rng) -> float:
    xy = env.agent_xy(final_states(env, explorer, T, episodes, rng))
    counts = occupancy(xy).ravel()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell", "count"])
        for cell, c in enumerate(counts):
            w.writerow([cell, int(c)])
    return grid_entropy(xy)


def cmd_plan(args) -> int:
    model, _, cfg, task = _load_model(args)
    env = make_env(cfg.env, task)
    rng = np.random.default_rng(cfg.seed)
    result = mpc_episode(env, model, _planner(args, cfg), args.H or cfg.H, rng)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_states(args.out / "plan_states.csv", result.states)
    print(f"return {result.total_reward}")
    return 0


def cmd_eval(args) -> int:
    model, _, cfg, task = _load_model(args)
    env = make_env(cfg.env, task)
    rng = np.random.default_rng(cfg.seed)
    returns = evaluate(env, model, _planner(args, cfg), args.H or cfg.H, args.episodes, rng)
    print(f"mean return {returns.mean()} over {len(returns)} episodes")
    return 0


def cmd_interp(args) -> int:
    if args.steps < 2:
        raise UsageError("interp: --steps must be at least 2")
    model, _, cfg, _ = _load_model(args)
    data = args.data or args.model.with_name("buffer.strj")
    trajs = read_dataset(data)
    a, b = args.pair
    if not (0 <= a < len(trajs) and 0 <= b < len(trajs)):
        raise ValueError(f"interp: pair {a} {b} outside dataset of {len(trajs)} trajectories")
    rng = np.random.default_rng(cfg.seed)
    items = interpolate_latents(make_env(cfg.env), model, trajs[a], trajs[b], args.steps, rng)
    args.out.mkdir(parents=True, exist_ok=True)
    for i, item in enumerate(items):
        dim = item.predicted.shape[1]
        with open(args.out / f"interp_{i:02d}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step"] + [f"pred{j}" for j in range(dim)] + [f"roll{j}" for j in range(dim)])
            for t, (p, r) in enumerate(zip(item.predicted, item.rollout)):
                w.writerow([t] + [repr(float(v)) for v in (*p, *r)])
    print(f"mean consistency error {np.mean([it.error for it in items]):.4f} over {len(items)} interpolants")
    return 0


def cmd_coverage(args) -> int:
    cfg = _config(args)
    env = make_env(cfg.env)
    rng = np.random.default_rng(cfg.seed)
    if args.model:
        model, extra, _ = SectarModel.load(args.model)
        mcfg = model.cfg
    else:
        mcfg, extra = cfg.model_config(env.state_dim, env.action_dim, env.discrete), None
    explorer = Explorer.create(env.state_dim, env.action_dim, env.discrete, rng, mcfg.policy_hidden, mcfg.value_hidden)
    if extra:
        explorer.params.update({k: v for k, v in extra.items() if k.startswith("explorer")})
    args.out.mkdir(parents=True, exist_ok=True)
    h = _write_coverage(args.out / "coverage.csv", env, explorer, cfg.T, args.episodes, rng)
    print(f"coverage entropy {h:.4f}")
    return 0


COMMANDS = {"train": cmd_train, "explore": lambda a: cmd_train(a, unsupervised=True), "plan": cmd_plan,
            "eval": cmd_eval, "interp": cmd_interp, "coverage": cmd_coverage}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except Exception as exc:
        print(f"sectar: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
