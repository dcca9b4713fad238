"""Experiment configuration and its flat ``key = value`` file format."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .envs import ENV_KINDS
from .model import ModelConfig
from .rl import PpoConfig

# (H, H_mpc, H_e) per environment
ENV_HORIZONS = {"nav2d": (380, 5, 5), "wheeled": (950, 20, 10), "blocks": (950, 10, 10)}

# documentation for every key, written as comments into saved configs
KEY_DOCS = {
    "env": "environment kind: nav2d, wheeled or blocks",
    "seed": "master seed; every random stream derives from it",
    "iters": "outer iterations J",
    "H": "task episode length in env steps",
    "H_mpc": "latents per planned sequence",
    "H_e": "consecutive explorer trajectories per explorer run",
    "T": "trajectory (skill) length in env steps",
    "K": "planner candidate count",
    "d_z": "latent dimension",
    "gamma": "planner discount",
    "lam": "consistency reward scale",
    "beta": "KL weight of the VAE loss",
    "beta_warmup": "fraction of all VAE steps over which beta ramps linearly from 0",
    "vae_steps": "VAE gradient steps per iteration",
    "vae_lr": "VAE learning rate",
    "batch_size": "minibatch size for VAE and behavior cloning steps",
    "bc_epochs": "behavior cloning passes over the training sample per iteration",
    "bc_lr": "behavior cloning learning rate",
    "pd_episodes": "policy-decoder PPO rollouts per iteration",
    "explorer_runs": "explorer runs (each H_e trajectories) per iteration",
    "seed_runs": "explorer runs used to seed the buffer at iteration 0",
    "train_sample": "trajectories drawn (rho-mixed) for SeCTAR training each iteration",
    "rho": "fresh fraction of each replay sample",
    "buffer_capacity": "replay buffer capacity in trajectories",
    "pool_capacity": "start-state pool capacity",
    "coverage_episodes": "explorer episodes used for the coverage metric",
    "consistency_latents": "shared latents used for the consistency metric",
    "ppo_clip": "PPO clip epsilon",
    "ppo_epochs": "PPO epochs per update",
    "ppo_minibatch": "PPO minibatch size",
    "ppo_gamma": "policy-decoder PPO discount",
    "ppo_lambda": "policy-decoder GAE lambda",
    "ppo_vf_coef": "PPO value loss coefficient",
    "ppo_ent_coef": "PPO entropy bonus coefficient",
    "ppo_lr": "PPO learning rate",
    "small": "halve every network hidden size",
    "enc_hidden": "encoder LSTM width (0 keeps the profile default)",
    "enc_layers": "encoder LSTM layers (0 keeps the profile default)",
    "dec_hidden": "state decoder LSTM width (0 keeps the profile default)",
    "policy_hidden": "comma-separated policy MLP widths for both policies (empty keeps the profile default)",
    "goals": "goal file; empty uses the built-in layout",
    "jobs": "parallel contexts; 1 is the deterministic mode",
    "record_time": "write wall-clock seconds into metrics.csv (breaks bit-identical reruns)",
}


@dataclass
class ExperimentConfig:
    env: str = "nav2d"
    seed: int = 0
    iters: int = 30
    H: int = 380
    H_mpc: int = 5
    H_e: int = 5
    T: int = 19
    K: int = 2048
    d_z: int = 8
    gamma: float = 0.99
    lam: float = 1.0
    beta: float = 1.0
    beta_warmup: float = 0.2
    vae_steps: int = 500
    vae_lr: float = 1e-3
    batch_size: int = 32
    bc_epochs: int = 5
    bc_lr: float = 1e-3
    pd_episodes: int = 32
    explorer_runs: int = 4
    seed_runs: int = 4
    train_sample: int = 128
    rho: float = 0.5
    buffer_capacity: int = 50_000
    pool_capacity: int = 10_000
    coverage_episodes: int = 100
    consistency_latents: int = 50
    ppo_clip: float = 0.2
    ppo_epochs: int = 10
    ppo_minibatch: int = 64
    ppo_gamma: float = 0.99
    ppo_lambda: float = 0.95
    ppo_vf_coef: float = 0.5
    ppo_ent_coef: float = 0.01
    ppo_lr: float = 3e-4
    small: bool = False
    enc_hidden: int = 0
    enc_layers: int = 0
    dec_hidden: int = 0
    policy_hidden: str = ""
    goals: str = ""
    jobs: int = 1
    record_time: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.env not in ENV_KINDS:
            raise ValueError(f"env must be one of {ENV_KINDS}, got {self.env!r}")
        for key in ("H", "H_mpc", "H_e", "T", "K", "d_z", "batch_size", "train_sample", "jobs"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive, got {getattr(self, key)}")
        if self.iters < 0:
            raise ValueError(f"iters must be >= 0, got {self.iters}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")

    @classmethod
    def for_env(cls, env: str, **overrides) -> "ExperimentConfig":
        """Defaults with the per-environment horizons."""
        if env not in ENV_HORIZONS:
            raise ValueError(f"env must be one of {ENV_KINDS}, got {env!r}")
        H, H_mpc, H_e = ENV_HORIZONS[env]
        return cls(**{"env": env, "H": H, "H_mpc": H_mpc, "H_e": H_e, **overrides})

    def ppo(self) -> PpoConfig:
        return PpoConfig(clip_eps=self.ppo_clip, epochs=self.ppo_epochs, minibatch_size=self.ppo_minibatch,
                         gamma=self.ppo_gamma, gae_lambda=self.ppo_lambda, vf_coef=self.ppo_vf_coef,
                         ent_coef=self.ppo_ent_coef, lr=self.ppo_lr)

    def model_config(self, state_dim: int, action_dim: int, discrete: bool) -> ModelConfig:
        cfg = ModelConfig(state_dim, action_dim, discrete, d_z=self.d_z, T=self.T)
        if self.small:
            cfg = cfg.small()
        sizes = {k: getattr(self, k) for k in ("enc_hidden", "enc_layers", "dec_hidden") if getattr(self, k) > 0}
        if self.policy_hidden.strip():
            sizes["policy_hidden"] = tuple(int(v) for v in self.policy_hidden.split(","))
        return replace(cfg, **sizes)

    def dumps(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            lines.append(f"# {KEY_DOCS[k]}")
            lines.append(f"{k} = {_format(v)}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(kind, raw: str, key: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


FIELD_TYPES = {"str": str, "int": int, "float": float, "bool": bool}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines to typed overrides; ``#`` starts a comment."""
    types = {f.name: FIELD_TYPES[f.type] for f in fields(ExperimentConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _parse(types[key], raw, key)
    return out


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """File values over per-env defaults, then ``overrides`` (e.g. CLI flags) over both."""
    values = parse_config_text(Path(path).read_text(), str(path)) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    env = values.pop("env", "nav2d")
    return ExperimentConfig.for_env(env, **values)
