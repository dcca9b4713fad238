"""Encoder, state decoder and policy decoder, and the losses that tie them together."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .nn import BiLSTMEncoder, DiagGaussian, Mlp, Params, Policy, StateDecoder, constants, kl_diag_gaussians


@dataclass(frozen=True)
class Trajectory:
    """``states`` has T+1 rows (s_0..s_T), ``actions`` has T rows."""

    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        actions = np.asarray(self.actions, dtype=np.float64)
        if states.ndim != 2 or actions.ndim != 2 or len(states) != len(actions) + 1:
            raise ValueError(f"trajectory needs T+1 states and T actions, got {states.shape} and {actions.shape}")
        if not (np.isfinite(states).all() and np.isfinite(actions).all()):
            raise ValueError("trajectory contains non-finite values")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    @property
    def T(self) -> int:
        return len(self.actions)


def stack_trajectories(trajs) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([t.states for t in trajs]), np.stack([t.actions for t in trajs])


@dataclass(frozen=True)
class ModelConfig:
    state_dim: int
    action_dim: int
    discrete: bool
    d_z: int = 8
    T: int = 19
    enc_hidden: int = 300
    enc_layers: int = 2
    dec_hidden: int = 256
    policy_hidden: tuple[int, ...] = (400, 300, 200)
    value_hidden: tuple[int, ...] = (64, 64)

    def small(self) -> "ModelConfig":
        """Every hidden size halved."""
        return replace(self, enc_hidden=self.enc_hidden // 2, dec_hidden=self.dec_hidden // 2,
                       policy_hidden=tuple(h // 2 for h in self.policy_hidden),
                       value_hidden=tuple(h // 2 for h in self.value_hidden))

    def to_meta(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in meta:
                continue
            raw = meta[f.name]
            if f.name == "discrete":
                kwargs[f.name] = raw in ("True", "true", "1")
            elif f.name.endswith("hidden") and f.name not in ("enc_hidden", "dec_hidden"):
                kwargs[f.name] = tuple(int(v) for v in raw.split(",") if v)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


class SectarModel:
    """Parameter bundle of encoder ``enc.*``, state decoder ``dec.*``, policy decoder ``pd.*``
    and the policy decoder's value net ``pd_vf.*``."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        s, a, dz = cfg.state_dim, cfg.action_dim, cfg.d_z
        self.encoder = BiLSTMEncoder("enc", s, cfg.enc_hidden, cfg.enc_layers, dz)
        self.decoder = StateDecoder("dec", dz, s, cfg.dec_hidden)
        self.policy = Policy("pd", s + dz, a, cfg.discrete, cfg.policy_hidden)
        self.value = Mlp("pd_vf", (s + dz, *cfg.value_hidden, 1))
        if params is None:
            rng = np.random.default_rng(seed)
            params = {**self.encoder.init(rng), **self.decoder.init(rng),
                      **self.policy.init(rng), **self.value.init(rng, out_scale=0.0)}
        self.params = params

    @property
    def d_z(self) -> int:
        return self.cfg.d_z

    @property
    def T(self) -> int:
        return self.cfg.T

    # parameter groups
    def names(self, *prefixes: str) -> list[str]:
        return [k for k in self.params if k.split(".", 1)[0] in prefixes]

    def const(self) -> dict[str, ad.Tensor]:
        return constants(self.params)

    def zeros_like(self) -> "SectarModel":
        return SectarModel(self.cfg, {k: np.zeros_like(v) for k, v in self.params.items()})

    # -- inference (no tape) -------------------------------------------------
    def encode(self, states: np.ndarray) -> DiagGaussian:
        """Posterior for one trajectory (T+1, S) or a batch (B, T+1, S)."""
        states = np.asarray(states, dtype=np.float64)
        single = states.ndim == 2
        if states.shape[-1] != self.cfg.state_dim:
            raise ValueError(f"encode: state dim {states.shape[-1]} != {self.cfg.state_dim}")
        q = self.encoder(self.const(), states[None] if single else states)
        return DiagGaussian(q.mean.value[0], q.log_std.value[0]) if single else q

    def decode_states(self, z: np.ndarray, s0: np.ndarray, T: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Mean states (T+1, S) from ``s0`` and per-step log-std (T, S); batched if inputs are 2-D."""
        z, s0 = np.asarray(z, dtype=np.float64), np.asarray(s0, dtype=np.float64)
        single = z.ndim == 1
        means, log_std = self.decoder(self.const(), np.atleast_2d(z), np.atleast_2d(s0), T or self.cfg.T)
        if single:
            return means.value[0], log_std.value[0]
        return means.value, log_std.value

    def decode_means(self, zs: np.ndarray, s0s: np.ndarray) -> np.ndarray:
        return self.decode_states(zs, s0s)[0]

    def policy_action(self, s: np.ndarray, z: np.ndarray):
        obs = np.concatenate([np.asarray(s, dtype=np.float64), np.asarray(z, dtype=np.float64)], axis=-1)
        return self.policy.dist(self.const(), np.atleast_2d(obs))

    def act(self, s: np.ndarray, z: np.ndarray, step: int, rng: np.random.Generator, greedy: bool = False):
        dist = self.policy_action(s, z)
        a = dist.mode() if greedy else (dist.sample(rng) if self.cfg.discrete else dist.sample(rng).value)
        return int(a[0]) if self.cfg.discrete else np.asarray(a)[0]

    # -- persistence -----------------------------------------------------------
    def save(self, path: str | Path, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
        path = Path(path)
        checkpoint.save(path, {**self.params, **(extra or {})})
        checkpoint.save_meta(path.with_suffix(".meta"), {**self.cfg.to_meta(), **(meta or {})})

    @classmethod
    def load(cls, path: str | Path) -> tuple["SectarModel", dict[str, np.ndarray], dict[str, str]]:
        """Returns the model, any extra (non-model) parameters, and the metadata record."""
        path = Path(path)
        meta = checkpoint.load_meta(path.with_suffix(".meta"))
        params = checkpoint.load(path)
        model = cls(ModelConfig.from_meta(meta), params={})
        prefixes = ("enc", "dec", "pd", "pd_vf")
        model.params = {k: v for k, v in params.items() if k.split(".", 1)[0] in prefixes}
        extra = {k: v for k, v in params.items() if k not in model.params}
        return model, extra, meta


# -- losses (taped) ------------------------------------------------------------

def _tile_time(z: ad.Tensor, T: int) -> ad.Tensor:
    b, d = z.shape
    return ad.reshape(z, (b, 1, d)) + np.zeros((b, T, d))


def recon_log_prob(model: SectarModel, p: Params, z, states) -> ad.Tensor:
    """log p_SD(s_1..s_T | z, s_0) per trajectory, shape (B,)."""
    states = np.asarray(states)
    T = states.shape[1] - 1
    means, log_std = model.decoder(p, z, states[:, 0], T)
    return DiagGaussian(means[:, 1:], log_std).log_prob(states[:, 1:]).sum(axis=-1)


def vae_loss(model: SectarModel, p: Params, states: np.ndarray, beta: float,
             rng: np.random.Generator) -> tuple[ad.Tensor, dict[str, float]]:
    """Negative ELBO averaged over the batch, one reparameterised z per trajectory."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 3 or len(states) == 0:
        raise ValueError(f"vae_loss: need a nonempty (B, T+1, S) batch, got {states.shape}")
    q = model.encoder(p, states)
    z = q.sample(rng)
    nll = -recon_log_prob(model, p, z, states).mean()
    kl = kl_diag_gaussians(q, DiagGaussian.standard(model.cfg.d_z)).mean()
    return nll + beta * kl, {"nll": nll.item(), "kl": kl.item()}


def bc_loss(model: SectarModel, p: Params, states: np.ndarray, actions: np.ndarray,
            rng: np.random.Generator) -> tuple[ad.Tensor, dict[str, float]]:
    """Mean per-step negative log-likelihood of the recorded actions under pi(a | s, z), z ~ q(z | tau).

    z is reparameterised so the encoder receives gradients.
    """
    states, actions = np.asarray(states, dtype=np.float64), np.asarray(actions, dtype=np.float64)
    if actions.shape[-1] != model.cfg.action_dim:
        raise ValueError(f"bc_loss: action dim {actions.shape[-1]} != {model.cfg.action_dim}")
    b, T = actions.shape[:2]
    z = model.encoder(p, states).sample(rng)
    obs = ad.concat([states[:, :T], _tile_time(z, T)], axis=-1)
    obs = ad.reshape(obs, (b * T, obs.shape[-1]))
    dist = model.policy.dist(p, obs)
    nll = -dist.log_prob(actions.reshape(b * T, -1)).mean()
    return nll, {"nll": nll.item()}


def consistency_rewards(model: SectarModel, states: np.ndarray, zs: np.ndarray) -> np.ndarray:
    """Per-step log-likelihood of rollouts under the state decoder.

    ``states`` (N, T+1, S) are policy rollouts, ``zs`` (N, d_z) their latents.
    Entry [n, t] is log N(s_{t+1}; decoder step-t Gaussian) summed over state dims.
    """
    states = np.asarray(states, dtype=np.float64)
    T = states.shape[1] - 1
    if T != model.cfg.T:
        raise ValueError(f"consistency reward: rollout length {T} != model T {model.cfg.T}")
    means, log_std = model.decoder(model.const(), np.asarray(zs, dtype=np.float64), states[:, 0], T)
    dist = DiagGaussian(means[:, 1:], log_std)
    return dist.log_prob(states[:, 1:]).value


def consistency_reward(model: SectarModel, states: np.ndarray, z: np.ndarray) -> np.ndarray:
    return consistency_rewards(model, np.asarray(states)[None], np.asarray(z)[None])[0]
