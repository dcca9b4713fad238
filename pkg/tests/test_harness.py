import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ScriptedOracle, one_hot_latent
from sectar.analysis import consistency_errors, interpolate_latents, rollout_latent
from sectar.buffer import DATASET_MAGIC, ReplayBuffer, read_dataset, replay_sample, write_dataset
from sectar.config import KEY_DOCS, ExperimentConfig, load_config, parse_config_text
from sectar.envs import Nav2d
from sectar.model import Trajectory
from sectar.trainer import MetricsRecord, Trainer, load_metrics, run_training


def tiny_cfg(env="nav2d", **kw):
    base = dict(iters=2, H=12, K=16, H_mpc=2, T=5, H_e=2, vae_steps=3, batch_size=8, bc_epochs=1,
                pd_episodes=4, explorer_runs=1, seed_runs=1, train_sample=8, coverage_episodes=5,
                consistency_latents=4, ppo_epochs=1, ppo_minibatch=16, enc_hidden=8, enc_layers=1,
                dec_hidden=8, policy_hidden="8")
    base.update(kw)
    return ExperimentConfig.for_env(env, **base)


def traj(value, T=3):
    return Trajectory(np.full((T + 1, 2), float(value)), np.zeros((T, 4)))


# -- config --------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.for_env("wheeled", seed=7, rho=0.25, small=True, policy_hidden="32,16")
    cfg.save(tmp_path / "c.txt")
    assert load_config(tmp_path / "c.txt") == cfg
    text = (tmp_path / "c.txt").read_text()
    assert all(f"# {doc}" in text for doc in KEY_DOCS.values())


def test_config_per_env_horizons_and_overrides(tmp_path):
    assert (ExperimentConfig.for_env("blocks").H, ExperimentConfig.for_env("blocks").H_mpc) == (950, 10)
    (tmp_path / "c.txt").write_text("env = wheeled  # trailing comment\n\n# full-line comment\nK = 64\n")
    cfg = load_config(tmp_path / "c.txt", K=128, seed=None)
    assert cfg.env == "wheeled" and cfg.H == 950 and cfg.K == 128 and cfg.seed == 0


@pytest.mark.parametrize("text, match", [("bogus = 1", "unknown"), ("K = many", "cannot parse"),
                                         ("K 5", "expected"), ("small = maybe", "cannot parse"),
                                         ("rho = 1.5", "rho"), ("env = moon", "env")])
def test_config_errors(tmp_path, text, match):
    (tmp_path / "c.txt").write_text(text + "\n")
    with pytest.raises(ValueError, match=match):
        load_config(tmp_path / "c.txt")


def test_model_config_overrides():
    cfg = ExperimentConfig(small=True, dec_hidden=40, policy_hidden="12,6")
    m = cfg.model_config(2, 4, True)
    assert (m.enc_hidden, m.dec_hidden, m.policy_hidden) == (150, 40, (12, 6))
    assert parse_config_text("record_time = yes")["record_time"] is True


# -- replay buffer -------------------------------------------------------------

def filled_buffer(n_old=20, n_fresh=20, capacity=1000):
    buf = ReplayBuffer(capacity)
    buf.start_iteration(0)
    buf.extend(traj(i) for i in range(n_old))
    buf.start_iteration(1)
    buf.extend(traj(100 + i) for i in range(n_fresh))
    return buf


def is_fresh(t):
    return t.states[0, 0] >= 100


@pytest.mark.parametrize("rho, fresh", [(0.0, 0), (1.0, 10), (0.5, 5), (0.25, 3)])
def test_replay_mix(rho, fresh):
    sample = replay_sample(filled_buffer(), 10, rho, np.random.default_rng(0))
    assert len(sample) == 10 and sum(map(is_fresh, sample)) == fresh
    assert len({t.states[0, 0] for t in sample}) == 10  # no repeats


def test_replay_tops_up_short_pools():
    sample = replay_sample(filled_buffer(n_fresh=2), 10, 1.0, np.random.default_rng(1))
    assert sum(map(is_fresh, sample)) == 2 and len({t.states[0, 0] for t in sample}) == 10
    sample = replay_sample(filled_buffer(n_old=1, n_fresh=2), 10, 0.5, np.random.default_rng(1))
    assert len(sample) == 10


def test_replay_is_uniform_within_pool():
    buf, rng = filled_buffer(n_old=10, n_fresh=10), np.random.default_rng(2)
    counts = np.zeros(10)
    for _ in range(2000):
        for t in replay_sample(buf, 4, 0.5, rng):
            if is_fresh(t):
                counts[int(t.states[0, 0]) - 100] += 1
    # each fresh item is drawn with probability 2/10 per sample
    expected = 2000 * 0.2
    assert np.all(np.abs(counts - expected) < 4 * math.sqrt(expected * 0.8))


def test_buffer_fifo_and_iteration_order():
    buf = ReplayBuffer(3)
    buf.extend(traj(i) for i in range(5))
    assert [t.states[0, 0] for t in buf.trajectories()] == [2, 3, 4]
    buf.start_iteration(2)
    with pytest.raises(ValueError):
        buf.start_iteration(1)
    with pytest.raises(ValueError):
        replay_sample(ReplayBuffer(), 4, 0.5, np.random.default_rng(0))


# -- dataset file --------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(count=st.integers(0, 5), T=st.integers(1, 6), s=st.integers(1, 4), a=st.integers(1, 3),
       seed=st.integers(0, 1000))
def test_dataset_round_trip(tmp_path_factory, count, T, s, a, seed):
    rng = np.random.default_rng(seed)
    trajs = [Trajectory(rng.normal(size=(T + 1, s)), rng.normal(size=(T, a))) for _ in range(count)]
    path = tmp_path_factory.mktemp("d") / "x.strj"
    write_dataset(path, trajs)
    back = read_dataset(path)
    assert len(back) == count
    for x, y in zip(trajs, back):
        assert x.states.tobytes() == y.states.tobytes() and x.actions.tobytes() == y.actions.tobytes()


def test_dataset_layout_and_errors(tmp_path):
    write_dataset(tmp_path / "e.strj", [])
    assert (tmp_path / "e.strj").read_bytes() == DATASET_MAGIC + struct.pack("<4I", 0, 0, 0, 0)
    t = Trajectory(np.arange(6.0).reshape(3, 2), np.array([[1.0], [2.0]]))
    write_dataset(tmp_path / "one.strj", [t])
    raw = (tmp_path / "one.strj").read_bytes()
    assert raw[6:22] == struct.pack("<4I", 1, 2, 2, 1)
    assert struct.unpack("<8d", raw[22:]) == (0, 1, 2, 3, 4, 5, 1, 2)
    (tmp_path / "bad.strj").write_bytes(b"NOPE\n")
    with pytest.raises(ValueError, match="magic"):
        read_dataset(tmp_path / "bad.strj")
    (tmp_path / "cut.strj").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="bytes"):
        read_dataset(tmp_path / "cut.strj")
    with pytest.raises(ValueError):
        write_dataset(tmp_path / "mix.strj", [t, traj(0, T=4)])


# -- analysis ------------------------------------------------------------------

def test_consistent_model_has_zero_error():
    oracle = ScriptedOracle(T=6)
    zs = np.array([one_hot_latent(i) for i in range(8)])
    s0s = np.random.default_rng(3).uniform(-0.5, 0.5, size=(8, 2))
    errs = consistency_errors(Nav2d(), oracle, zs, s0s, np.random.default_rng(0))
    np.testing.assert_array_equal(errs, np.zeros(8))


def test_rollout_latent_shapes():
    states, actions = rollout_latent(Nav2d(), ScriptedOracle(T=4), one_hot_latent(2), np.zeros(2), 4,
                                     np.random.default_rng(0))
    assert states.shape == (5, 2) and actions.shape == (4, 4)
    np.testing.assert_allclose(states[-1], [0.2, 0.0])


def test_interpolation_endpoints_and_count():
    tr = Trainer(tiny_cfg())
    a, b = traj(0.1, T=5), Trajectory(np.linspace(0, 0.5, 12).reshape(6, 2), np.zeros((5, 4)))
    items = interpolate_latents(Nav2d(), tr.model, a, b, 8, np.random.default_rng(0))
    assert len(items) == 8 and [it.t for it in items] == list(np.linspace(0, 1, 8))
    np.testing.assert_array_equal(items[0].z, tr.model.encode(a.states).mean.value)
    np.testing.assert_array_equal(items[-1].z, tr.model.encode(b.states).mean.value)
    assert all(np.array_equal(it.rollout[0], a.states[0]) for it in items)


# -- trainer -------------------------------------------------------------------

def test_seeding_fills_buffer_before_first_iteration():
    tr = Trainer(tiny_cfg(seed_runs=2))
    tr.seed_buffer()
    assert len(tr.buffer) == 2 * 2 >= tr.cfg.H_e
    assert len(tr.pool) == 0


def test_iteration_bookkeeping():
    cfg = tiny_cfg()
    tr = Trainer(cfg)
    rec = tr.train_iteration()
    assert rec.iteration == 1 and rec.seconds == 0.0
    # explorer data only: seed runs plus this iteration's runs
    assert len(tr.buffer) == (cfg.seed_runs + cfg.explorer_runs) * cfg.H_e
    assert len(tr.pool) == cfg.H + 1
    assert np.isfinite([rec.mpc_return, rec.vae_loss, rec.consistency_err, rec.coverage_entropy]).all()
    assert tr.vae_step == cfg.vae_steps


def test_beta_warms_up_linearly():
    tr = Trainer(tiny_cfg(iters=10, vae_steps=10, beta=2.0, beta_warmup=0.2))
    assert tr._beta() == 0.0
    tr.vae_step = 10
    assert tr._beta() == pytest.approx(1.0)
    tr.vae_step = 50
    assert tr._beta() == 2.0


def test_iteration_failures_name_the_iteration(monkeypatch):
    tr = Trainer(tiny_cfg())

    def boom(states):
        raise FloatingPointError("nan loss")
    monkeypatch.setattr(tr, "train_vae", boom)
    with pytest.raises(RuntimeError, match="iteration 1"):
        tr.train_iteration()


def test_unsupervised_mode_trains_only_the_vae():
    tr = Trainer(tiny_cfg(), unsupervised=True)
    pd_before = {k: v.copy() for k, v in tr.model.params.items() if k.startswith("pd")}
    rec = tr.train_iteration()
    assert math.isnan(rec.mpc_return) and math.isnan(rec.consistency_err)
    assert np.isfinite(rec.vae_loss) and len(tr.pool) == 0
    assert all(np.array_equal(tr.model.params[k], v) for k, v in pd_before.items())
    assert all(np.array_equal(t.states[0], [0.0, 0.0]) for t in tr.buffer.trajectories()[::tr.cfg.H_e])


@pytest.mark.parametrize("unsupervised, order", [(False, ["explorer", "vae"]), (True, ["vae", "explorer"])])
def test_explorer_reward_order(monkeypatch, unsupervised, order):
    tr = Trainer(tiny_cfg(), unsupervised=unsupervised)
    calls = []
    vae, upd = tr.train_vae, tr._update_explorer
    monkeypatch.setattr(tr, "train_vae", lambda s: calls.append("vae") or vae(s))
    monkeypatch.setattr(tr, "_update_explorer", lambda c: calls.append("explorer") or upd(c))
    tr.train_iteration()
    assert calls == order


def test_runs_are_bit_identical(tmp_path):
    for name in ("a", "b"):
        run_training(tiny_cfg(), tmp_path / name)
    for f in ("metrics.csv", "model.ckpt", "buffer.strj", "config.txt", "goals.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    rows = load_metrics(tmp_path / "a" / "metrics.csv")
    assert [r["iteration"] for r in rows] == [1, 2]
    assert (tmp_path / "a" / "timing.csv").exists()


def test_zero_iterations_write_header_only(tmp_path):
    _, records = run_training(tiny_cfg(iters=0), tmp_path)
    assert records == []
    assert (tmp_path / "metrics.csv").read_text().strip() == ",".join(MetricsRecord.columns())
    assert (tmp_path / "model.ckpt").exists()


@pytest.mark.parametrize("env", ["wheeled", "blocks"])
def test_other_envs_run_an_iteration(env):
    rec = Trainer(tiny_cfg(env=env, H=7)).train_iteration()
    assert np.isfinite(rec.vae_loss)
