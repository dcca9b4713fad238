import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import max_grad_rel_err, straight_lines
from sectar.model import (ModelConfig, SectarModel, Trajectory, bc_loss, consistency_reward, consistency_rewards,
                          stack_trajectories, vae_loss)
from sectar.optim import Adam, train_step

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def tiny(state_dim=2, action_dim=4, discrete=True, T=5, d_z=2, seed=0, width=8):
    cfg = ModelConfig(state_dim, action_dim, discrete, d_z=d_z, T=T, enc_hidden=width, enc_layers=2,
                      dec_hidden=width, policy_hidden=(width,), value_hidden=(width,))
    return SectarModel(cfg, seed=seed)


def zero_encoder(model):
    for k in model.names("enc"):
        model.params[k] = np.zeros_like(model.params[k])


def gauss_logpdf(x, mu, log_std):
    return -0.5 * ((x - mu) / np.exp(log_std)) ** 2 - log_std - HALF_LOG_2PI


# -- trajectories --------------------------------------------------------------

def test_trajectory_shape_invariant():
    t = Trajectory(np.zeros((6, 2)), np.zeros((5, 4)))
    assert t.T == 5
    with pytest.raises(ValueError):
        Trajectory(np.zeros((5, 2)), np.zeros((5, 4)))
    with pytest.raises(ValueError):
        Trajectory(np.full((6, 2), np.nan), np.zeros((5, 4)))
    s, a = stack_trajectories([t, t])
    assert s.shape == (2, 6, 2) and a.shape == (2, 5, 4)


# -- shapes and anchoring ------------------------------------------------------

def test_decode_is_anchored_and_shaped():
    m = tiny()
    rng = np.random.default_rng(1)
    z, s0 = rng.normal(size=(3, 2)), rng.uniform(-1, 1, size=(3, 2))
    means, log_std = m.decode_states(z, s0)
    assert means.shape == (3, 6, 2) and log_std.shape == (3, 5, 2)
    np.testing.assert_array_equal(means[:, 0], s0)
    assert np.all((log_std >= -5) & (log_std <= 2))
    single, _ = m.decode_states(z[0], s0[0])
    np.testing.assert_allclose(single, means[0], atol=1e-14)


def test_encode_single_and_batch_agree():
    m = tiny()
    states = np.random.default_rng(2).normal(size=(4, 6, 2))
    q = m.encode(states)
    q0 = m.encode(states[0])
    np.testing.assert_allclose(q0.mean.value, q.mean.value[0], atol=1e-14)
    with pytest.raises(ValueError):
        m.encode(np.zeros((6, 3)))


def test_translation_equivariance_without_s0_input():
    m = tiny()
    wx = m.params["dec.cell.wx"]
    wx[m.d_z:] = 0.0  # input rows past d_z carry s0 into the decoder
    rng = np.random.default_rng(3)
    z, s0 = rng.normal(size=2), rng.uniform(-0.5, 0.5, size=2)
    shift = np.array([0.3, -0.2])
    a, _ = m.decode_states(z, s0)
    b, _ = m.decode_states(z, s0 + shift)
    np.testing.assert_allclose(b - a, np.broadcast_to(shift, a.shape), atol=1e-12)


# -- VAE loss ------------------------------------------------------------------

def test_vae_loss_perfect_decoder_closed_form():
    m = tiny()
    zero_encoder(m)
    for k in m.names("dec"):
        m.params[k] = np.zeros_like(m.params[k])
    m.params["dec.head.b"][2:] = -10.0  # clamps to the floor of -5
    s0 = np.random.default_rng(4).uniform(-1, 1, size=(7, 1, 2))
    states = np.repeat(s0, 6, axis=1)  # stationary, so the zero-delta decoder is exact
    loss, info = vae_loss(m, m.const(), states, beta=1.0, rng=np.random.default_rng(0))
    expected = -5 * 2 * (5.0 - HALF_LOG_2PI)
    assert info["kl"] == 0.0
    assert loss.item() == pytest.approx(expected, abs=1e-10)


def test_vae_loss_matches_independent_nll_when_kl_is_zero():
    m = tiny()
    zero_encoder(m)  # posterior N(0, I) equals the prior
    states = np.random.default_rng(5).normal(size=(5, 6, 2))
    loss, info = vae_loss(m, m.const(), states, beta=3.0, rng=np.random.default_rng(9))
    z = np.random.default_rng(9).standard_normal((5, 2))
    means, log_std = m.decode_states(z, states[:, 0])
    nll = -gauss_logpdf(states[:, 1:], means[:, 1:], log_std).sum(axis=(1, 2)).mean()
    assert info["kl"] == 0.0
    assert loss.item() == pytest.approx(nll, rel=1e-12)


def test_vae_loss_rejects_empty_batch():
    m = tiny()
    with pytest.raises(ValueError):
        vae_loss(m, m.const(), np.zeros((0, 6, 2)), 1.0, np.random.default_rng(0))


@pytest.mark.parametrize("beta", [0.0, 1.0])
def test_vae_loss_gradients(beta):
    m = tiny(T=3, seed=6, width=3)
    states = straight_lines(2, 3, np.random.default_rng(6))
    err = max_grad_rel_err(lambda p: vae_loss(m, p, states, beta, np.random.default_rng(0))[0], m.params,
                           m.names("enc", "dec"))
    assert err < 1e-5


def test_bc_loss_gradients_reach_encoder():
    m = tiny(T=3, seed=7, width=3)
    m.params["pd.mlp.1.w"] = m.params["pd.mlp.1.w"] * 100  # lift encoder gradients above FD noise
    rng = np.random.default_rng(7)
    states = rng.normal(size=(2, 4, 2))
    actions = np.eye(4)[rng.integers(4, size=(2, 3))]
    fn = lambda p: bc_loss(m, p, states, actions, np.random.default_rng(0))[0]
    assert max_grad_rel_err(fn, m.params, m.names("enc", "pd")) < 1e-5


def test_vae_training_reduces_loss():
    m = tiny(T=10, d_z=4)
    rng = np.random.default_rng(8)
    data = straight_lines(64, 10, rng)
    opt = Adam(lr=3e-3)
    names = m.names("enc", "dec")
    eval_loss = lambda: vae_loss(m, m.const(), data, 1.0, np.random.default_rng(0))[0].item()
    before = eval_loss()
    for _ in range(200):
        batch = data[rng.choice(64, 16, replace=False)]
        train_step(m.params, lambda p: vae_loss(m, p, batch, 1.0, rng), opt, names)
    assert eval_loss() < before - 20.0


def test_reparameterised_sample_mean():
    m = tiny()
    states = np.random.default_rng(10).normal(size=(6, 2))
    q = m.encode(np.repeat(states[None], 10_000, axis=0))
    z = q.sample(np.random.default_rng(11)).value
    se = q.std[0] / math.sqrt(10_000)
    assert np.all(np.abs(z.mean(0) - q.mean.value[0]) < 3 * se)


# -- consistency reward --------------------------------------------------------

def test_consistency_reward_decomposes_per_step():
    m = tiny()
    rng = np.random.default_rng(12)
    states, z = rng.normal(size=(6, 2)), rng.normal(size=2)
    r = consistency_reward(m, states, z)
    means, log_std = m.decode_states(z, states[0])
    per_step = gauss_logpdf(states[1:], means[1:], log_std).sum(-1)
    assert r.shape == (5,)
    np.testing.assert_allclose(r, per_step, atol=1e-9)
    total = -vae_loss_nll_for(m, states, z)
    assert r.sum() == pytest.approx(total, abs=1e-9)


def vae_loss_nll_for(m, states, z):
    means, log_std = m.decode_states(z, states[0])
    return -gauss_logpdf(states[1:], means[1:], log_std).sum()


def test_consistency_rewards_batch_and_length_check():
    m = tiny()
    rng = np.random.default_rng(13)
    states, zs = rng.normal(size=(3, 6, 2)), rng.normal(size=(3, 2))
    batch = consistency_rewards(m, states, zs)
    for i in range(3):
        np.testing.assert_allclose(batch[i], consistency_reward(m, states[i], zs[i]), atol=1e-12)
    with pytest.raises(ValueError):
        consistency_rewards(m, states[:, :4], zs)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_decoder_own_mean_maximises_reward(seed):
    m = tiny()
    rng = np.random.default_rng(seed)
    z, s0 = rng.normal(size=2), rng.normal(size=2)
    means, _ = m.decode_states(z, s0)
    best = consistency_reward(m, means, z).sum()
    noisy = means + np.r_[[np.zeros(2)], rng.normal(scale=0.1, size=(5, 2))]
    assert consistency_reward(m, noisy, z).sum() < best


# -- policy and persistence ----------------------------------------------------

def test_act_discrete_and_continuous():
    rng = np.random.default_rng(14)
    d = tiny()
    a = d.act(np.zeros(2), np.zeros(2), 0, rng, greedy=True)
    assert isinstance(a, int) and 0 <= a < 4
    c = tiny(state_dim=5, action_dim=2, discrete=False)
    a = c.act(np.zeros(5), np.zeros(2), 0, rng)
    assert a.shape == (2,)
    greedy = c.act(np.zeros(5), np.zeros(2), 0, rng, greedy=True)
    np.testing.assert_array_equal(greedy, c.policy_action(np.zeros(5), np.zeros(2)).mode()[0])


def test_save_load_round_trip(tmp_path):
    m = tiny(state_dim=5, action_dim=2, discrete=False, seed=15)
    m.save(tmp_path / "m.ckpt", extra={"explorer.w": np.arange(3.0)}, meta={"env": "wheeled"})
    back, extra, meta = SectarModel.load(tmp_path / "m.ckpt")
    assert back.cfg == m.cfg and meta["env"] == "wheeled"
    assert set(back.params) == set(m.params)
    for k in m.params:
        assert back.params[k].tobytes() == m.params[k].tobytes()
    np.testing.assert_array_equal(extra["explorer.w"], np.arange(3.0))


def test_small_profile_halves_sizes():
    cfg = ModelConfig(2, 4, True)
    small = cfg.small()
    assert (small.enc_hidden, small.dec_hidden) == (150, 128)
    assert small.policy_hidden == (200, 150, 100)
    assert ModelConfig.from_meta(small.to_meta()) == small
