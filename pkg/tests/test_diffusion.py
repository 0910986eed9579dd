import numpy as np
import pytest

import sliceseq.diffusion as D
import sliceseq.tensor as T
from sliceseq.errors import DataError


def small_sched(T_total=40):
    return D.NoiseSchedule.linear(T_total, 1e-4, 0.02)


def test_schedule_table_properties():
    sched = small_sched(100)
    assert sched.alpha_bar[0] == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)  # strictly decreasing
    assert np.all(sched.alpha_bar > 0)
    # cumulative product matches the sequential table
    np.testing.assert_allclose(sched.alpha_bar[1:], np.cumprod(1.0 - sched.betas), rtol=1e-15)


def test_schedule_rejects_bad_betas():
    with pytest.raises(DataError):
        D.NoiseSchedule(np.array([0.5, 0.1]))  # decreasing
    with pytest.raises(DataError):
        D.NoiseSchedule(np.array([0.0, 0.1]))  # not strictly positive
    with pytest.raises(DataError):
        D.NoiseSchedule(np.array([0.1, 1.0]))  # >= 1
    with pytest.raises(DataError):
        D.NoiseSchedule(np.zeros((2, 2)) + 0.1)


def test_q_sample_closed_form():
    sched = small_sched()
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((5, 3))
    eps = rng.standard_normal((5, 3))
    for t in (0, 1, 17, sched.T):
        got = D.q_sample(x0, t, eps, sched)
        want = sched.sqrt_ab[t] * x0 + sched.sqrt_1m_ab[t] * eps
        np.testing.assert_array_equal(got, want)
    assert np.array_equal(D.q_sample(x0, 0, eps, sched), x0)  # t=0 is identity


def test_q_sample_tensor_path_matches_and_differentiates():
    sched = small_sched()
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((4, 3))
    eps = rng.standard_normal((4, 3))
    xt = D.q_sample(T.param(x0, dtype=np.float64), 9, T.tensor(eps, dtype=np.float64), sched)
    np.testing.assert_allclose(xt.data, D.q_sample(x0, 9, eps, sched), rtol=1e-15)
    p = T.param(x0, dtype=np.float64)
    params = {"x0": p}

    def f():
        return T.mean_all(D.q_sample(p, 9, T.tensor(eps, dtype=np.float64), sched))

    assert T.grad_check(f, params, h=1e-4) < 5e-6


def test_exact_eps_inversion():
    # with the true eps supplied, the reverse chain recovers x0 exactly
    sched = small_sched(60)
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((8, 4))
    eps = rng.standard_normal((8, 4))
    den = D.OracleDenoiser(x0, sched)
    for n_steps in (1, 5, 60):
        taus = D.sample_timesteps(sched.T, n_steps)
        x = D.q_sample(x0, sched.T, eps, sched)
        for i in range(len(taus) - 1, 0, -1):
            t, t_prev = int(taus[i]), int(taus[i - 1])
            x = D.ddim_jump(x, t, t_prev, den(T.Tensor(x.astype(np.float64)), t, None).data, sched)
        assert np.max(np.abs(x - x0)) <= 1e-5


def test_ddim_jump_validation():
    sched = small_sched()
    x = np.zeros((2, 2))
    with pytest.raises(DataError):
        D.ddim_jump(x, 5, 5, x, sched)  # must move strictly down
    with pytest.raises(DataError):
        D.ddim_jump(x, sched.T + 1, 0, x, sched)
    with pytest.raises(DataError):
        D.ddim_jump(x, 5, 0, np.zeros((2, 3)), sched)


def test_sample_timesteps_plan():
    taus = D.sample_timesteps(100, 10)
    assert taus[0] == 0 and taus[-1] == 100
    assert np.all(np.diff(taus) > 0)
    np.testing.assert_array_equal(D.sample_timesteps(7, 7), np.arange(8))
    with pytest.raises(DataError):
        D.sample_timesteps(10, 0)
    with pytest.raises(DataError):
        D.sample_timesteps(10, 11)


def test_sinusoidal_embedding():
    e = D.sinusoidal_embedding(13, 16)
    assert e.shape == (16,)
    assert np.all(np.abs(e) <= 1.0)
    assert not np.array_equal(e, D.sinusoidal_embedding(14, 16))


def test_linear_denoiser_learns_analytic_weight():
    # for unit-variance scalar data, the L1-optimal linear eps-predictor
    # at fixed t has weight sqrt(1 - alpha_bar_t)
    sched = small_sched(50)
    t = 30
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((4096, 1))
    den = D.LinearDenoiser()
    D.train_autoencoder(x0, None, den, sched, epochs=60, batch_size=256, lr=3e-3, seed=0, fixed_t=t)
    assert abs(den.weight - sched.sqrt_1m_ab[t]) < 0.05


def test_conditioning_improves_reconstruction():
    # two well-separated modes: the unconditioned model must park between
    # them, the conditioned one can route back to the right mode
    sched = small_sched(40)
    rng = np.random.default_rng(4)
    dim = 6
    centers = np.stack([np.ones(dim), -np.ones(dim)])
    labels = rng.integers(0, 2, 256)
    x = centers[labels] + 0.05 * rng.standard_normal((256, dim))
    x = x.astype(np.float32)
    held = x[:32]

    enc = D.MLPEncoder(dim, 4, width=16, seed=0)
    den_c = D.ResidualMLPDenoiser(dim, 4, width=32, t_dim=8, seed=1)
    D.train_autoencoder(x[32:], enc, den_c, sched, epochs=30, batch_size=64, lr=3e-3, seed=0)
    den_u = D.ResidualMLPDenoiser(dim, 0, width=32, t_dim=8, seed=1)
    D.train_autoencoder(x[32:], None, den_u, sched, epochs=30, batch_size=64, lr=3e-3, seed=0)

    rec_c = D.reconstruct(held, den_c, enc, sched, n_steps=20, noise_seed=7)
    rec_u = D.reconstruct(held, den_u, None, sched, n_steps=20, noise_seed=7)
    err_c = D.l1_error(held, rec_c)
    err_u = D.l1_error(held, rec_u)
    assert err_c < err_u


def test_train_autoencoder_loss_decreases():
    sched = small_sched(30)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((128, 5)).astype(np.float32)
    enc = D.MLPEncoder(5, 3, width=16, seed=0)
    den = D.ResidualMLPDenoiser(5, 3, width=16, t_dim=8, seed=1)
    hist = D.train_autoencoder(x, enc, den, sched, epochs=8, batch_size=32, lr=2e-3, seed=0)
    assert len(hist) == 8
    assert hist[-1] < hist[0]


def test_train_autoencoder_deterministic():
    sched = small_sched(30)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((64, 4)).astype(np.float32)

    def run():
        enc = D.MLPEncoder(4, 3, width=8, seed=0)
        den = D.ResidualMLPDenoiser(4, 3, width=8, t_dim=8, seed=1)
        hist = D.train_autoencoder(x, enc, den, sched, epochs=3, batch_size=32, lr=1e-3, seed=2)
        return hist, {k: v.data.copy() for k, v in enc.params.items()}

    h1, p1 = run()
    h2, p2 = run()
    assert h1 == h2
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])


def test_encode_corpus_shapes_and_order():
    rng = np.random.default_rng(7)
    enc = D.MLPEncoder(4, 3, width=8, seed=0)
    vols = [rng.standard_normal((n, 4)).astype(np.float32) for n in (2, 5, 1)]
    reps = D.encode_corpus(vols, enc, batch_size=4)
    assert [r.shape for r in reps] == [(2, 3), (5, 3), (1, 3)]
    # batching must not change values: encode one volume alone
    lone = D.encode_corpus([vols[1]], enc, batch_size=512)[0]
    np.testing.assert_array_equal(reps[1], lone)


def test_ddim_loss_grad_flows_to_encoder_and_denoiser():
    sched = small_sched(20)
    rng = np.random.default_rng(8)
    x0 = T.Tensor(rng.standard_normal((6, 4)).astype(np.float32))
    eps = T.Tensor(rng.standard_normal((6, 4)).astype(np.float32))
    enc = D.MLPEncoder(4, 3, width=8, seed=0)
    den = D.ResidualMLPDenoiser(4, 3, width=8, t_dim=8, seed=1)
    with T.Tape() as tape:
        loss = D.ddim_loss(x0, 7, eps, den, enc, sched)
        tape.backward(loss)
    assert any(p.grad is not None and np.any(p.grad != 0) for p in enc.params.values())
    assert any(p.grad is not None and np.any(p.grad != 0) for p in den.params.values())
