import math

import numpy as np
import pytest
from scipy.special import digamma, gammaln

from lvebm import dynamics
from lvebm.dynamics import (
    NumericalAbort,
    ParticleState,
    TrainConfig,
    TrainHistory,
    estimate_objective,
    init_particles,
    joint_step,
    latent_step,
    load_particles,
    param_ascent,
    refresh_pool,
    save_particles,
    train,
)
from lvebm.energy import init_model
from lvebm.oracle import quadratic_model
from lvebm.rng import ZeroNoise


def state_from(latent, neg_x, neg_z, seed=0):
    return ParticleState(
        np.array(latent, dtype=float), np.array(neg_x, dtype=float), np.array(neg_z, dtype=float), seed
    )


def test_init_particles_deterministic_and_standard():
    cfg = TrainConfig(M=10, D=1000, seed=5)
    a = init_particles(1000, cfg, 2, 3)
    b = init_particles(1000, cfg, 2, 3)
    assert np.array_equal(a.latent, b.latent) and np.array_equal(a.neg_x, b.neg_x)
    pooled = a.latent.ravel()
    assert len(pooled) == 30000
    assert abs(pooled.mean()) < 0.03 and abs(pooled.var() - 1.0) < 0.03
    assert a.shape == (1000, 10, 1000, 2, 3)


def test_init_particles_minimal_and_invalid():
    s = init_particles(1, TrainConfig(M=1, D=1), 1, 1)
    assert s.latent.shape == (1, 1, 1) and s.neg_x.shape == (1, 1)
    with pytest.raises(ValueError):
        init_particles(0, TrainConfig(), 1, 1)


def test_latent_step_contracts_without_noise():
    m = quadratic_model(1, 1, 1.0)
    s = state_from([[[1.0]]], [[0.0]], [[0.0]])
    latent_step(s, m, np.zeros((1, 1)), [0], TrainConfig(eta_z=0.1), ZeroNoise())
    assert s.latent[0, 0, 0] == pytest.approx(0.9, abs=1e-15)


def test_latent_step_fixed_at_stationary_point():
    m = quadratic_model(2, 2, 1.0)
    s = state_from(np.zeros((1, 3, 2)), np.zeros((1, 2)), np.zeros((1, 2)))
    latent_step(s, m, np.zeros((1, 2)), [0], TrainConfig(eta_z=0.1), ZeroNoise())
    assert not s.latent.any()


def test_latent_step_only_touches_batch_rows():
    m = init_model(2, 1, (8,), rng=0)
    s = init_particles(6, TrainConfig(M=4, D=8), 2, 1)
    before = s.latent.copy()
    latent_step(s, m, np.ones((6, 2)), [1, 4], TrainConfig())
    untouched = [0, 2, 3, 5]
    assert np.array_equal(s.latent[untouched], before[untouched])
    assert not np.array_equal(s.latent[[1, 4]], before[[1, 4]])


def test_latent_step_row_independent_of_batch():
    m = init_model(2, 1, (8,), rng=0)
    data = np.random.default_rng(0).normal(size=(6, 2))
    a = init_particles(6, TrainConfig(M=4, D=8), 2, 1)
    b = a.copy()
    latent_step(a, m, data, [1, 4], TrainConfig())
    latent_step(b, m, data, [4], TrainConfig())
    assert np.array_equal(a.latent[4], b.latent[4])


def test_latent_ou_stationary_variance():
    # dz = -z dt + sqrt(2) dW: variance relaxes to 1 from a wide start.
    m = quadratic_model(1, 1, 1.0)
    cfg = TrainConfig(eta_z=1e-3, M=100, D=1)
    s = init_particles(100, cfg, 1, 1)
    s.latent *= 3.0
    data = np.zeros((100, 1))
    rows = np.arange(100)
    for t in range(5000):
        s.step = t
        latent_step(s, m, data, rows, cfg)
    assert s.latent.var() == pytest.approx(1.0, rel=0.10)


def test_joint_step_contracts_without_noise():
    m = quadratic_model(1, 1, 1.0)
    s = state_from([[[0.0]]], [[2.0]], [[-2.0]])
    joint_step(s, m, TrainConfig(eta_xz=0.1), ZeroNoise())
    assert s.neg_x[0, 0] == pytest.approx(1.8, abs=1e-15)
    assert s.neg_z[0, 0] == pytest.approx(-1.8, abs=1e-15)


def test_joint_step_is_simultaneous():
    m = init_model(1, 1, (6,), rng=3)
    x0, z0 = np.array([[0.7]]), np.array([[-0.4]])
    s = state_from([[[0.0]]], x0, z0)
    cfg = TrainConfig(eta_xz=0.05)
    joint_step(s, m, cfg, ZeroNoise())
    gx, gz = dynamics.joint_drift(m, x0, z0, cfg.clip_norm)
    assert s.neg_x[0, 0] == x0[0, 0] - 0.05 * gx[0, 0]
    assert s.neg_z[0, 0] == z0[0, 0] - 0.05 * gz[0, 0]


def test_contrast_cancels_on_equal_multisets():
    m = init_model(2, 1, (8, 8), rng=1)
    rng = np.random.default_rng(2)
    data = rng.normal(size=(3, 2))
    latent = rng.normal(size=(3, 4, 1))
    pos_x = np.repeat(data, 4, axis=0)
    perm = rng.permutation(12)
    s = state_from(latent, pos_x[perm], latent.reshape(-1, 1)[perm])
    before = [p.copy() for p in m.params()]
    param_ascent(m, s, data, np.arange(3), TrainConfig(alpha=0.5))
    for a, b in zip(before, m.params()):
        assert np.array_equal(a, b)


def test_zero_alpha_leaves_model_unchanged():
    m = init_model(2, 1, (8,), rng=1)
    s = init_particles(3, TrainConfig(M=2, D=5), 2, 1)
    before = [p.copy() for p in m.params()]
    param_ascent(m, s, np.ones((3, 2)), [0, 1, 2], TrainConfig(alpha=0.0))
    for a, b in zip(before, m.params()):
        assert np.array_equal(a, b)


def test_linear_feature_update():
    # No hidden layer: U = w . (x, z) + c, so grad_w U is the feature itself.
    m = init_model(2, 1, (), 0.1, 0.1, rng=4)
    rng = np.random.default_rng(3)
    data = rng.normal(size=(4, 2))
    s = state_from(rng.normal(size=(4, 3, 1)), rng.normal(size=(7, 2)), rng.normal(size=(7, 1)))
    w0, c0 = m.weights[0].copy(), m.biases[0].copy()
    param_ascent(m, s, data, np.arange(4), TrainConfig(alpha=0.01))
    f_neg = np.hstack([s.neg_x, s.neg_z]).mean(axis=0)
    f_pos = np.hstack([np.repeat(data, 3, axis=0), s.latent.reshape(-1, 1)]).mean(axis=0)
    np.testing.assert_allclose(m.weights[0][:, 0] - w0[:, 0], 0.01 * (f_neg - f_pos), atol=1e-15)
    assert m.biases[0][0] - c0[0] == pytest.approx(0.0, abs=1e-15)


def test_refresh_pool_probabilities():
    s = init_particles(2, TrainConfig(M=2, D=10), 1, 1)
    kept = refresh_pool(s.copy(), TrainConfig(D=10, rho_refresh=0.0))
    assert np.array_equal(kept.neg_x, s.neg_x)
    full = refresh_pool(s.copy(), TrainConfig(D=10, rho_refresh=1.0, refresh_fraction=1.0))
    assert not np.any(full.neg_x == s.neg_x)
    half = refresh_pool(s.copy(), TrainConfig(D=10, rho_refresh=1.0, refresh_fraction=0.5))
    assert int(np.sum(half.neg_x[:, 0] != s.neg_x[:, 0])) == 5


def test_refresh_draws_standard_normal():
    s = init_particles(1, TrainConfig(M=1, D=20000), 1, 1)
    s.neg_x[:] = 10.0
    refresh_pool(s, TrainConfig(D=20000, rho_refresh=1.0, refresh_fraction=1.0))
    assert abs(s.neg_x.mean()) < 0.03 and abs(s.neg_x.var() - 1.0) < 0.05


def kl_by_hand(points, k):
    pts = np.atleast_2d(points)
    n, p = pts.shape
    dist = np.sort(np.linalg.norm(pts[:, None] - pts[None], axis=-1), axis=1)[:, k]
    log_vp = 0.5 * p * math.log(math.pi) - gammaln(0.5 * p + 1)
    return digamma(n) - digamma(k) + log_vp + p * np.mean(np.log(dist))


def test_objective_by_hand():
    m = init_model(1, 1, (3,), 0.2, 0.3, rng=5)
    data = np.array([[0.5], [-1.0]])
    s = state_from([[[0.1], [0.4]], [[-0.3], [0.9]]], [[0.2], [1.1]], [[0.0], [-0.7]])
    got = estimate_objective(s, m, data, k=1)
    e = lambda x, z: (
        np.log1p(np.exp(np.array([x, z]) @ m.weights[0] + m.biases[0])) @ m.weights[1][:, 0]
        + m.biases[1][0] + 0.1 * x * x + 0.15 * z * z
    )
    e_neg = np.mean([e(0.2, 0.0), e(1.1, -0.7)])
    h_neg = kl_by_hand([[0.2, 0.0], [1.1, -0.7]], 1)
    pos = [np.mean([e(data[i, 0], zz) for zz in s.latent[i, :, 0]]) - kl_by_hand(s.latent[i], 1) for i in range(2)]
    assert got["value"] == pytest.approx(e_neg - h_neg - np.mean(pos), abs=1e-12)
    assert not got["missing"]


def test_objective_zero_energy_is_entropy_difference():
    m = quadratic_model(1, 1, 1e-12)
    rng = np.random.default_rng(6)
    s = state_from(rng.normal(size=(3, 5, 1)), rng.normal(size=(9, 1)), rng.normal(size=(9, 1)))
    got = estimate_objective(s, m, np.zeros((3, 1)), k=3)
    h_pos = np.mean([kl_by_hand(s.latent[i], 3) for i in range(3)])
    h_neg = kl_by_hand(np.hstack([s.neg_x, s.neg_z]), 3)
    assert got["value"] == pytest.approx(h_pos - h_neg, abs=1e-9)


def test_objective_flags_degenerate_pools():
    m = init_model(1, 1, (3,), rng=0)
    s = init_particles(2, TrainConfig(M=2, D=10), 1, 1)
    assert estimate_objective(s, m, np.zeros((2, 1)))["missing"]


def small_config(**kw):
    base = dict(T=20, M=4, D=64, minibatch=16, eta_z=1e-2, eta_xz=1e-2, alpha=1e-3, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_train_zero_iterations_is_identity():
    m = init_model(2, 1, (8,), rng=0)
    data = np.ones((5, 2))
    cfg = small_config(T=0)
    out, s, h = train(data, cfg, m)
    for a, b in zip(m.params(), out.params()):
        assert np.array_equal(a, b)
    init = init_particles(5, cfg, 2, 1)
    assert np.array_equal(s.latent, init.latent) and np.array_equal(s.neg_z, init.neg_z)
    assert len(h) == 0


def test_train_is_deterministic_and_does_not_mutate_input():
    m = init_model(2, 1, (8,), rng=0)
    data = np.random.default_rng(0).normal(size=(40, 2))
    before = [p.copy() for p in m.params()]
    for opt in ("sgd", "adam"):
        cfg = small_config(optimizer=opt, latent_steps=2, rho_refresh=0.5)
        a, sa, ha = train(data, cfg, m)
        b, sb, hb = train(data, cfg, m)
        for p, q in zip(a.params(), b.params()):
            assert np.array_equal(p, q)
        assert np.array_equal(sa.neg_x, sb.neg_x) and np.array_equal(ha.objective, hb.objective)
        assert len(ha) == cfg.T
    for p, q in zip(before, m.params()):
        assert np.array_equal(p, q)


def test_train_positive_phase_moves_only_batch_rows():
    m = init_model(2, 1, (8,), rng=0)
    data = np.random.default_rng(1).normal(size=(40, 2))
    cfg = small_config(T=1, minibatch=8)
    init = init_particles(40, cfg, 2, 1)
    _, s, _ = train(data, cfg, m, init.copy())
    rows = dynamics.minibatch_rows(cfg.seed, 0, 40, 8)
    others = np.setdiff1d(np.arange(40), rows)
    assert np.array_equal(s.latent[others], init.latent[others])
    assert not np.array_equal(s.latent[rows], init.latent[rows])


def test_train_aborts_with_iteration_index():
    m = quadratic_model(1, 1, 1.0)
    cfg = small_config(T=500, eta_xz=50.0, eta_z=1e-3)
    with pytest.raises(NumericalAbort) as info:
        train(np.zeros((5, 1)), cfg, m)
    assert info.value.iteration is not None and 0 < info.value.iteration < 500


def test_train_second_moment_bounded_for_clipped_energy():
    m = init_model(2, 1, (16,), 0.05, 0.05, rng=2)
    data = np.random.default_rng(2).normal(size=(50, 2))
    cfg = small_config(T=200)
    _, _, h = train(data, cfg, m)
    lam, c, p = 0.025, cfg.clip_norm, 3
    bound = 3.0 + (c * c / (4 * lam) + p) / lam
    assert np.max(h.neg_pool_second_moment) <= 1.2 * bound


def test_history_csv_round_trip(tmp_path):
    h = TrainHistory()
    h.append(-1.5, 2.0, 1.0, 3.25)
    h.append(-1.25, 1.5, 1.0, 3.0, missing=True)
    path = tmp_path / "history.csv"
    h.to_csv(path)
    back = TrainHistory.from_csv(path)
    assert np.array_equal(back.objective, h.objective) and np.array_equal(back.neg_pool_second_moment, h.neg_pool_second_moment)
    np.testing.assert_array_equal(back.loss, [1.5, 1.25])


def test_particle_snapshot_round_trip(tmp_path):
    s = init_particles(7, TrainConfig(M=3, D=11, seed=9), 2, 2)
    s.step = 42
    path = tmp_path / "particles.bin"
    save_particles(s, path)
    assert path.read_bytes()[:7] == dynamics.SNAPSHOT_MAGIC
    back = load_particles(path)
    assert np.array_equal(back.latent, s.latent) and np.array_equal(back.neg_z, s.neg_z)
    assert (back.seed, back.step) == (9, 42)
    path.write_bytes(b"garbage" + path.read_bytes()[7:])
    with pytest.raises(ValueError):
        load_particles(path)


def test_config_validation():
    for bad in (dict(eta_z=0.0), dict(alpha=-1.0), dict(rho_refresh=2.0), dict(M=0), dict(optimizer="rmsprop"), dict(alpha_final=-1e-3)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_learning_rate_schedule():
    assert TrainConfig(alpha=3e-3).learning_rate(4000) == 3e-3
    cfg = TrainConfig(T=101, alpha=2e-3, alpha_final=1e-4)
    lr = np.array([cfg.learning_rate(t) for t in range(101)])
    assert lr[0] == pytest.approx(2e-3, abs=1e-18) and lr[-1] == pytest.approx(1e-4, abs=1e-18)
    assert lr[50] == pytest.approx(1.05e-3, rel=1e-12)
    assert np.all(np.diff(lr) < 0)


def test_decay_to_zero_freezes_last_step():
    # T=2 decaying to 0: the second update has rate 0, so the parameters equal
    # those after a single constant-rate iteration.
    m = init_model(2, 1, (8,), rng=0)
    data = np.random.default_rng(0).normal(size=(6, 2))
    two, _, _ = train(data, small_config(T=2, alpha_final=0.0), m)
    one, _, _ = train(data, small_config(T=1), m)
    for a, b in zip(two.params(), one.params()):
        assert np.array_equal(a, b)
