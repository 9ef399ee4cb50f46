import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lvebm import metrics
from lvebm.energy import init_model
from lvebm.oracle import GaussianOracle


def brute_force_ot(a, b):
    """Exact W2^2 between equal-size uniform point clouds: best permutation."""
    c = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    n = len(a)
    return min(c[np.arange(n), list(p)].mean() for p in itertools.permutations(range(n)))


def test_rmse_examples():
    assert metrics.rmse([[3.0]], [[0.0]]) == 3.0
    a = np.random.default_rng(0).normal(size=(7, 3))
    assert metrics.rmse(a, a) == 0.0
    b = np.random.default_rng(1).normal(size=(7, 3))
    loop = math.sqrt(sum((a[i, j] - b[i, j]) ** 2 for i in range(7) for j in range(3)) / 21)
    assert metrics.rmse(a, b) == pytest.approx(loop, abs=1e-12)
    with pytest.raises(ValueError):
        metrics.rmse(a, b[:3])


def test_mmd_identical_multisets_biased_is_zero():
    a = np.random.default_rng(2).normal(size=(50, 2))
    assert abs(metrics.mmd2_rbf(a, a[::-1], unbiased=False)) < 1e-12


def test_mmd_two_singletons():
    v = metrics.mmd2_rbf([[0.0]], [[2.0]], bandwidth=math.sqrt(2.0), unbiased=False)
    assert v == pytest.approx(2.0 - 2.0 * math.exp(-1.0), abs=1e-14)


def test_mmd_null_case():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2000, 2)), rng.normal(size=(2000, 2))
    assert abs(metrics.mmd2_rbf(a, b)) < 0.01


def test_mmd_detects_shift_and_is_symmetric():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(300, 2)), rng.normal(size=(300, 2)) + [1.0, 0.0]
    assert metrics.mmd2_rbf(a, b) > 0.05
    assert metrics.mmd2_rbf(a, b) == metrics.mmd2_rbf(b, a)


def test_mmd_bandwidth_error():
    with pytest.raises(metrics.BandwidthError):
        metrics.mmd2_rbf(np.ones((4, 2)), np.ones((3, 2)))


def test_sinkhorn_self_distance_small():
    a = np.random.default_rng(5).normal(size=(500, 2))
    assert metrics.sinkhorn_w2sq(a, a, epsilon=0.05) < 0.05


def test_sinkhorn_point_masses():
    assert metrics.sinkhorn_w2sq([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(25.0, abs=1e-12)


def test_sinkhorn_separated_gaussians():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(2000, 2))
    b = rng.normal(size=(2000, 2)) + [2.0, 0.0]
    assert metrics.sinkhorn_w2sq(a, b, epsilon=0.01, iters=200) == pytest.approx(4.0, rel=0.10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 6))
def test_sinkhorn_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 2)), rng.normal(size=(n, 2)) * 1.5 + 0.5
    exact = brute_force_ot(a, b)
    res = metrics.sinkhorn(a, b, epsilon=1e-3, iters=5000)
    assert res.cost == pytest.approx(exact, rel=0.01, abs=1e-6)


def test_sinkhorn_symmetry():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(40, 2)), rng.normal(size=(40, 2)) + 1.0
    ab = metrics.sinkhorn_w2sq(a, b, iters=1000)
    ba = metrics.sinkhorn_w2sq(b, a, iters=1000)
    assert ab == pytest.approx(ba, abs=1e-9)


def test_sinkhorn_approaches_lp_value_as_epsilon_shrinks():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    exact = brute_force_ot(a, b)
    costs = [metrics.sinkhorn(a, b, eps, 5000).cost for eps in (1.0, 0.3, 0.1, 0.03, 0.01)]
    assert all(c2 <= c1 + 1e-9 for c1, c2 in zip(costs, costs[1:]))
    assert costs[-1] >= exact - 1e-9


def test_sinkhorn_reports_marginal_error():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(30, 2)), rng.normal(size=(20, 2))
    for x, y in ((a, b), (b, a)):
        res = metrics.sinkhorn(x, y, 0.05, 3)
        assert res.plan.shape == (len(x), len(y))
        assert res.marginal_error > 0
    assert metrics.sinkhorn(a, b, 0.05, 2000).marginal_error < 1e-6


def test_knn_entropy_gaussian():
    s = np.random.default_rng(10).normal(size=10000)
    assert metrics.knn_entropy(s, 3) == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=0.05)


def test_knn_entropy_uniform_square():
    s = np.random.default_rng(11).uniform(size=(10000, 2))
    assert abs(metrics.knn_entropy(s, 3)) < 0.05


def test_knn_entropy_scaling():
    s = np.random.default_rng(12).normal(size=10000)
    shift = metrics.knn_entropy(10 * s) - metrics.knn_entropy(s)
    assert shift == pytest.approx(math.log(10), abs=0.05)


def test_knn_entropy_batch_matches_single():
    pools = np.random.default_rng(13).normal(size=(4, 12, 2))
    batch = metrics.knn_entropy_batch(pools, 3)
    single = [metrics.knn_entropy(p, 3) for p in pools]
    np.testing.assert_allclose(batch, single, rtol=1e-12)


def test_knn_entropy_duplicates_warn():
    s = np.array([[0.0], [0.0], [0.0], [0.0], [1.0]])
    with pytest.warns(UserWarning):
        assert math.isfinite(metrics.knn_entropy(s, 3))


def test_elbo_zero_energy_is_entropy_difference():
    m = init_model(1, 1, (3,), 1e-12, 1e-12, 0)
    for w in m.weights:
        w[...] = 0.0
    rng = np.random.default_rng(14)
    x = rng.normal(size=(5, 1))
    lat = rng.normal(size=(5, 20, 1))
    nx, nz = rng.normal(size=(200, 1)), rng.normal(size=(200, 1))
    hand = np.mean(metrics.knn_entropy_batch(lat, 3)) - metrics.knn_entropy(np.hstack([nx, nz]), 3)
    assert metrics.elbo(m, x, lat, nx, nz) == pytest.approx(hand, abs=1e-9)


def test_elbo_on_gaussian_oracle_matches_loglik():
    orc = GaussianOracle([[0.6]], 1.0, 1.0)
    rng = np.random.default_rng(15)
    xs, _ = orc.sample(200, seed=1)
    mean, cov = orc.z_given_x(xs)
    lat = mean[:, None, :] + math.sqrt(cov[0, 0]) * rng.normal(size=(200, 400, 1))
    nx, nz = orc.sample(20000, seed=2)
    # Plug-in of the same formula as metrics.elbo, with the oracle energy.
    e_pos = orc.energy(np.repeat(xs, 400, axis=0), lat.reshape(-1, 1)).reshape(200, 400)
    h_pos = metrics.knn_entropy_batch(lat, 3)
    pos = np.mean(-e_pos.mean(axis=1) + h_pos)
    neg = orc.energy(nx, nz).mean() - metrics.knn_entropy(np.hstack([nx, nz]), 3)
    est = pos + neg
    exact = float(np.mean(orc.log_px(xs)))
    assert est == pytest.approx(exact, abs=0.1)
    assert est <= exact + 0.1


def test_report_clamps_and_serializes():
    r = metrics.MetricsReport(elbo=-1.0, rmse=0.2, mmd2=-1e-13, w2sq=0.1, settings={"k": 3})
    assert r.mmd2 == 0.0
    assert '"rmse": 0.2' in r.to_json()
    assert "MMD^2" in r.table()
