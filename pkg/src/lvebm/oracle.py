"""Exact references for the theory checks.

Finite-grid variational identities, a bilinear-Gaussian latent-variable model
with closed-form conditionals and partition function, and Langevin instances
with a standard-normal or quadratic target where contraction rates and moment
envelopes are known analytically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson
from scipy.special import logsumexp, xlogy

from . import dynamics
from .dynamics import ParticleState, TrainConfig
from .energy import EnergyModel, init_model
from .rng import NoiseSource, stream


class OracleError(ValueError):
    pass


# -- finite grids -------------------------------------------------------------


@dataclass
class GridMeasure:
    """Probability weights on a finite support, with base-measure weights."""

    support: np.ndarray
    weights: np.ndarray
    base: np.ndarray | None = None

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = len(self.weights)
        self.base = np.ones(n) if self.base is None else np.asarray(self.base, dtype=np.float64)
        if len(self.support) != n or len(self.base) != n:
            raise OracleError("support, weights and base must have equal length")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise OracleError("weights must be non-negative and sum to 1")
        if np.any(self.base <= 0):
            raise OracleError("base-measure weights must be positive")

    def entropy(self) -> float:
        """-sum q log(q / base), with 0 log 0 = 0."""
        q = self.weights
        return float(-np.sum(xlogy(q, q) - xlogy(q, self.base)))


def dv_value(f, q: GridMeasure) -> float:
    """E_q[f] + H(q) relative to the base measure."""
    return float(np.dot(q.weights, np.asarray(f, dtype=np.float64))) + q.entropy()


def dv_identity_check(f, base: GridMeasure):
    """(log sum base e^f, value at the softmax optimizer, gap)."""
    f = np.asarray(f, dtype=np.float64)
    lhs = float(logsumexp(f, b=base.base))
    logits = f + np.log(base.base)
    q = np.exp(logits - logsumexp(logits))
    q = q / q.sum()
    rhs = dv_value(f, GridMeasure(base.support, q, base.base))
    return lhs, rhs, lhs - rhs


def gibbs_identity_check(e, q: GridMeasure) -> float:
    """|(E_q[E] - H(q)) - (KL(q || p) - log Z)| with p proportional to e^{-E}.

    Counting base. Applied to one row E(x, .) of a joint grid it checks the
    conditional identity with the conditional partition function Z(x).
    """
    e = np.asarray(e, dtype=np.float64)
    w = q.weights
    lhs = float(np.dot(w, e)) - q.entropy()
    log_z = float(logsumexp(-e))
    log_p = -e - log_z
    kl = float(np.sum(xlogy(w, w)) - np.dot(w, log_p))
    return abs(lhs - (kl - log_z))


def conditional_gibbs_check(e_grid, row: int, q: GridMeasure) -> float:
    """Gibbs identity for p(z | x_row) on a joint grid ``e_grid[x, z]``."""
    return gibbs_identity_check(np.asarray(e_grid)[row], q)


# -- bilinear Gaussian model ---------------------------------------------------


def _as_precision(lam, n: int) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 0:
        return float(lam) * np.eye(n)
    if lam.shape != (n, n) or not np.allclose(lam, lam.T, rtol=0, atol=1e-14):
        raise OracleError(f"precision block must be a scalar or a symmetric {n}x{n} matrix")
    return lam


@dataclass
class GaussianOracle:
    """E(x, z) = x'Lx x / 2 + z'Lz z / 2 - x'A z.

    Scalar precisions give the isotropic envelope of the neural model; matrix
    precisions are allowed so that correlated posteriors can be built.
    """

    A: np.ndarray
    lam_x: np.ndarray
    lam_z: np.ndarray
    precision: np.ndarray = field(init=False, repr=False)
    cov: np.ndarray = field(init=False, repr=False)
    log_z: float = field(init=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        d, ell = self.A.shape
        self.lam_x = _as_precision(self.lam_x, d)
        self.lam_z = _as_precision(self.lam_z, ell)
        p = np.block([[self.lam_x, -self.A], [-self.A.T, self.lam_z]])
        try:
            chol = np.linalg.cholesky(p)
            np.linalg.cholesky(self.lam_x)
            np.linalg.cholesky(self.lam_z)
        except np.linalg.LinAlgError as exc:
            raise OracleError("joint precision is not positive definite") from exc
        self.precision = p
        self.cov = np.linalg.inv(p)
        log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
        self.log_z = 0.5 * (d + ell) * math.log(2.0 * math.pi) - 0.5 * log_det

    @property
    def x_dim(self) -> int:
        return self.A.shape[0]

    @property
    def z_dim(self) -> int:
        return self.A.shape[1]

    def energy(self, x, z) -> np.ndarray:
        x, z = np.atleast_2d(x), np.atleast_2d(z)
        return (
            0.5 * np.einsum("ni,ij,nj->n", x, self.lam_x, x)
            + 0.5 * np.einsum("ni,ij,nj->n", z, self.lam_z, z)
            - np.einsum("ni,ij,nj->n", x, self.A, z)
        )

    def grad_x(self, x, z) -> np.ndarray:
        return np.atleast_2d(x) @ self.lam_x - np.atleast_2d(z) @ self.A.T

    def grad_z(self, x, z) -> np.ndarray:
        return np.atleast_2d(z) @ self.lam_z - np.atleast_2d(x) @ self.A

    def x_given_z(self, z):
        """(mean rows, covariance) of p(x | z)."""
        c = np.linalg.inv(self.lam_x)
        return np.atleast_2d(z) @ (c @ self.A).T, c

    def z_given_x(self, x):
        c = np.linalg.inv(self.lam_z)
        return np.atleast_2d(x) @ (c @ self.A.T).T, c

    @property
    def marginal_cov_x(self) -> np.ndarray:
        return self.cov[: self.x_dim, : self.x_dim]

    def log_px(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        s = self.marginal_cov_x
        sign, log_det = np.linalg.slogdet(s)
        quad = np.einsum("ni,ij,nj->n", x, np.linalg.inv(s), x)
        return -0.5 * (quad + log_det + self.x_dim * math.log(2.0 * math.pi))

    def sample(self, n: int, seed: int = 0):
        """Exact joint draws (x, z)."""
        chol = np.linalg.cholesky(self.cov)
        u = stream(seed, "oracle-joint").standard_normal((n, self.x_dim + self.z_dim)) @ chol.T
        return u[:, : self.x_dim], u[:, self.x_dim:]


def gaussian_oracle_build(A, lam_x, lam_z) -> GaussianOracle:
    return GaussianOracle(A, lam_x, lam_z)


def quadrature_log_px(oracle: GaussianOracle, x, nodes: int = 2001, width: float = 10.0) -> np.ndarray:
    """log integral of e^{-E(x, z)} dz - log Z by composite Simpson on a box of
    +-width conditional standard deviations (latent dimension 1 or 2)."""
    ell = oracle.z_dim
    if ell not in (1, 2):
        raise OracleError("quadrature cross-check supports latent dimension 1 or 2")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mean, c = oracle.z_given_x(x)
    sd = np.sqrt(np.diag(c))
    out = []
    for xi, mu in zip(x, mean):
        axes = [np.linspace(m - width * s, m + width * s, nodes) for m, s in zip(mu, sd)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, ell)
        e = oracle.energy(np.broadcast_to(xi, (len(grid), oracle.x_dim)), grid)
        shift = e.min()
        vals = np.exp(-(e - shift)).reshape((nodes,) * ell)
        for ax in reversed(axes):
            vals = simpson(vals, x=ax, axis=-1)
        out.append(math.log(float(vals)) - shift - oracle.log_z)
    return np.asarray(out)


def restricted_elbo_gap(oracle: GaussianOracle, x):
    """Best isotropic-Gaussian ELBO per datum versus the exact log-likelihood.

    For q = N(m, s^2 I): ELBO = -E(x, m) - s^2 tr(Lz) / 2 + (l/2) log(2 pi e s^2)
    - log Z, maximized at the posterior mean and s^2 = l / tr(Lz). Returns the
    averages over the rows of ``x`` as (elbo_restricted, loglik_exact, gap).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ell = oracle.z_dim
    m, _ = oracle.z_given_x(x)
    tr = float(np.trace(oracle.lam_z))
    s2 = ell / tr
    elbo = (
        -oracle.energy(x, m)
        - 0.5 * s2 * tr
        + 0.5 * ell * math.log(2.0 * math.pi * math.e * s2)
        - oracle.log_z
    )
    ll = oracle.log_px(x)
    e_mean, l_mean = float(np.mean(elbo)), float(np.mean(ll))
    return e_mean, l_mean, l_mean - e_mean


def isotropic_projection_gap(lam_z) -> float:
    """KL from the best isotropic fit to N(., Lz^{-1}): (l log(tr Lz / l) - log det Lz) / 2."""
    lam_z = np.atleast_2d(np.asarray(lam_z, dtype=np.float64))
    ell = len(lam_z)
    return 0.5 * (ell * math.log(np.trace(lam_z) / ell) - np.linalg.slogdet(lam_z)[1])


# -- Gaussian closed forms ------------------------------------------------------


def kl_to_standard(mean, cov) -> float:
    """KL(N(mean, cov) || N(0, I))."""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    p = len(mean)
    return 0.5 * float(np.trace(cov) + mean @ mean - p - np.linalg.slogdet(cov)[1])


def w2sq_to_standard(mean, cov) -> float:
    """Bures W2^2 between N(mean, cov) and N(0, I)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    ev = np.clip(np.linalg.eigvalsh(cov), 0.0, None)
    return float(mean @ mean + np.sum((np.sqrt(ev) - 1.0) ** 2))


# -- Langevin instances ----------------------------------------------------------


def quadratic_model(x_dim: int, z_dim: int, lam: float = 1.0) -> EnergyModel:
    """Zero network (no hidden layers, zero weights): E = lam/2 (|x|^2 + |z|^2)."""
    model = init_model(x_dim, z_dim, hidden=(), lambda_x=lam, lambda_z=lam, rng=0)
    for w in model.weights:
        w[...] = 0.0
    return model


@dataclass
class ContractionTrajectory:
    t: np.ndarray
    kl: np.ndarray
    kl_exact: np.ndarray
    w2sq: np.ndarray
    means: list
    covs: list

    @property
    def ratio(self) -> np.ndarray:
        """Empirical KL(t)/KL(0) divided by the predicted e^{-2t}."""
        return (self.kl / self.kl[0]) / np.exp(-2.0 * self.t)


def ou_contraction_test(
    m0: float = 2.0,
    s0: float = 1.0,
    t_grid=(0.0, 0.25, 0.5, 1.0),
    eta: float = 1e-3,
    n_particles: int = 20000,
    seed: int = 0,
) -> ContractionTrajectory:
    """Joint Langevin on E = |x|^2/2 + |z|^2/2 from x ~ N(m0, s0^2), z ~ N(0, 1).

    The z coordinate starts at its target, so the joint KL equals the 1D one
    in x; the analytic prediction uses m(t) = m0 e^{-t}, s^2(t) = 1 + (s0^2 - 1) e^{-2t}.
    """
    t_grid = np.asarray(sorted(t_grid), dtype=np.float64)
    model = quadratic_model(1, 1)
    rng = stream(seed, "ou-init")
    x = m0 + s0 * rng.standard_normal((n_particles, 1))
    z = rng.standard_normal((n_particles, 1))
    cfg = TrainConfig(eta_xz=eta, T=0, M=1, D=n_particles, minibatch=1, seed=seed)
    state = ParticleState(np.zeros((1, 1, 1)), x, z, seed, 0)
    noise = NoiseSource(seed)
    checkpoints = np.rint(t_grid / eta).astype(int)
    kls, w2s, means, covs = [], [], [], []
    for target in checkpoints:
        while state.step < target:
            dynamics.joint_step(state, model, cfg, noise)
            state.step += 1
        u = np.hstack([state.neg_x, state.neg_z])
        mu = u.mean(axis=0)
        c = np.cov(u, rowvar=False)
        means.append(mu)
        covs.append(c)
        kls.append(kl_to_standard(mu, c))
        w2s.append(w2sq_to_standard(mu, c))
    t_real = checkpoints * eta
    m_t = m0 * np.exp(-t_real)
    s2_t = 1.0 + (s0**2 - 1.0) * np.exp(-2.0 * t_real)
    kl_exact = 0.5 * (s2_t + m_t**2 - 1.0 - np.log(s2_t))
    return ContractionTrajectory(t_real, np.asarray(kls), kl_exact, np.asarray(w2s), means, covs)


def talagrand_check(traj: ContractionTrajectory, rho: float = 1.0, tol: float = 1e-9) -> bool:
    """W2^2 <= (2 / rho) KL at every recorded time."""
    return bool(np.all(traj.w2sq <= (2.0 / rho) * traj.kl + tol))


def gronwall_envelope(t, m2_0: float, m: float, b: float, ell: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    decay = np.exp(-2.0 * m * t)
    return decay * m2_0 + ((b + ell) / m) * (1.0 - decay)


@dataclass
class MomentTrace:
    t: np.ndarray
    m2: np.ndarray
    envelope: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        return self.m2 / self.envelope


def second_moment_trace(
    lam: float = 1.0,
    ell: int = 2,
    eta: float = 1e-3,
    T: int = 5000,
    n_particles: int = 10000,
    start_scale: float = 1.0,
    record_every: int = 50,
    model: EnergyModel | None = None,
    dissipativity: tuple[float, float] | None = None,
    seed: int = 0,
) -> MomentTrace:
    """Latent Langevin with x clamped at 0; M2 of the z particles against the
    envelope e^{-2mt} M2(0) + ((b + l)/m)(1 - e^{-2mt}).

    Without ``model`` the energy is the pure quadratic lam/2 |z|^2, so m = lam
    and b = 0. A neural ``model`` needs its (m, b) passed explicitly; with
    clipped network gradient |g| <= c and envelope lam, m = lam/2 and
    b = c^2 / (2 lam).
    """
    if model is None:
        model = quadratic_model(1, ell, lam)
        m_const, b_const = lam, 0.0
    else:
        if dissipativity is None:
            raise OracleError("dissipativity constants (m, b) are required for a neural model")
        m_const, b_const = dissipativity
        ell = model.z_dim
    cfg = TrainConfig(eta_z=eta, T=0, M=n_particles, D=1, minibatch=1, seed=seed)
    latent = start_scale * stream(seed, "m2-init").standard_normal((1, n_particles, ell))
    state = ParticleState(latent, np.zeros((1, model.x_dim)), np.zeros((1, ell)), seed, 0)
    data = np.zeros((1, model.x_dim))
    rows = np.array([0])
    noise = NoiseSource(seed)
    ts, m2 = [], []
    m2_0 = float(np.mean(np.sum(latent[0] ** 2, axis=1)))
    for k in range(T + 1):
        if k % record_every == 0 or k == T:
            ts.append(k * eta)
            m2.append(float(np.mean(np.sum(state.latent[0] ** 2, axis=1))))
        if k < T:
            dynamics.latent_step(state, model, data, rows, cfg, noise)
            state.step += 1
    ts = np.asarray(ts)
    return MomentTrace(ts, np.asarray(m2), gronwall_envelope(ts, m2_0, m_const, b_const, ell))


def second_moment_bound_check(trace: MomentTrace, headroom: float = 1.2) -> bool:
    return bool(np.all(trace.m2 <= headroom * trace.envelope))
