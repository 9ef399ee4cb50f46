"""Evaluation metrics: particle ELBO, RMSE, RBF-MMD^2, Sinkhorn W2^2, k-NN entropy."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist, pdist
from scipy.special import digamma, gammaln

from .energy import EnergyModel, energy

log = logging.getLogger(__name__)


class BandwidthError(ValueError):
    pass


@dataclass
class MetricsReport:
    elbo: float
    rmse: float
    mmd2: float
    w2sq: float
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        # Unbiased MMD^2 may dip below zero; report clamps.
        self.mmd2 = max(float(self.mmd2), 0.0)
        self.rmse = float(self.rmse)
        self.w2sq = max(float(self.w2sq), 0.0)
        self.elbo = float(self.elbo)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self, title: str = "") -> str:
        rows = [
            ("ELBO", self.elbo),
            ("RMSE", self.rmse),
            ("MMD^2", self.mmd2),
            ("W2^2", self.w2sq),
        ]
        lines = [title] if title else []
        lines += [f"  {name:<6} {val: .4f}" for name, val in rows]
        return "\n".join(lines)


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def rmse(a, b) -> float:
    """sqrt of the mean squared error per coordinate, rows paired positionally."""
    a, b = _as_2d(a), _as_2d(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def median_bandwidth(a, b) -> float:
    pooled = np.vstack([_as_2d(a), _as_2d(b)])
    h = float(np.median(pdist(pooled)))
    if not h > 0:
        raise BandwidthError("median pairwise distance is zero")
    return h


def mmd2_rbf(a, b, bandwidth="median", unbiased: bool = True) -> float:
    """Squared MMD with k(u, v) = exp(-|u - v|^2 / (2 h^2)).

    ``bandwidth`` is either ``"median"`` (median pairwise distance over the
    pooled sample) or a fixed positive h. The unbiased U-statistic drops the
    diagonal of the within-sample kernel matrices; the biased V-statistic
    keeps it and is exactly zero for identical samples.
    """
    a, b = _as_2d(a), _as_2d(b)
    # Canonical argument order so that swapping A and B is bit-identical.
    if (len(a), a.tobytes()) > (len(b), b.tobytes()):
        a, b = b, a
    m, n = len(a), len(b)
    h = median_bandwidth(a, b) if bandwidth == "median" else float(bandwidth)
    if not h > 0:
        raise BandwidthError("bandwidth must be positive")
    scale = -0.5 / h**2
    kaa = np.exp(scale * cdist(a, a, "sqeuclidean"))
    kbb = np.exp(scale * cdist(b, b, "sqeuclidean"))
    kab = np.exp(scale * cdist(a, b, "sqeuclidean"))
    if unbiased:
        if m < 2 or n < 2:
            raise ValueError("unbiased MMD needs at least two points per sample")
        taa = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
        tbb = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    else:
        taa = kaa.mean()
        tbb = kbb.mean()
    return float(taa + tbb - 2.0 * kab.mean())


@dataclass
class SinkhornResult:
    cost: float
    marginal_error: float
    plan: np.ndarray


@numba.njit(cache=True)
def _potential_update(c, other, log_w, eps, out):
    # out_i = eps * (log_w_i - logsumexp_j((other_j - c_ij) / eps))
    m, n = c.shape
    for i in range(m):
        mx = -np.inf
        for j in range(n):
            v = (other[j] - c[i, j]) / eps
            if v > mx:
                mx = v
        s = 0.0
        for j in range(n):
            s += math.exp((other[j] - c[i, j]) / eps - mx)
        out[i] = eps * (log_w[i] - mx - math.log(s))


def sinkhorn(a, b, epsilon: float = 0.05, iters: int = 200, anneal: bool = True) -> SinkhornResult:
    """Log-domain Sinkhorn with uniform marginals and squared Euclidean cost.

    Runs a fixed number of alternating potential updates. With ``anneal`` the
    regularization starts at the largest cost entry and decays geometrically
    (factor 0.8 per iteration) to ``epsilon``, which warm-starts the
    potentials; the remaining iterations run at ``epsilon`` and the fixed
    point is unchanged. ``cost`` is the transport cost <P, C> of the final
    plan, without the entropy term; ``marginal_error`` is the L1 violation of
    the marginal not enforced by the last update.
    """
    a, b = _as_2d(a), _as_2d(b)
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    # Solve in a canonical argument order so the value is exactly symmetric.
    if (len(a), a.tobytes()) > (len(b), b.tobytes()):
        res = sinkhorn(b, a, epsilon, iters, anneal)
        return SinkhornResult(res.cost, res.marginal_error, res.plan.T)
    m, n = len(a), len(b)
    c = cdist(a, b, "sqeuclidean")
    log_mu = np.full(m, -math.log(m))
    log_nu = np.full(n, -math.log(n))
    f = np.zeros(m)
    g = np.zeros(n)
    eps = max(float(c.max()), epsilon) if anneal else epsilon
    ct = np.ascontiguousarray(c.T)
    for _ in range(int(iters)):
        _potential_update(c, g, log_mu, eps, f)
        _potential_update(ct, f, log_nu, eps, g)
        eps = max(0.8 * eps, epsilon)
    # Plan at the target epsilon (the schedule has reached it after ~log budget).
    plan = np.exp((f[:, None] + g[None, :] - c) / epsilon)
    err = float(np.abs(plan.sum(axis=1) - 1.0 / m).sum())
    return SinkhornResult(float(np.sum(plan * c)), err, plan)


def sinkhorn_w2sq(a, b, epsilon: float = 0.05, iters: int = 200, anneal: bool = True) -> float:
    return sinkhorn(a, b, epsilon, iters, anneal).cost


def _log_unit_ball(p: int) -> float:
    return 0.5 * p * math.log(math.pi) - gammaln(0.5 * p + 1.0)


def _kl_from_distances(eps: np.ndarray, n: int, p: int, k: int) -> np.ndarray:
    if np.any(eps <= 0):
        warnings.warn("duplicate points in k-NN entropy; zero distances set to 1e-12")
        eps = np.maximum(eps, 1e-12)
    return digamma(n) - digamma(k) + _log_unit_ball(p) + p * np.mean(np.log(eps), axis=-1)


def knn_entropy(s, k: int = 3) -> float:
    """Kozachenko-Leonenko differential entropy estimate (nats)."""
    s = _as_2d(s)
    n, p = s.shape
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {n}")
    dist, _ = cKDTree(s).query(s, k=k + 1)
    return float(_kl_from_distances(dist[:, k], n, p, k))


def knn_entropy_batch(s: np.ndarray, k: int = 3) -> np.ndarray:
    """Per-group estimates for a stack of small pools ``s[g, i, :]``."""
    s = np.asarray(s, dtype=np.float64)
    _, n, p = s.shape
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points per pool, got {n}")
    diff = s[:, :, None, :] - s[:, None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    # Column 0 after sorting is the self-distance.
    eps = np.sort(d, axis=-1)[:, :, k]
    return _kl_from_distances(eps, n, p, k)


def saddle_value(
    model: EnergyModel,
    x_pos: np.ndarray,
    latent: np.ndarray,
    neg_x: np.ndarray,
    neg_z: np.ndarray,
    k: int = 3,
) -> dict:
    """Particle plug-in of E_neg[E] - H(neg) - mean_i (E_{q^i}[E] - H(q^i)).

    ``latent[i]`` holds the M particles bound to ``x_pos[i]``. Returns the
    parts and their combination; the value equals the particle ELBO.
    """
    nb, m, ell = latent.shape
    e_pos = energy(model, np.repeat(x_pos, m, axis=0), latent.reshape(-1, ell)).reshape(nb, m)
    e_neg = energy(model, neg_x, neg_z)
    h_pos = knn_entropy_batch(latent, k)
    h_neg = knn_entropy(np.hstack([neg_x, neg_z]), k)
    pos_term = float(np.mean(e_pos.mean(axis=1) - h_pos))
    neg_term = float(e_neg.mean() - h_neg)
    return {
        "value": neg_term - pos_term,
        "pos_energy": float(e_pos.mean()),
        "neg_energy": float(e_neg.mean()),
        "pos_entropy": float(h_pos.mean()),
        "neg_entropy": float(h_neg),
    }


def elbo(model, x_pos, latent, neg_x, neg_z, k: int = 3) -> float:
    """Particle ELBO (larger is better).

    mean_i [-E_{q^i}[E] + H(q^i)] + [E_neg[E] - H(neg)], which is exact when
    the pools follow p(z | x^i) and p(x, z).
    """
    return saddle_value(model, x_pos, latent, neg_x, neg_z, k)["value"]
