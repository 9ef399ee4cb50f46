"""Coupled Langevin particle dynamics for latent-variable EBM training.

Per-datum latent pools track p(z | x^i), a persistent joint pool tracks
p(x, z), and the network parameters take ascent steps on the energy contrast
(negative minus positive). Noise comes from counter-based streams addressed by
(seed, pool, iteration), so a run is reproducible regardless of how the
particle sweeps are scheduled.
"""

from __future__ import annotations

import csv
import io
import logging
import contextlib
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .energy import (
    EnergyModel,
    ParamGradient,
    clip_rows,
    energy,
    energy_and_grad_params,
    network_grad_input,
)
from .metrics import knn_entropy, knn_entropy_batch
from .rng import NoiseSource, stream

log = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"LVEBMP1"

# Mutation-test switch: -1 flips the sign of every sampler drift. Set by the
# LVEBM_MUTATE_DRIFT environment variable or the ``mutated_drift`` context.
DRIFT_SIGN = -1.0 if os.environ.get("LVEBM_MUTATE_DRIFT") == "1" else 1.0


@contextlib.contextmanager
def mutated_drift():
    global DRIFT_SIGN
    saved, DRIFT_SIGN = DRIFT_SIGN, -1.0
    try:
        yield
    finally:
        DRIFT_SIGN = saved


class NumericalAbort(RuntimeError):
    """Non-finite particle or parameter; carries the iteration index."""

    def __init__(self, message: str, iteration: int | None = None):
        self.iteration = iteration
        prefix = f"iteration {iteration}: " if iteration is not None else ""
        super().__init__(prefix + message)


@dataclass
class TrainConfig:
    eta_z: float = 1e-3
    eta_xz: float = 1e-3
    alpha: float = 1e-4
    T: int = 5000
    M: int = 10
    D: int = 1024
    rho_refresh: float = 0.05
    refresh_fraction: float = 0.1
    minibatch: int = 256
    clip_norm: float = 100.0
    seed: int = 0
    entropy_k: int = 3
    latent_steps: int = 1
    joint_steps: int = 1
    optimizer: str = "sgd"
    alpha_final: float | None = None
    log_every: int = 0

    def __post_init__(self):
        self.validate()

    def learning_rate(self, t: int) -> float:
        """alpha, or a cosine decay from alpha to alpha_final over T iterations."""
        if self.alpha_final is None or self.T <= 1:
            return self.alpha
        w = 0.5 * (1.0 + math.cos(math.pi * min(t, self.T - 1) / (self.T - 1)))
        return self.alpha_final + (self.alpha - self.alpha_final) * w

    def validate(self):
        for name in ("eta_z", "eta_xz", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        if self.alpha_final is not None and not self.alpha_final >= 0:
            raise ValueError("alpha_final must be non-negative")
        if self.T < 0 or self.M < 1 or self.D < 1 or self.minibatch < 1:
            raise ValueError("T >= 0 and M, D, minibatch >= 1 required")
        if not 0.0 <= self.rho_refresh <= 1.0:
            raise ValueError("rho_refresh must lie in [0, 1]")
        if not 0.0 < self.refresh_fraction <= 1.0:
            raise ValueError("refresh_fraction must lie in (0, 1]")
        if self.latent_steps < 1 or self.joint_steps < 1:
            raise ValueError("latent_steps and joint_steps must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")


@dataclass
class ParticleState:
    latent: np.ndarray  # (N, M, l)
    neg_x: np.ndarray  # (D, d)
    neg_z: np.ndarray  # (D, l)
    seed: int
    step: int = 0

    @property
    def shape(self):
        n, m, ell = self.latent.shape
        return n, m, self.neg_x.shape[0], self.neg_x.shape[1], ell

    def copy(self) -> "ParticleState":
        return ParticleState(
            self.latent.copy(), self.neg_x.copy(), self.neg_z.copy(), self.seed, self.step
        )

    def check_finite(self, where: str):
        for name in ("latent", "neg_x", "neg_z"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalAbort(
                    f"non-finite {name} particles after {where}; step size too large?",
                    self.step,
                )


@dataclass
class TrainHistory:
    objective: list = field(default_factory=list)
    pos_energy_mean: list = field(default_factory=list)
    neg_energy_mean: list = field(default_factory=list)
    neg_pool_second_moment: list = field(default_factory=list)
    entropy_missing: list = field(default_factory=list)

    def __len__(self):
        return len(self.objective)

    def append(self, objective, pos_e, neg_e, m2, missing=False):
        self.objective.append(float(objective))
        self.pos_energy_mean.append(float(pos_e))
        self.neg_energy_mean.append(float(neg_e))
        self.neg_pool_second_moment.append(float(m2))
        self.entropy_missing.append(bool(missing))

    @property
    def loss(self) -> np.ndarray:
        """Training loss: the negated saddle objective."""
        return -np.asarray(self.objective)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "objective", "pos_energy_mean", "neg_energy_mean", "neg_pool_second_moment"])
        for t in range(len(self)):
            w.writerow(
                [
                    t,
                    repr(-self.objective[t]),
                    repr(self.pos_energy_mean[t]),
                    repr(self.neg_energy_mean[t]),
                    repr(self.neg_pool_second_moment[t]),
                ]
            )
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        hist = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                hist.append(
                    -float(row["objective"]),
                    float(row["pos_energy_mean"]),
                    float(row["neg_energy_mean"]),
                    float(row["neg_pool_second_moment"]),
                )
        return hist


def moving_average(values, window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` entries (fewer at the start)."""
    v = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    c = np.concatenate([[0.0], np.cumsum(v)])
    hi = np.arange(1, len(v) + 1)
    lo = np.maximum(hi - window, 0)
    return (c[hi] - c[lo]) / (hi - lo)


def init_particles(n: int, config: TrainConfig, d: int, ell: int) -> ParticleState:
    """All pools i.i.d. standard normal, drawn from the seed's init stream."""
    if min(n, d, ell) < 1:
        raise ValueError("N, d, l must be >= 1")
    rng = stream(config.seed, "init")
    latent = rng.standard_normal((n, config.M, ell))
    neg_x = rng.standard_normal((config.D, d))
    neg_z = rng.standard_normal((config.D, ell))
    return ParticleState(latent, neg_x, neg_z, config.seed, 0)


def latent_drift(model: EnergyModel, x: np.ndarray, z: np.ndarray, clip_norm: float) -> np.ndarray:
    """grad_z E with the network part clipped row-wise at ``clip_norm``."""
    gu = network_grad_input(model, x, z)[:, model.x_dim:]
    return clip_rows(gu, clip_norm) + model.lambda_z * z


def joint_drift(model: EnergyModel, x: np.ndarray, z: np.ndarray, clip_norm: float):
    """(grad_x E, grad_z E) at the same point, network part clipped jointly."""
    gu = clip_rows(network_grad_input(model, x, z), clip_norm)
    d = model.x_dim
    return gu[:, :d] + model.lambda_x * x, gu[:, d:] + model.lambda_z * z


def latent_step(
    state: ParticleState,
    model: EnergyModel,
    data: np.ndarray,
    rows,
    config: TrainConfig,
    noise: NoiseSource | None = None,
    inner: int = 0,
) -> ParticleState:
    """One Euler-Maruyama step for the latent particles of the datum rows ``rows``.

    Noise comes from a per-(step, inner) block indexed by datum row, so the
    result for a row does not depend on which other rows share the batch.
    """
    rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
    _, m, ell = state.latent.shape
    z = state.latent[rows].reshape(-1, ell)
    x = np.repeat(np.atleast_2d(data)[rows], m, axis=0)
    drift = latent_drift(model, x, z, config.clip_norm)
    xi = _latent_noise(noise, state, rows, m, ell, inner)
    z_new = z - DRIFT_SIGN * config.eta_z * drift + math.sqrt(2.0 * config.eta_z) * xi
    if not np.all(np.isfinite(z_new)):
        raise NumericalAbort("non-finite latent particle; eta_z too large?", state.step)
    state.latent[rows] = z_new.reshape(len(rows), m, ell)
    return state


def _latent_noise(noise, state, rows, m, ell, inner=0):
    if noise is not None:
        return noise.normal("latent", state.step, (len(rows) * m, ell), inner)
    n = state.latent.shape[0]
    counters = (state.step, inner) if inner else (state.step,)
    block = stream(state.seed, "latent", *counters).standard_normal((n, m, ell))
    return block[rows].reshape(-1, ell)


def joint_step(
    state: ParticleState,
    model: EnergyModel,
    config: TrainConfig,
    noise: NoiseSource | None = None,
    inner: int = 0,
) -> ParticleState:
    """Simultaneous Langevin update of the negative pool.

    Both coordinate drifts are evaluated at the pre-step pair.
    """
    d = state.neg_x.shape[1]
    ell = state.neg_z.shape[1]
    gx, gz = joint_drift(model, state.neg_x, state.neg_z, config.clip_norm)
    src = noise if noise is not None else NoiseSource(state.seed)
    xi = src.normal("joint", state.step, (state.neg_x.shape[0], d + ell), inner)
    s = math.sqrt(2.0 * config.eta_xz)
    step = DRIFT_SIGN * config.eta_xz
    new_x = state.neg_x - step * gx + s * xi[:, :d]
    new_z = state.neg_z - step * gz + s * xi[:, d:]
    if not (np.all(np.isfinite(new_x)) and np.all(np.isfinite(new_z))):
        raise NumericalAbort("non-finite negative particle; eta_xz too large?", state.step)
    state.neg_x, state.neg_z = new_x, new_z
    return state


def _sorted_pass(model: EnergyModel, x: np.ndarray, z: np.ndarray):
    # Rows in lexicographic order, so equal multisets give bit-identical sums.
    order = np.lexsort(np.hstack([x, z]).T[::-1])
    e, g = energy_and_grad_params(model, x[order], z[order], weight=np.full(len(x), 1.0 / len(x)))
    out = np.empty_like(e)
    out[order] = e
    return out, g


def _contrast(model: EnergyModel, pos_x, pos_z, neg_x, neg_z):
    e_neg, g_neg = _sorted_pass(model, neg_x, neg_z)
    e_pos, g_pos = _sorted_pass(model, pos_x, pos_z)
    return e_pos, e_neg, g_neg - g_pos


def contrast_gradient(
    model: EnergyModel, pos_x: np.ndarray, pos_z: np.ndarray, neg_x: np.ndarray, neg_z: np.ndarray
) -> ParamGradient:
    """mean grad_theta E over negatives minus mean over positives."""
    return _contrast(model, pos_x, pos_z, neg_x, neg_z)[2]


def _positives(state: ParticleState, data: np.ndarray, rows):
    _, m, ell = state.latent.shape
    pos_x = np.repeat(np.atleast_2d(data)[rows], m, axis=0)
    return pos_x, state.latent[rows].reshape(-1, ell)


class AdamAscent:
    """Adam applied to the ascent direction; moments persist across iterations."""

    def __init__(self, model: EnergyModel, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = [np.zeros_like(p) for p in model.params()]
        self.v = [np.zeros_like(p) for p in model.params()]
        self.t = 0

    def direction(self, g: ParamGradient) -> ParamGradient:
        self.t += 1
        out = []
        for i, gi in enumerate(_interleave(g)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * gi
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * gi * gi
            mh = self.m[i] / (1 - self.b1**self.t)
            vh = self.v[i] / (1 - self.b2**self.t)
            out.append(mh / (np.sqrt(vh) + self.eps))
        return ParamGradient(out[0::2], out[1::2])


def _interleave(g: ParamGradient):
    # Same order as EnergyModel.params(): W0, b0, W1, b1, ...
    for w, b in zip(g.weights, g.biases):
        yield w
        yield b


def _apply(model: EnergyModel, g: ParamGradient, lr: float, step: int, opt=None):
    model.apply_update(g if opt is None else opt.direction(g), lr)
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NumericalAbort(f"non-finite parameters in layer {l}", step)


def param_ascent(
    model: EnergyModel,
    state: ParticleState,
    data: np.ndarray,
    rows,
    config: TrainConfig,
) -> EnergyModel:
    """theta += alpha * (mean_neg grad E - mean_pos grad E), in place.

    Positives are the post-step latent particles of ``rows`` paired with their
    data points; the envelope coefficients are not touched.
    """
    rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
    pos_x, pos_z = _positives(state, data, rows)
    g = contrast_gradient(model, pos_x, pos_z, state.neg_x, state.neg_z)
    _apply(model, g, config.alpha, state.step)
    return model


def refresh_pool(state: ParticleState, config: TrainConfig) -> ParticleState:
    """With probability rho_refresh, redraw a random fraction of the negative pool."""
    rng = stream(state.seed, "refresh", state.step)
    if not rng.random() < config.rho_refresh:
        return state
    dpool, d = state.neg_x.shape
    ell = state.neg_z.shape[1]
    count = int(round(config.refresh_fraction * dpool))
    if count == 0:
        return state
    slots = np.sort(rng.choice(dpool, size=count, replace=False))
    state.neg_x[slots] = rng.standard_normal((count, d))
    state.neg_z[slots] = rng.standard_normal((count, ell))
    return state


def estimate_objective(
    state: ParticleState,
    model: EnergyModel,
    data: np.ndarray,
    rows=None,
    k: int = 3,
) -> dict:
    """Particle estimate of the saddle objective F.

    F = E_neg[E] - H(neg) - mean_i (E_{q^i}[E] - H(q^i)), averaged over
    ``rows`` (all data when None). When a pool has too few particles for the
    k-NN estimator the entropy terms are dropped and ``missing`` is set.
    """
    data = np.atleast_2d(data)
    rows = np.arange(len(data)) if rows is None else np.atleast_1d(rows)
    pos_x, pos_z = _positives(state, data, rows)
    e_pos = energy(model, pos_x, pos_z)
    e_neg = energy(model, state.neg_x, state.neg_z)
    return _objective(state, rows, e_pos, e_neg, k)


def _objective(state: ParticleState, rows, e_pos, e_neg, k: int) -> dict:
    lat = state.latent[rows]
    nb, m, _ = lat.shape
    e_pos = np.asarray(e_pos).reshape(nb, m)
    out = {"pos_energy": float(e_pos.mean()), "neg_energy": float(e_neg.mean())}
    contrast = out["neg_energy"] - float(np.mean(e_pos.mean(axis=1)))
    try:
        h_pos = knn_entropy_batch(lat, k)
        h_neg = knn_entropy(np.hstack([state.neg_x, state.neg_z]), k)
    except ValueError:
        out.update(value=contrast, missing=True, pos_entropy=float("nan"), neg_entropy=float("nan"))
        return out
    out.update(
        value=contrast - float(h_neg) + float(h_pos.mean()),
        missing=False,
        pos_entropy=float(h_pos.mean()),
        neg_entropy=float(h_neg),
    )
    return out


def minibatch_rows(seed: int, step: int, n: int, b: int) -> np.ndarray:
    if b >= n:
        return np.arange(n)
    return np.sort(stream(seed, "minibatch", step).choice(n, size=b, replace=False))


def train(
    data: np.ndarray,
    config: TrainConfig,
    model0: EnergyModel,
    state: ParticleState | None = None,
    noise: NoiseSource | None = None,
    callback=None,
):
    """Run ``config.T`` iterations; returns (model, state, history).

    ``model0`` is copied, never mutated. Each iteration advances the latent
    rows of one minibatch, the negative pool, then takes the parameter step at
    the post-step particles and optionally refreshes the pool. ``callback``
    is called as ``callback(t, model, state)`` after every iteration.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if len(data) == 0:
        raise ValueError("empty dataset")
    if data.shape[1] != model0.x_dim:
        raise ValueError(f"data has d={data.shape[1]}, model expects {model0.x_dim}")
    model = model0.copy()
    n = len(data)
    if state is None:
        state = init_particles(n, config, model.x_dim, model.z_dim)
    history = TrainHistory()
    opt = AdamAscent(model) if config.optimizer == "adam" else None
    t0 = time.time()
    for t in range(config.T):
        rows = minibatch_rows(config.seed, state.step, n, config.minibatch)
        try:
            for k in range(config.latent_steps):
                latent_step(state, model, data, rows, config, noise, k)
            for k in range(config.joint_steps):
                joint_step(state, model, config, noise, k)
            # The objective reuses the energies of the contrast pass.
            pos_x, pos_z = _positives(state, data, rows)
            e_pos, e_neg, g = _contrast(model, pos_x, pos_z, state.neg_x, state.neg_z)
            stats = _objective(state, rows, e_pos, e_neg, config.entropy_k)
            _apply(model, g, config.learning_rate(t), state.step, opt)
        except NumericalAbort as exc:
            exc.iteration = t
            raise
        m2 = float(np.mean(np.sum(state.neg_x**2, axis=1) + np.sum(state.neg_z**2, axis=1)))
        history.append(stats["value"], stats["pos_energy"], stats["neg_energy"], m2, stats["missing"])
        refresh_pool(state, config)
        state.step += 1
        if callback is not None:
            callback(t, model, state)
        if config.log_every and (t % config.log_every == 0 or t == config.T - 1):
            log.info(
                "step %d  loss %.4f  E+ %.3f  E- %.3f  M2 %.2f  (%.0fs)",
                t, -stats["value"], stats["pos_energy"], stats["neg_energy"], m2, time.time() - t0,
            )
    return model, state, history


def sample_joint(
    model: EnergyModel,
    n: int,
    steps: int,
    eta: float,
    seed: int,
    clip_norm: float = 100.0,
):
    """Fresh joint Langevin chains from N(0, I), for evaluation."""
    rng = stream(seed, "sample-init")
    x = rng.standard_normal((n, model.x_dim))
    z = rng.standard_normal((n, model.z_dim))
    noise = NoiseSource(seed)
    s = math.sqrt(2.0 * eta)
    d = model.x_dim
    for k in range(steps):
        gx, gz = joint_drift(model, x, z, clip_norm)
        xi = noise.normal("sample", k, (n, d + model.z_dim))
        x = x - eta * gx + s * xi[:, :d]
        z = z - eta * gz + s * xi[:, d:]
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            raise NumericalAbort("non-finite sample in joint sampler", k)
    return x, z


# -- particle snapshot -------------------------------------------------------

_HEADER = struct.Struct("<7sxqqqqqqq")


def save_particles(state: ParticleState, path) -> None:
    """Little-endian float64 blob after a header (magic, N, M, D, d, l, seed, step)."""
    n, m, dpool, d, ell = state.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SNAPSHOT_MAGIC, n, m, dpool, d, ell, state.seed, state.step))
        for arr in (state.latent, state.neg_x, state.neg_z):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_particles(path) -> ParticleState:
    raw = Path(path).read_bytes()
    magic, n, m, dpool, d, ell, seed, step = _HEADER.unpack_from(raw)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError("not a particle snapshot")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    sizes = [n * m * ell, dpool * d, dpool * ell]
    if body.size != sum(sizes):
        raise ValueError("truncated particle snapshot")
    a, b = sizes[0], sizes[0] + sizes[1]
    return ParticleState(
        body[:a].reshape(n, m, ell).copy(),
        body[a:b].reshape(dpool, d).copy(),
        body[b:].reshape(dpool, ell).copy(),
        int(seed),
        int(step),
    )


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
