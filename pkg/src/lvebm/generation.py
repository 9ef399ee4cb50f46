"""Conditional generation from p(x | z) and the probe + decoder reconstruction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import NumericalAbort
from .energy import EnergyModel, clip_rows, energy, network_grad_input, softplus_and_slope
from .rng import NoiseSource, ZeroNoise, stream


@dataclass
class GenConfig:
    eta: float = 0.01
    steps: int = 100
    gamma: float = 1.0
    clip_norm: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if not self.eta > 0 or self.steps < 0 or not self.clip_norm > 0:
            raise ValueError("eta, clip_norm must be positive and steps >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


def _batched(model: EnergyModel, z, x0):
    z = np.asarray(z, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 1
    x = np.atleast_2d(x0).copy()
    z2 = np.atleast_2d(z)
    if len(z2) == 1 and len(x) > 1:
        z2 = np.repeat(z2, len(x), axis=0)
    if z2.shape != (len(x), model.z_dim) or x.shape[1] != model.x_dim:
        raise ValueError(f"shape mismatch: z{z.shape}, x0{x0.shape}")
    return x, z2, single


def grad_x(model, x, z, clip_norm: float) -> np.ndarray:
    """grad_x E with the network part clipped. Exact models without a network
    (anything exposing ``grad_x``, e.g. the Gaussian oracle) are used as is."""
    if not isinstance(model, EnergyModel):
        return model.grad_x(x, z)
    gu = network_grad_input(model, x, z)[:, : model.x_dim]
    return clip_rows(gu, clip_norm) + model.lambda_x * x


def grad_z(model, x, z, clip_norm: float) -> np.ndarray:
    if not isinstance(model, EnergyModel):
        return model.grad_z(x, z)
    gu = network_grad_input(model, x, z)[:, model.x_dim:]
    return clip_rows(gu, clip_norm) + model.lambda_z * z


def _energy(model, x, z):
    return energy(model, x, z) if isinstance(model, EnergyModel) else model.energy(x, z)


def _check(x, k):
    if not np.all(np.isfinite(x)):
        raise NumericalAbort("non-finite iterate in conditional sampler", k)


def map_generate(model: EnergyModel, z, cfg: GenConfig, x0):
    """Gradient descent on x -> E(x, z) with z held fixed."""
    return langevin_generate(model, z, cfg, x0, noise=ZeroNoise())


def langevin_generate(model: EnergyModel, z, cfg: GenConfig, x0, noise: NoiseSource | None = None):
    """x <- x - eta grad_x E + sqrt(2 eta) eps, z clamped. Accepts batches of chains."""
    x, z2, single = _batched(model, z, x0)
    noise = noise if noise is not None else NoiseSource(cfg.seed)
    s = math.sqrt(2.0 * cfg.eta)
    for k in range(cfg.steps):
        x = x - cfg.eta * grad_x(model, x, z2, cfg.clip_norm) + s * noise.normal("gen-langevin", k, x.shape)
        _check(x, k)
    return x[0] if single else x


def momentum_generate(model: EnergyModel, z, cfg: GenConfig, x0, noise: NoiseSource | None = None):
    """v <- (1 - gamma) v - eta grad_x E + sqrt(2 gamma eta) eps;  x <- x + v; v0 = 0."""
    x, z2, single = _batched(model, z, x0)
    noise = noise if noise is not None else NoiseSource(cfg.seed)
    v = np.zeros_like(x)
    s = math.sqrt(2.0 * cfg.gamma * cfg.eta)
    for k in range(cfg.steps):
        v = (1.0 - cfg.gamma) * v - cfg.eta * grad_x(model, x, z2, cfg.clip_norm)
        v = v + s * noise.normal("gen-momentum", k, x.shape)
        x = x + v
        _check(x, k)
    return x[0] if single else x


def posterior_probe(
    model: EnergyModel,
    x,
    M: int = 8,
    cfg: GenConfig | None = None,
    noise: NoiseSource | None = None,
    return_candidates: bool = False,
):
    """Short-run Langevin in z with x clamped; returns the lowest-energy candidate.

    Runs M chains per observation from N(0, I). Ties go to the lowest chain
    index. Works on a single x or a batch of rows.
    """
    cfg = cfg if cfg is not None else GenConfig()
    if M < 1:
        raise ValueError("M must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    n, ell = len(x2), model.z_dim
    xr = np.repeat(x2, M, axis=0)
    z = stream(cfg.seed, "probe-init").standard_normal((n * M, ell))
    noise = noise if noise is not None else NoiseSource(cfg.seed)
    s = math.sqrt(2.0 * cfg.eta)
    for k in range(cfg.steps):
        z = z - cfg.eta * grad_z(model, xr, z, cfg.clip_norm) + s * noise.normal("probe", k, z.shape)
        _check(z, k)
    e = _energy(model, xr, z).reshape(n, M)
    best = np.argmin(e, axis=1)  # first occurrence on ties
    cand = z.reshape(n, M, ell)
    z_hat = cand[np.arange(n), best]
    if return_candidates:
        return (z_hat[0] if single else z_hat), cand, e
    return z_hat[0] if single else z_hat


# -- decoder ---------------------------------------------------------------


@dataclass
class DecoderModel:
    """Softplus MLP from R^l to R^d (linear output layer)."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    train_mse: float = float("nan")
    activation: str = "softplus"
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[l], self.layer_dims[l + 1]) or b.shape != (self.layer_dims[l + 1],):
                raise ValueError(f"decoder layer {l} shape mismatch")

    @property
    def n_layers(self):
        return len(self.weights)

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        out, _, _ = self._forward(np.atleast_2d(z))
        return out[0] if z.ndim == 1 else out

    def _forward(self, z):
        act, slope = [z], []
        a = z
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = a @ w + b
            if l == self.n_layers - 1:
                return h, act, slope
            a, s = softplus_and_slope(h)
            act.append(a)
            slope.append(s)

    def _grads(self, z, target):
        out, act, slope = self._forward(z)
        resid = out - target
        loss = float(np.mean(np.sum(resid**2, axis=1)))
        delta = 2.0 * resid / len(z)
        gw, gb = [None] * self.n_layers, [None] * self.n_layers
        for l in range(self.n_layers - 1, -1, -1):
            gw[l] = act[l].T @ delta
            gb[l] = delta.sum(axis=0)
            if l > 0:
                delta = (delta @ self.weights[l].T) * slope[l - 1]
        return loss, gw, gb

    def to_dict(self) -> dict:
        return {
            "layer_dims": self.layer_dims,
            "activation": self.activation,
            "train_mse": self.train_mse,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DecoderModel":
        dims = doc["layer_dims"]
        return cls(
            dims,
            [np.array(w, dtype=np.float64).reshape(i, o) for w, i, o in zip(doc["weights"], dims[:-1], dims[1:])],
            [np.array(b, dtype=np.float64) for b in doc["biases"]],
            float(doc.get("train_mse", float("nan"))),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "DecoderModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_decoder(z_dim: int, x_dim: int, hidden=(128, 128), seed: int = 0) -> DecoderModel:
    rng = stream(seed, "decoder-init")
    dims = [z_dim, *hidden, x_dim]
    ws, bs = [], []
    for fi, fo in zip(dims[:-1], dims[1:]):
        lim = math.sqrt(6.0 / (fi + fo))
        ws.append(rng.uniform(-lim, lim, size=(fi, fo)))
        bs.append(np.zeros(fo))
    return DecoderModel(dims, ws, bs)


def train_decoder(
    z_hat,
    x,
    hidden=(128, 128),
    epochs: int = 200,
    lr: float = 1e-3,
    seed: int = 0,
    batch: int = 256,
) -> DecoderModel:
    """Fit g(z_hat) ~ x by minibatch Adam on the mean squared error."""
    z_hat = np.atleast_2d(np.asarray(z_hat, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if len(z_hat) == 0 or len(z_hat) != len(x):
        raise ValueError("need a non-empty set of (z_hat, x) pairs")
    dec = init_decoder(z_hat.shape[1], x.shape[1], hidden, seed)
    params = dec.weights + dec.biases
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, tiny = 0.9, 0.999, 1e-8
    n = len(x)
    step = 0
    for epoch in range(epochs):
        order = stream(seed, "decoder-epoch", epoch).permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            loss, gw, gb = dec._grads(z_hat[idx], x[idx])
            if not math.isfinite(loss):
                raise NumericalAbort("decoder loss diverged", step)
            step += 1
            for i, g in enumerate(gw + gb):
                m1[i] = b1 * m1[i] + (1 - b1) * g
                m2[i] = b2 * m2[i] + (1 - b2) * g * g
                params[i] -= lr * (m1[i] / (1 - b1**step)) / (np.sqrt(m2[i] / (1 - b2**step)) + tiny)
        dec.history.append(float(np.mean(np.sum((dec(z_hat) - x) ** 2, axis=1))))
    dec.train_mse = dec.history[-1] if dec.history else float(np.mean(np.sum((dec(z_hat) - x) ** 2, axis=1)))
    return dec


def reconstruct(model: EnergyModel, decoder, x, cfg: GenConfig | None = None, M: int = 8):
    """(z_hat, g(z_hat)) with z_hat from the posterior probe."""
    z_hat = posterior_probe(model, x, M, cfg)
    return z_hat, decoder(z_hat)
