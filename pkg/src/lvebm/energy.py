"""Joint energy E(x, z) = U(x, z) + lambda_x/2 |x|^2 + lambda_z/2 |z|^2.

U is a softplus MLP on the concatenation [x, z] with a scalar output. All
routines accept either single vectors or row-stacked batches and work in
float64. Gradients are computed by a hand-written backward pass through the
fixed architecture.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

ACTIVATION = "softplus"


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


@numba.njit(cache=True)
def _softplus_kernel(h, out, slope):
    hf, of, sf = h.ravel(), out.ravel(), slope.ravel()
    for i in range(hf.size):
        v = hf[i]
        e = math.exp(-abs(v))
        d = 1.0 + e
        of[i] = max(v, 0.0) + math.log(d)
        sf[i] = (1.0 if v >= 0.0 else e) / d


def softplus_and_slope(h: np.ndarray):
    """softplus(h) and its derivative sigmoid(h), overflow-free."""
    h = np.ascontiguousarray(h, dtype=np.float64)
    out = np.empty_like(h)
    slope = np.empty_like(h)
    _softplus_kernel(h, out, slope)
    return out, slope


def softplus(u):
    return np.logaddexp(0.0, u)


@dataclass
class EnergyModel:
    """MLP energy plus quadratic envelope.

    ``weights[l]`` has shape ``(layer_dims[l], layer_dims[l + 1])`` and a layer
    computes ``a @ W + b``. Hidden layers use softplus, the output layer is
    linear. ``x_dim`` splits the input into the observed and latent parts.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    x_dim: int
    lambda_x: float = 0.05
    lambda_z: float = 0.05
    activation: str = ACTIVATION

    def __post_init__(self):
        self.layer_dims = [int(v) for v in self.layer_dims]
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        self.validate()

    @property
    def z_dim(self) -> int:
        return self.layer_dims[0] - self.x_dim

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def validate(self):
        dims = self.layer_dims
        if len(dims) < 2 or any(v < 1 for v in dims):
            raise ShapeError(f"bad layer_dims {dims}")
        if dims[-1] != 1:
            raise ShapeError("energy network must have scalar output")
        if not 1 <= self.x_dim < dims[0]:
            raise ShapeError(f"x_dim={self.x_dim} incompatible with input dim {dims[0]}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeError("number of weight/bias arrays does not match layer_dims")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l], dims[l + 1]) or b.shape != (dims[l + 1],):
                raise ShapeError(f"layer {l}: got W{w.shape}, b{b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DomainError(f"layer {l} has non-finite parameters")
        if not (self.lambda_x > 0 and self.lambda_z > 0):
            raise DomainError("lambda_x and lambda_z must be positive")
        if self.activation != ACTIVATION:
            raise ValueError(f"unsupported activation {self.activation!r}")

    def copy(self) -> "EnergyModel":
        return EnergyModel(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.x_dim,
            self.lambda_x,
            self.lambda_z,
            self.activation,
        )

    def params(self) -> list[np.ndarray]:
        """Flat ordering used by ParamGradient: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def apply_update(self, grad: "ParamGradient", scale: float):
        """In-place ``theta += scale * grad``. Envelope coefficients are fixed."""
        for w, g in zip(self.weights, grad.weights):
            w += scale * g
        for b, g in zip(self.biases, grad.biases):
            b += scale * g


@dataclass
class ParamGradient:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __sub__(self, other: "ParamGradient") -> "ParamGradient":
        return ParamGradient(
            [a - b for a, b in zip(self.weights, other.weights)],
            [a - b for a, b in zip(self.biases, other.biases)],
        )

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(a * a) for a in self.weights + self.biases)))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.weights + self.biases)


def init_model(
    x_dim: int,
    z_dim: int,
    hidden: tuple[int, ...] = (128, 128),
    lambda_x: float = 0.05,
    lambda_z: float = 0.05,
    rng: np.random.Generator | int | None = 0,
) -> EnergyModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(rng)
    dims = [x_dim + z_dim, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return EnergyModel(dims, weights, biases, x_dim, lambda_x, lambda_z)


def _prepare(model: EnergyModel, x, z):
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    single = x.ndim == 1
    x2, z2 = np.atleast_2d(x), np.atleast_2d(z)
    if x2.shape[1] != model.x_dim or z2.shape[1] != model.z_dim or x2.shape[0] != z2.shape[0]:
        raise ShapeError(
            f"expected x[..., {model.x_dim}], z[..., {model.z_dim}]; got {x.shape}, {z.shape}"
        )
    if not (np.all(np.isfinite(x2)) and np.all(np.isfinite(z2))):
        raise DomainError("non-finite input to energy")
    return x2, z2, single


def _forward(model: EnergyModel, u: np.ndarray):
    """Network output (n, 1), per-layer inputs, and hidden-layer slopes.

    ``act[l]`` is the input to layer l; ``slope[l]`` is the softplus
    derivative at hidden layer l.
    """
    act, slope = [u], []
    a = u
    last = model.n_layers - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = a @ w + b
        if l == last:
            out = h
        else:
            a, s = softplus_and_slope(h)
            act.append(a)
            slope.append(s)
    return out, act, slope


def _backward_to_input(model: EnergyModel, n: int, slope, weight=None):
    """Reverse sweep for sum_n weight_n * U_n.

    Returns the gradient w.r.t. each layer's pre-activation and w.r.t. the
    network input.
    """
    delta = np.ones((n, 1)) if weight is None else weight.reshape(n, 1)
    deltas = [None] * model.n_layers
    for l in range(model.n_layers - 1, -1, -1):
        deltas[l] = delta
        g_act = delta @ model.weights[l].T
        if l > 0:
            delta = g_act * slope[l - 1]
    return deltas, g_act


def network_grad_input(model: EnergyModel, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """dU/d[x, z] for row-stacked 2-D inputs, no envelope, no validation."""
    _, _, slope = _forward(model, np.concatenate([x, z], axis=1))
    _, g = _backward_to_input(model, x.shape[0], slope)
    return g


def network(model: EnergyModel, x, z):
    """U(x, z) only, without the envelope."""
    x2, z2, single = _prepare(model, x, z)
    out, _, _ = _forward(model, np.concatenate([x2, z2], axis=1))
    out = out[:, 0]
    return out[0] if single else out


def energy(model: EnergyModel, x, z):
    x2, z2, single = _prepare(model, x, z)
    out, _, _ = _forward(model, np.concatenate([x2, z2], axis=1))
    e = (
        out[:, 0]
        + 0.5 * model.lambda_x * np.sum(x2 * x2, axis=1)
        + 0.5 * model.lambda_z * np.sum(z2 * z2, axis=1)
    )
    return float(e[0]) if single else e


def grad_input(model: EnergyModel, x, z, clip_norm: float | None = None):
    """(dE/dx, dE/dz). With ``clip_norm`` the network part dU/d(x,z) is clipped
    row-wise before the envelope gradient is added."""
    x2, z2, single = _prepare(model, x, z)
    _, _, slope = _forward(model, np.concatenate([x2, z2], axis=1))
    _, gu = _backward_to_input(model, x2.shape[0], slope)
    if clip_norm is not None:
        gu = clip_rows(gu, clip_norm)
    d = model.x_dim
    gx = gu[:, :d] + model.lambda_x * x2
    gz = gu[:, d:] + model.lambda_z * z2
    if single:
        return gx[0], gz[0]
    return gx, gz


def energy_and_grad_input(model: EnergyModel, x, z, clip_norm: float | None = None):
    """Batched energy and input gradient from one forward pass."""
    x2, z2, _ = _prepare(model, x, z)
    out, _, slope = _forward(model, np.concatenate([x2, z2], axis=1))
    _, gu = _backward_to_input(model, x2.shape[0], slope)
    if clip_norm is not None:
        gu = clip_rows(gu, clip_norm)
    d = model.x_dim
    e = (
        out[:, 0]
        + 0.5 * model.lambda_x * np.sum(x2 * x2, axis=1)
        + 0.5 * model.lambda_z * np.sum(z2 * z2, axis=1)
    )
    return e, gu[:, :d] + model.lambda_x * x2, gu[:, d:] + model.lambda_z * z2


def grad_params(model: EnergyModel, x, z, weight=None) -> ParamGradient:
    """Gradient of sum_n weight_n * E(x_n, z_n) w.r.t. the network parameters.

    For a single (x, z) pair this is the plain gradient of E. Passing
    ``weight = 1/n`` for a batch gives the gradient of the batch mean.
    """
    return energy_and_grad_params(model, x, z, weight)[1]


def energy_and_grad_params(model: EnergyModel, x, z, weight=None):
    """Per-row energies (batched) and the weighted parameter gradient, one pass."""
    x2, z2, _ = _prepare(model, x, z)
    if weight is not None:
        weight = np.broadcast_to(np.asarray(weight, dtype=np.float64), (x2.shape[0],))
    out, act, slope = _forward(model, np.concatenate([x2, z2], axis=1))
    deltas, _ = _backward_to_input(model, x2.shape[0], slope, weight)
    gw = [act[l].T @ deltas[l] for l in range(model.n_layers)]
    gb = [deltas[l].sum(axis=0) for l in range(model.n_layers)]
    e = (
        out[:, 0]
        + 0.5 * model.lambda_x * np.sum(x2 * x2, axis=1)
        + 0.5 * model.lambda_z * np.sum(z2 * z2, axis=1)
    )
    return e, ParamGradient(gw, gb)


def mean_grad_params(model: EnergyModel, x, z) -> ParamGradient:
    n = np.atleast_2d(np.asarray(x)).shape[0]
    return grad_params(model, x, z, weight=np.full(n, 1.0 / n))


def clip_gradient(g, max_norm: float):
    """Rescale ``g`` onto the ball of radius ``max_norm`` if it lies outside."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    g = np.asarray(g, dtype=np.float64)
    n = np.linalg.norm(g)
    if n <= max_norm:
        return g.copy()
    return g * (max_norm / n)


def clip_rows(g: np.ndarray, max_norm: float) -> np.ndarray:
    n = np.linalg.norm(g, axis=1, keepdims=True)
    scale = np.minimum(1.0, max_norm / np.maximum(n, 1e-300))
    return g * scale


# -- checkpoint ------------------------------------------------------------


def model_to_dict(model: EnergyModel) -> dict:
    return {
        "layer_dims": model.layer_dims,
        "x_dim": model.x_dim,
        "lambda_x": model.lambda_x,
        "lambda_z": model.lambda_z,
        "activation": model.activation,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }


def model_from_dict(doc: dict) -> EnergyModel:
    return EnergyModel(
        doc["layer_dims"],
        [np.array(w, dtype=np.float64).reshape(i, o) for w, i, o in
         zip(doc["weights"], doc["layer_dims"][:-1], doc["layer_dims"][1:])],
        [np.array(b, dtype=np.float64) for b in doc["biases"]],
        doc["x_dim"],
        float(doc["lambda_x"]),
        float(doc["lambda_z"]),
        doc.get("activation", ACTIVATION),
    )


def save_model(model: EnergyModel, path) -> None:
    # json emits repr(float), the shortest round-trip decimal.
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> EnergyModel:
    return model_from_dict(json.loads(Path(path).read_text()))
