"""Small dense feed-forward networks with analytic gradients.

Everything here is plain numpy on float64. Models are immutable value
objects: the training code produces new parameter arrays instead of mutating
in place, which keeps runs reproducible and models safe to share.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh")


class ConfigError(ValueError):
    """Invalid specification or configuration value."""


class ShapeError(ValueError):
    """Input shape does not match the model specification."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a dense network: linear output, activations on hidden layers."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ConfigError(f"dimensions must be positive, got input={self.input_dim} output={self.output_dim}")
        if any(h <= 0 for h in self.hidden_dims):
            raise ConfigError(f"hidden dims must be positive, got {self.hidden_dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}")
        if self.init_seed < 0:
            raise ConfigError("init_seed must be non-negative")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(int(h) for h in d["hidden_dims"]),
            output_dim=int(d["output_dim"]),
            activation=str(d["activation"]),
            init_seed=int(d["init_seed"]),
        )


@dataclass
class MlpModel:
    """Parameters for an `MlpSpec`. Weight matrices have rows = output units."""

    spec: MlpSpec
    weights: list[np.ndarray] = field(repr=False)
    biases: list[np.ndarray] = field(repr=False)

    def num_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "MlpModel":
        return MlpModel(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def check_finite(self):
        for arr in (*self.weights, *self.biases):
            if not np.all(np.isfinite(arr)):
                raise NumericError("model parameters contain non-finite values")


def init_mlp(spec: MlpSpec) -> MlpModel:
    """Initialize parameters from the fan-in scaled uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    The draw is fully determined by ``spec.init_seed``: identical (spec, seed)
    pairs produce bit-identical parameters.
    """
    rng = np.random.default_rng(spec.init_seed)
    dims = spec.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpModel(spec, weights, biases)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - h * h


def forward_batch(model: MlpModel, inputs: np.ndarray) -> np.ndarray:
    """Forward pass for a (batch, input_dim) matrix; returns (batch, output_dim)."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ShapeError(f"expected (batch, {model.spec.input_dim}) inputs, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input")
    h = x
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W.T + b
        h = z if i == last else _activate(z, model.spec.activation)
    return h


def forward(model: MlpModel, input_vec: np.ndarray) -> np.ndarray:
    """Forward pass for a single input vector."""
    x = np.asarray(input_vec, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.spec.input_dim:
        raise ShapeError(f"expected input of length {model.spec.input_dim}, got shape {x.shape}")
    return forward_batch(model, x[None, :])[0]


def weighted_mse_loss(model: MlpModel, inputs: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> float:
    """Loss only; same definition as `weighted_mse_backward`."""
    loss, _ = weighted_mse_backward(model, inputs, targets, weights, need_grads=False)
    return loss


def weighted_mse_backward(
    model: MlpModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    need_grads: bool = True,
):
    """Per-sample-weighted MSE loss and its exact gradients.

    loss = (1/B) * sum_i w_i * mean_j (f(x_i)_j - y_i_j)^2

    The squared error is averaged over output dimensions so losses stay
    comparable across action dimensionalities, and the batch-size division
    keeps learning rates transferable across batch sizes. Returns
    ``(loss, (weight_grads, bias_grads))``; gradients are ``None`` when
    ``need_grads`` is false.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ShapeError(f"expected (batch, {model.spec.input_dim}) inputs, got {x.shape}")
    if y.shape != (x.shape[0], model.spec.output_dim):
        raise ShapeError(f"expected targets {(x.shape[0], model.spec.output_dim)}, got {y.shape}")
    if w.shape != (x.shape[0],):
        raise ShapeError(f"expected weights of shape ({x.shape[0]},), got {w.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(w)):
        raise NumericError("non-finite target or weight")
    if np.any(w < 0.0):
        raise ConfigError("weights must be non-negative")

    batch = x.shape[0]
    out_dim = model.spec.output_dim
    act = model.spec.activation
    last = len(model.weights) - 1

    # Forward, keeping pre-activations for the backward sweep.
    hs = [x]
    zs = []
    h = x
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W.T + b
        zs.append(z)
        h = z if i == last else _activate(z, act)
        hs.append(h)

    err = hs[-1] - y
    per_sample = np.mean(err * err, axis=1)
    loss = float(np.sum(w * per_sample) / batch)
    if not need_grads:
        return loss, None

    # d loss / d output = 2 * w_i * err / (B * D)
    delta = (2.0 / (batch * out_dim)) * w[:, None] * err
    weight_grads = [None] * len(model.weights)
    bias_grads = [None] * len(model.biases)
    for i in range(last, -1, -1):
        weight_grads[i] = delta.T @ hs[i]
        bias_grads[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i]) * _activate_grad(zs[i - 1], hs[i], act)
    return loss, (weight_grads, bias_grads)


MODEL_FORMAT = "kfbc-mlp"
MODEL_VERSION = 1


def model_to_dict(model: MlpModel) -> dict:
    """Versioned JSON-able form: flat per-layer parameter lists, row-major."""
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "spec": model.spec.to_dict(),
        "weights": [w.ravel().tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }


def model_from_dict(d: dict) -> MlpModel:
    if d.get("format") != MODEL_FORMAT:
        raise ConfigError(f"not a {MODEL_FORMAT} document")
    if d.get("version") != MODEL_VERSION:
        raise ConfigError(f"unsupported model version {d.get('version')}")
    spec = MlpSpec.from_dict(d["spec"])
    dims = spec.layer_dims
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = np.asarray(d["weights"][i], dtype=np.float64).reshape(fan_out, fan_in)
        b = np.asarray(d["biases"][i], dtype=np.float64)
        if b.shape != (fan_out,):
            raise ConfigError(f"bias {i} has shape {b.shape}, expected ({fan_out},)")
        weights.append(w)
        biases.append(b)
    model = MlpModel(spec, weights, biases)
    model.check_finite()
    return model


def save_model(model: MlpModel, path) -> None:
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f)


def load_model(path) -> MlpModel:
    with open(path) as f:
        return model_from_dict(json.load(f))
