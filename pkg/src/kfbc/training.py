"""Adam optimization and the minibatch training loop for MLP models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .mlp import ConfigError, MlpModel, MlpSpec, NumericError, init_mlp, weighted_mse_backward


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, model: MlpModel, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        params = [*model.weights, *model.biases]
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            step_count=0,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(model: MlpModel, grads, state: AdamState, learning_rate: float) -> tuple[MlpModel, AdamState]:
    """One bias-corrected Adam update. Returns a new model and state."""
    weight_grads, bias_grads = grads
    flat_grads = [*weight_grads, *bias_grads]
    params = [*model.weights, *model.biases]
    if len(flat_grads) != len(params):
        raise ConfigError("gradient structure does not match model parameters")
    for g, p in zip(flat_grads, params):
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")

    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    new_m, new_v, new_params = [], [], []
    for p, g, m, v in zip(params, flat_grads, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params.append(p - learning_rate * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)

    n_w = len(model.weights)
    new_model = MlpModel(model.spec, new_params[:n_w], new_params[n_w:])
    new_state = AdamState(new_m, new_v, t, b1, b2, eps)
    return new_model, new_state


@dataclass(frozen=True)
class LrDecay:
    """Multiply the learning rate by `factor` when the training loss has not
    reached a new minimum for `patience_iterations` iterations."""

    factor: float = 0.1
    patience_iterations: int = 2000

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ConfigError("lr decay factor must be in (0, 1)")
        if self.patience_iterations <= 0:
            raise ConfigError("lr decay patience must be positive")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 128
    iterations: int = 4000
    lr_decay: Optional[LrDecay] = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size <= 0 or self.iterations <= 0:
            raise ConfigError("batch_size and iterations must be positive")
        if self.rng_seed < 0:
            raise ConfigError("rng_seed must be non-negative")

    def to_dict(self) -> dict:
        d = {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "rng_seed": self.rng_seed,
        }
        if self.lr_decay is not None:
            d["lr_decay"] = {"factor": self.lr_decay.factor, "patience_iterations": self.lr_decay.patience_iterations}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        decay = d.get("lr_decay")
        return cls(
            learning_rate=float(d.get("learning_rate", 2e-4)),
            batch_size=int(d.get("batch_size", 128)),
            iterations=int(d.get("iterations", 4000)),
            lr_decay=None if decay is None else LrDecay(float(decay["factor"]), int(decay["patience_iterations"])),
            rng_seed=int(d.get("rng_seed", 0)),
        )


def derived_seed(*parts: int) -> int:
    """Stable child seed from integer parts; keys independent RNG streams."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def iterate_batches(n: int, batch_size: int, iterations: int, rng: np.random.Generator):
    """Yield `iterations` index arrays from repeated seeded shuffles of range(n).

    Consecutive slices of each permutation; a short final slice is used as-is
    before the next reshuffle.
    """
    perm = rng.permutation(n)
    pos = 0
    for _ in range(iterations):
        if pos >= n:
            perm = rng.permutation(n)
            pos = 0
        yield perm[pos : pos + batch_size]
        pos += batch_size


@dataclass
class TrainResult:
    model: MlpModel
    loss_trace: np.ndarray = field(repr=False)
    final_lr: float = 0.0


def train_supervised(
    inputs: np.ndarray,
    targets: np.ndarray,
    spec: MlpSpec,
    config: TrainConfig,
    sample_weights: Optional[np.ndarray] = None,
    batch_weight_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    batch_input_fn: Optional[Callable[[np.ndarray, np.random.Generator], np.ndarray]] = None,
) -> TrainResult:
    """Run `config.iterations` minibatch Adam steps over seeded shuffles.

    Weights come from exactly one place: a fixed `sample_weights` table
    aligned with the dataset, or a `batch_weight_fn` hook called with each
    batch's dataset indices (how per-minibatch schemes such as the softmax
    weighting plug in). With neither, weights are uniform 1.

    `batch_input_fn` may transform each presented batch (input masking); it
    receives a dedicated RNG stream so the shuffle sequence is unaffected.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ConfigError("empty dataset")
    if sample_weights is not None and batch_weight_fn is not None:
        raise ConfigError("pass a fixed weight table or a per-batch hook, not both")
    if sample_weights is not None:
        sample_weights = np.asarray(sample_weights, dtype=np.float64)
        if sample_weights.shape != (n,):
            raise ConfigError(f"weight table shape {sample_weights.shape} does not match dataset size {n}")

    shuffle_rng = np.random.default_rng([config.rng_seed, 0])
    aux_rng = np.random.default_rng([config.rng_seed, 1])

    model = init_mlp(spec)
    state = AdamState.zeros_like(model)
    lr = config.learning_rate
    best_loss = np.inf
    since_best = 0
    trace = np.empty(config.iterations, dtype=np.float64)

    for it, idx in enumerate(iterate_batches(n, config.batch_size, config.iterations, shuffle_rng)):
        bx = x[idx]
        by = y[idx]
        if batch_input_fn is not None:
            bx = batch_input_fn(bx, aux_rng)
        if batch_weight_fn is not None:
            bw = np.asarray(batch_weight_fn(idx), dtype=np.float64)
        elif sample_weights is not None:
            bw = sample_weights[idx]
        else:
            bw = np.ones(len(idx), dtype=np.float64)
        loss, grads = weighted_mse_backward(model, bx, by, bw)
        model, state = adam_step(model, grads, state, lr)
        trace[it] = loss

        if config.lr_decay is not None:
            if loss < best_loss:
                best_loss = loss
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.lr_decay.patience_iterations:
                    lr *= config.lr_decay.factor
                    since_best = 0

    return TrainResult(model=model, loss_trace=trace, final_lr=lr)
