"""Sample weight schemes: monotone functions of the changepoint score.

Two primary schemes map APE to loss weights. The softmax is applied within
each training minibatch, w_i = exp(tau * APE_i) / sum_j exp(tau * APE_j), so
it never materializes as a static table. The step scheme assigns weight W to
the samples in the top THR percentile of APE and 1 to the rest. The ablation
schemes (BCPD, action-frequency, boosting) produce static tables through
their own modules; BCPD scores are pushed through the same step mapping so
the score is the only changed variable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mlp import ConfigError

SCHEME_KINDS = ("uniform", "softmax", "step", "bcpd", "actfreq", "boosting")
STATIC_KINDS = ("uniform", "step", "bcpd", "actfreq", "boosting")


@dataclass(frozen=True)
class WeightScheme:
    kind: str = "uniform"
    tau: float = 0.2  # softmax temperature
    thr: float = 10.0  # step/bcpd: percentile of samples upweighted
    w: float = 5.0  # step/bcpd: weight for those samples
    hazard_rate: float = 0.02  # bcpd: constant changepoint probability
    obs_noise_variance: float = 0.05  # bcpd: known observation noise
    k: int = 6  # actfreq: number of action clusters
    kmeans_seed: int = 0
    rounds: int = 3  # boosting
    shrink: float = 1.0  # boosting: learning-rate shrink on the weight update

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ConfigError(f"unknown weight scheme {self.kind!r}")
        if self.kind == "softmax" and self.tau <= 0.0:
            raise ConfigError("softmax temperature must be positive")
        if self.kind in ("step", "bcpd"):
            if not 0.0 < self.thr <= 100.0:
                raise ConfigError("step threshold must be a percentile in (0, 100]")
            if self.w < 1.0:
                raise ConfigError("step weight W must be >= 1")
        if self.kind == "bcpd":
            if not 0.0 < self.hazard_rate < 1.0:
                raise ConfigError("hazard_rate must be in (0, 1)")
            if self.obs_noise_variance <= 0.0:
                raise ConfigError("obs_noise_variance must be positive")
        if self.kind == "actfreq" and self.k < 2:
            raise ConfigError("actfreq needs k >= 2 clusters")
        if self.kind == "boosting":
            if self.rounds < 1:
                raise ConfigError("boosting needs rounds >= 1")
            if self.shrink <= 0.0:
                raise ConfigError("boosting shrink must be positive")

    @property
    def is_static(self) -> bool:
        return self.kind in STATIC_KINDS

    @property
    def needs_ape(self) -> bool:
        return self.kind in ("softmax", "step")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "softmax":
            d["tau"] = self.tau
        elif self.kind == "step":
            d.update(thr=self.thr, w=self.w)
        elif self.kind == "bcpd":
            d.update(thr=self.thr, w=self.w, hazard_rate=self.hazard_rate, obs_noise_variance=self.obs_noise_variance)
        elif self.kind == "actfreq":
            d.update(k=self.k, kmeans_seed=self.kmeans_seed)
        elif self.kind == "boosting":
            d.update(rounds=self.rounds, shrink=self.shrink)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WeightScheme":
        fields = {k: d[k] for k in ("tau", "thr", "w", "hazard_rate", "obs_noise_variance", "k", "kmeans_seed", "rounds", "shrink") if k in d}
        return cls(kind=str(d.get("kind", "uniform")), **fields)


@dataclass
class WeightTable:
    """Materialized per-sample weights aligned with a Dataset's sample order."""

    weights: np.ndarray
    scheme: dict
    static: bool = True

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0.0):
            raise ConfigError("weights must be finite and non-negative")

    @property
    def n(self) -> int:
        return self.weights.shape[0]


def uniform_weights(n: int) -> np.ndarray:
    return np.ones(n, dtype=np.float64)


def softmax_weights(batch_apes: np.ndarray, tau: float) -> np.ndarray:
    """Within-batch softmax of tau * APE; stabilized by max subtraction, sums to 1."""
    apes = np.asarray(batch_apes, dtype=np.float64)
    if apes.size == 0:
        raise ConfigError("softmax over an empty batch")
    if tau <= 0.0:
        raise ConfigError("softmax temperature must be positive")
    z = tau * apes
    z = z - np.max(z)
    e = np.exp(z)
    return e / np.sum(e)


def top_fraction_indices(scores: np.ndarray, thr_percentile: float) -> np.ndarray:
    """Indices of the ceil(THR/100 * N) highest scores, ties to lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    m = math.ceil(thr_percentile / 100.0 * n)
    order = np.lexsort((np.arange(n), -scores))
    return order[:m]


def step_weights(scores: np.ndarray, thr: float, w: float) -> WeightTable:
    """Weight W for exactly ceil(THR/100 * N) top-score samples, 1 elsewhere."""
    if not 0.0 < thr <= 100.0:
        raise ConfigError("step threshold must be a percentile in (0, 100]")
    if w < 1.0:
        raise ConfigError("step weight W must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    weights = np.ones(scores.shape[0], dtype=np.float64)
    weights[top_fraction_indices(scores, thr)] = w
    return WeightTable(weights=weights, scheme={"kind": "step", "thr": thr, "w": w})
