"""Adaptive-boosting-style reweighting for history BC policies.

Each round trains a history BC policy on the current weights, normalizes the
per-sample losses by their max, and multiplies weights by beta^(1 - L) with
beta = Lbar / (1 - Lbar), renormalizing to mean 1. With beta < 1 (the usual
regime: most normalized losses are far below the max) higher-loss samples end
up with higher weights. The returned policy is the last round's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .copycat import squared_error_per_sample
from .demos import Dataset
from .imitation import PolicySpec, TrainedPolicy, _provenance
from .mlp import ConfigError, forward_batch
from .training import TrainConfig, derived_seed, train_supervised
from .weighting import WeightScheme, WeightTable


@dataclass
class BoostingResult:
    weight_table: WeightTable
    policy: TrainedPolicy
    rounds: list[dict]  # per round: lbar, beta, weights_mean (post-update)
    weight_history: list[np.ndarray]  # weights after each round's update


def boosting_weights(
    dataset: Dataset,
    policy_spec: PolicySpec,
    config: TrainConfig,
    rounds: int,
    shrink: float = 1.0,
) -> BoostingResult:
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    if shrink <= 0.0:
        raise ConfigError("shrink must be positive")
    if dataset.history != policy_spec.history:
        raise ConfigError(f"dataset history {dataset.history} != policy history {policy_spec.history}")

    n = dataset.n
    w = np.ones(n, dtype=np.float64)
    mlp_spec = policy_spec.mlp_spec(dataset.obs_dim, dataset.action_dim, derived_seed(config.rng_seed, 101))
    policy = None
    round_stats: list[dict] = []
    weight_history: list[np.ndarray] = []

    for r in range(rounds):
        result = train_supervised(dataset.windows, dataset.targets, mlp_spec, config, sample_weights=w)
        policy = TrainedPolicy(
            model=result.model,
            spec=policy_spec,
            provenance=_provenance(
                policy_spec, WeightScheme(kind="boosting", rounds=rounds, shrink=shrink), config, dataset, "boosting"
            ),
            loss_trace=result.loss_trace,
        )
        losses = squared_error_per_sample(forward_batch(result.model, dataset.windows), dataset.targets)
        lmax = float(np.max(losses))
        if lmax <= 0.0:
            # Perfect fit: nothing to upweight; weights carry over unchanged.
            round_stats.append({"lbar": 0.0, "beta": 0.0, "weights_mean": float(np.mean(w))})
            weight_history.append(w.copy())
            continue
        lnorm = losses / lmax
        lbar = float(np.sum(w * lnorm) / np.sum(w))
        if lbar >= 1.0 - 1e-12:
            raise ConfigError(f"boosting round {r}: every sample at maximum loss (lbar={lbar})")
        beta = lbar / (1.0 - lbar)
        w = w * beta ** (shrink * (1.0 - lnorm))
        w = w / np.mean(w)
        round_stats.append({"lbar": lbar, "beta": beta, "weights_mean": float(np.mean(w))})
        weight_history.append(w.copy())

    table = WeightTable(
        weights=w,
        scheme={"kind": "boosting", "rounds": rounds, "shrink": shrink},
    )
    policy.provenance["boosting_rounds"] = round_stats
    return BoostingResult(weight_table=table, policy=policy, rounds=round_stats, weight_history=weight_history)
