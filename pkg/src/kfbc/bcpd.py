"""Bayesian online changepoint scores for action sequences.

Run-length filtering with a constant hazard and a Gaussian observation model
of known variance (unknown segment mean, conjugate normal prior). The score
of step t is the posterior probability that a new segment starts at t given
the observations up to t. The first step of a sequence starts a segment by
definition, so its score is 1.

Scores are computed independently per trajectory and per action dimension;
multi-dimensional actions take the max over dimensions.
"""

from __future__ import annotations

import numpy as np

from .demos import Dataset
from .mlp import ConfigError

LOG_2PI = float(np.log(2.0 * np.pi))


def _logsumexp(a: np.ndarray) -> float:
    m = np.max(a)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(a - m))))


def bcpd_scores_1d(
    x: np.ndarray,
    hazard_rate: float,
    obs_noise_variance: float,
    prior_mean: float = 0.0,
    prior_variance: float = 1.0,
) -> np.ndarray:
    """P(run length = 0 at t | x_1..x_t) for each t of a scalar sequence."""
    if not 0.0 < hazard_rate < 1.0:
        raise ConfigError("hazard_rate must be in (0, 1)")
    if obs_noise_variance <= 0.0 or prior_variance <= 0.0:
        raise ConfigError("variances must be positive")
    x = np.asarray(x, dtype=np.float64).ravel()
    T = x.shape[0]
    if T == 0:
        raise ConfigError("empty sequence")

    log_h = np.log(hazard_rate)
    log_1mh = np.log1p(-hazard_rate)
    sigma2 = obs_noise_variance

    def log_predictive(xi: float, count: np.ndarray, total: np.ndarray) -> np.ndarray:
        # Posterior predictive of the segment mean model given `count` points summing to `total`.
        post_prec = 1.0 / prior_variance + count / sigma2
        post_var = 1.0 / post_prec
        post_mean = post_var * (prior_mean / prior_variance + total / sigma2)
        pred_var = sigma2 + post_var
        d = xi - post_mean
        return -0.5 * (LOG_2PI + np.log(pred_var) + d * d / pred_var)

    scores = np.empty(T, dtype=np.float64)
    scores[0] = 1.0
    # log joint over run lengths r = 0..t-1; run r holds the last r+1 observations.
    log_joint = np.array([log_predictive(x[0], np.array([0.0]), np.array([0.0]))[0]])
    counts = np.array([1.0])
    totals = np.array([x[0]])
    for t in range(1, T):
        log_pred = log_predictive(x[t], counts, totals)
        log_growth = log_joint + log_1mh + log_pred
        prior_pred = log_predictive(x[t], np.array([0.0]), np.array([0.0]))[0]
        log_change = _logsumexp(log_joint + log_h) + prior_pred
        log_joint = np.concatenate(([log_change], log_growth))
        scores[t] = np.exp(log_change - _logsumexp(log_joint))
        counts = np.concatenate(([1.0], counts + 1.0))
        totals = np.concatenate(([x[t]], totals + x[t]))
    return scores


def bcpd_scores(
    sequences: list[np.ndarray],
    hazard_rate: float,
    obs_noise_variance: float,
    prior_mean: float = 0.0,
    prior_variance: float = 1.0,
) -> list[np.ndarray]:
    """Per-trajectory changepoint scores; max over action dimensions."""
    out = []
    for seq in sequences:
        arr = np.asarray(seq, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        per_dim = [
            bcpd_scores_1d(arr[:, j], hazard_rate, obs_noise_variance, prior_mean, prior_variance)
            for j in range(arr.shape[1])
        ]
        out.append(np.max(np.stack(per_dim, axis=1), axis=1))
    return out


def bcpd_scores_for_dataset(
    dataset: Dataset,
    hazard_rate: float,
    obs_noise_variance: float,
    prior_mean: float = 0.0,
    prior_variance: float = 1.0,
) -> np.ndarray:
    """Scores aligned with the dataset's sample order (trajectory-major)."""
    scores = np.empty(dataset.n, dtype=np.float64)
    for tid in dataset.trajectory_ids:
        mask = dataset.traj_ids == tid
        steps = dataset.steps[mask]
        order = np.argsort(steps, kind="stable")
        seq = dataset.targets[mask][order]
        s = bcpd_scores([seq], hazard_rate, obs_noise_variance, prior_mean, prior_variance)[0]
        idx = np.nonzero(mask)[0][order]
        scores[idx] = s
    return scores
