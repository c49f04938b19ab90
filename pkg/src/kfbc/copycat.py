"""Copycat predictor training and per-sample action prediction error (APE).

The copycat is a small MLP that predicts the current action from the K most
recent past actions and nothing else. Expert action sequences are so
temporally correlated that this predictor is accurate almost everywhere; the
frames where it fails are the action changepoints. Each sample's APE (the
copycat's squared prediction error, averaged over action dimensions) is the
changepoint score that drives the loss reweighting.

To keep APE honest on small datasets the copycat can be trained with
trajectory-level cross-validation: each sample is scored by the fold model
that never saw its trajectory.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .demos import Dataset
from .mlp import ConfigError, MlpModel, MlpSpec, forward_batch
from .training import TrainConfig, derived_seed, train_supervised


@dataclass(frozen=True)
class CopycatSpec:
    context: int = 3
    hidden_dims: tuple[int, ...] = (32, 32)
    activation: str = "relu"
    train: TrainConfig = field(default_factory=TrainConfig)
    folds: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.context < 1:
            raise ConfigError("copycat context must be >= 1")
        if self.folds < 1:
            raise ConfigError("folds must be >= 1")

    def mlp_spec(self, action_dim: int, seed: int) -> MlpSpec:
        return MlpSpec(
            input_dim=self.context * action_dim,
            hidden_dims=self.hidden_dims,
            output_dim=action_dim,
            activation=self.activation,
            init_seed=seed,
        )

    def to_dict(self) -> dict:
        return {
            "context": self.context,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "train": self.train.to_dict(),
            "folds": self.folds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CopycatSpec":
        return cls(
            context=int(d.get("context", 3)),
            hidden_dims=tuple(d.get("hidden_dims", (32, 32))),
            activation=str(d.get("activation", "relu")),
            train=TrainConfig.from_dict(d.get("train", {})),
            folds=int(d.get("folds", 1)),
        )


@dataclass
class CopycatEnsemble:
    spec: CopycatSpec
    fold_models: dict[int, MlpModel]
    full_model: MlpModel
    fold_of_traj: dict[int, int]


def train_copycat(dataset: Dataset, spec: CopycatSpec) -> CopycatEnsemble:
    """Train the copycat on action contexts; with folds > 1, also per-fold models.

    Trajectories are partitioned into `spec.folds` folds with a seeded
    shuffle; fold model f is trained on every fold except f. A model trained
    on the whole dataset is always produced as well, for scoring data outside
    the fold partition (validation splits, rollout data).
    """
    if dataset.n == 0:
        raise ConfigError("empty dataset")
    if spec.context * dataset.action_dim != dataset.contexts.shape[1]:
        raise ConfigError(
            f"copycat context {spec.context} does not match dataset context width {dataset.contexts.shape[1]}"
        )
    traj_ids = dataset.trajectory_ids
    if spec.folds > 1 and spec.folds > len(traj_ids):
        raise ConfigError(f"{spec.folds} folds but only {len(traj_ids)} trajectories")

    full_spec = spec.mlp_spec(dataset.action_dim, derived_seed(spec.train.rng_seed, spec.folds))
    full = train_supervised(dataset.contexts, dataset.targets, full_spec, spec.train)

    fold_models: dict[int, MlpModel] = {}
    fold_of_traj: dict[int, int] = {}
    if spec.folds > 1:
        rng = np.random.default_rng(spec.train.rng_seed)
        perm = rng.permutation(len(traj_ids))
        for pos, idx in enumerate(perm):
            fold_of_traj[int(traj_ids[idx])] = pos % spec.folds
        sample_folds = np.array([fold_of_traj[int(t)] for t in dataset.traj_ids])
        for f in range(spec.folds):
            keep = sample_folds != f
            mspec = spec.mlp_spec(dataset.action_dim, derived_seed(spec.train.rng_seed, f))
            fold_models[f] = train_supervised(
                dataset.contexts[keep], dataset.targets[keep], mspec, spec.train
            ).model
    return CopycatEnsemble(spec=spec, fold_models=fold_models, full_model=full.model, fold_of_traj=fold_of_traj)


@dataclass
class ApeTable:
    """Per-sample changepoint scores aligned with a Dataset's sample order."""

    ape: np.ndarray
    fold: np.ndarray  # fold whose held-out model scored the sample; -1 = full model

    def __post_init__(self):
        self.ape = np.asarray(self.ape, dtype=np.float64)
        self.fold = np.asarray(self.fold, dtype=np.int64)
        if self.ape.shape != self.fold.shape:
            raise ConfigError("ape and fold arrays must align")
        if not np.all(np.isfinite(self.ape)) or np.any(self.ape < 0.0):
            raise ConfigError("APE values must be finite and non-negative")

    @property
    def n(self) -> int:
        return self.ape.shape[0]

    @property
    def mean(self) -> float:
        return float(np.mean(self.ape))

    def summary(self) -> dict:
        return {
            "mean": self.mean,
            "p50": float(np.percentile(self.ape, 50)),
            "p90": float(np.percentile(self.ape, 90)),
            "p99": float(np.percentile(self.ape, 99)),
            "max": float(np.max(self.ape)),
        }


def squared_error_per_sample(pred: np.ndarray, targets: np.ndarray) -> np.ndarray:
    err = pred - targets
    return np.mean(err * err, axis=1)


def compute_ape(ensemble: CopycatEnsemble, dataset: Dataset) -> ApeTable:
    """Score every sample with the copycat model that did not train on its fold.

    Samples from trajectories outside the ensemble's fold partition (or when
    folds = 1) are scored by the full-data model and tagged fold -1.
    Padded-context samples are scored like any other; the padding flag lives
    on the dataset.
    """
    if dataset.n == 0:
        raise ConfigError("empty dataset")
    ape = np.empty(dataset.n, dtype=np.float64)
    fold = np.full(dataset.n, -1, dtype=np.int64)
    sample_folds = np.array([ensemble.fold_of_traj.get(int(t), -1) for t in dataset.traj_ids])
    for f in np.unique(sample_folds):
        mask = sample_folds == f
        if f < 0:
            model = ensemble.full_model
        else:
            model = ensemble.fold_models.get(int(f))
            if model is None:
                raise ConfigError(f"no model for fold {f}")
        pred = forward_batch(model, dataset.contexts[mask])
        ape[mask] = squared_error_per_sample(pred, dataset.targets[mask])
        fold[mask] = f
    return ApeTable(ape=ape, fold=fold)


def copycat_heldout_mse(ensemble: CopycatEnsemble, dataset: Dataset) -> float:
    """Mean squared error of the full-data copycat on a (held-out) dataset."""
    pred = forward_batch(ensemble.full_model, dataset.contexts)
    return float(np.mean(squared_error_per_sample(pred, dataset.targets)))


def constant_mean_mse(train_targets: np.ndarray, eval_targets: np.ndarray) -> float:
    """MSE of the best constant predictor (the train-split mean action)."""
    mean = np.mean(np.asarray(train_targets, dtype=np.float64), axis=0)
    err = np.asarray(eval_targets, dtype=np.float64) - mean
    return float(np.mean(np.mean(err * err, axis=1)))


def copycat_condition(eps_cp: float, reference_mse: float) -> dict:
    """Report whether a reference imitation error exceeds the changepoint level.

    `eps_cp` is the measured copycat held-out MSE (a proxy for the changepoint
    fraction); when the reference policy's MSE is strictly larger, a pure
    history-repeating predictor achieves lower training loss than that policy,
    i.e. the learner is in the copycat-preferred regime.
    """
    if eps_cp < 0.0 or reference_mse < 0.0:
        raise ConfigError("MSE values must be non-negative")
    return {
        "eps_cp": float(eps_cp),
        "reference_mse": float(reference_mse),
        "copycat_preferred": bool(reference_mse > eps_cp),
        "margin": float(reference_mse - eps_cp),
    }


def export_ape_csv(ape_table: ApeTable, dataset: Dataset, path, weights=None) -> None:
    if ape_table.n != dataset.n:
        raise ConfigError("APE table does not align with dataset")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "traj_id", "step", "fold", "ctx_padded", "ape", "weight"])
        for i in range(dataset.n):
            w = "" if weights is None else repr(float(weights[i]))
            writer.writerow(
                [
                    i,
                    int(dataset.traj_ids[i]),
                    int(dataset.steps[i]),
                    int(ape_table.fold[i]),
                    int(dataset.ctx_padded[i]),
                    repr(float(ape_table.ape[i])),
                    w,
                ]
            )
