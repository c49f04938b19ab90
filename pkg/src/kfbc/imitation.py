"""Imitation policy trainers and rollout execution.

The same trainer covers single-observation BC (history 0), history BC, and
the weighted variants; they differ only in the window length and the weight
scheme. History dropout and DAGGER get their own entry points. Rollout code
builds observation windows with the exact padding rule used by the dataset
builder, so episode starts look the same at train and test time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import toycar
from .copycat import ApeTable
from .demos import Dataset, Trajectory, build_history_dataset, window_indices
from .mlp import ConfigError, MlpModel, MlpSpec, forward, forward_batch, model_from_dict, model_to_dict
from .training import TrainConfig, TrainResult, derived_seed, train_supervised
from .weighting import WeightScheme, WeightTable, softmax_weights, step_weights
from .toycar import ToyCarConfig


@dataclass(frozen=True)
class PolicySpec:
    history: int = 0  # 0 = single observation
    hidden_dims: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    history_dropout_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.history < 0:
            raise ConfigError("history must be >= 0")
        if not 0.0 <= self.history_dropout_rate < 1.0:
            raise ConfigError("history_dropout_rate must be in [0, 1)")
        if self.history_dropout_rate > 0.0 and self.history == 0:
            raise ConfigError("history dropout needs history > 0")

    @property
    def input_mode(self) -> str:
        return "single_observation" if self.history == 0 else "observation_history"

    def mlp_spec(self, obs_dim: int, action_dim: int, seed: int) -> MlpSpec:
        return MlpSpec(
            input_dim=(self.history + 1) * obs_dim,
            hidden_dims=self.hidden_dims,
            output_dim=action_dim,
            activation=self.activation,
            init_seed=seed,
        )

    def to_dict(self) -> dict:
        return {
            "history": self.history,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "history_dropout_rate": self.history_dropout_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicySpec":
        return cls(
            history=int(d.get("history", 0)),
            hidden_dims=tuple(d.get("hidden_dims", (64, 64))),
            activation=str(d.get("activation", "relu")),
            history_dropout_rate=float(d.get("history_dropout_rate", 0.0)),
        )


@dataclass
class TrainedPolicy:
    model: MlpModel
    spec: PolicySpec
    provenance: dict
    loss_trace: np.ndarray = field(repr=False, default=None)

    @property
    def obs_dim(self) -> int:
        return self.model.spec.input_dim // (self.spec.history + 1)


def _provenance(spec: PolicySpec, scheme: WeightScheme, config: TrainConfig, dataset: Dataset, method: str) -> dict:
    return {
        "method": method,
        "policy_spec": spec.to_dict(),
        "scheme": scheme.to_dict(),
        "train": config.to_dict(),
        "data": {
            "n": dataset.n,
            "history": dataset.history,
            "context": dataset.context,
            "split": dataset.split,
            "context_source": dataset.context_source,
        },
    }


def materialize_static_weights(
    scheme: WeightScheme, dataset: Dataset, ape_table: Optional[ApeTable] = None
) -> WeightTable:
    """Build the fixed per-sample weight table for a static scheme."""
    if scheme.kind == "uniform":
        return WeightTable(np.ones(dataset.n), scheme.to_dict())
    if scheme.kind == "step":
        if ape_table is None:
            raise ConfigError("step weighting needs an APE table")
        if ape_table.n != dataset.n:
            raise ConfigError("APE table does not align with dataset")
        return step_weights(ape_table.ape, scheme.thr, scheme.w)
    if scheme.kind == "bcpd":
        from .bcpd import bcpd_scores_for_dataset

        scores = bcpd_scores_for_dataset(dataset, scheme.hazard_rate, scheme.obs_noise_variance)
        table = step_weights(scores, scheme.thr, scheme.w)
        table.scheme = scheme.to_dict()
        return table
    if scheme.kind == "actfreq":
        from .actfreq import actfreq_weights

        table, _ = actfreq_weights(dataset.targets, scheme.k, scheme.kmeans_seed)
        return table
    raise ConfigError(f"scheme {scheme.kind!r} does not materialize a static table here")


def train_bc(
    dataset: Dataset,
    policy_spec: PolicySpec,
    scheme: WeightScheme,
    config: TrainConfig,
    ape_table: Optional[ApeTable] = None,
) -> TrainedPolicy:
    """Behavioral cloning with the given weight scheme.

    Uniform weights with history 0 is single-observation BC; uniform with
    history > 0 is history BC. The softmax scheme recomputes weights within
    each minibatch from the precomputed APE table; static schemes are
    materialized once up front.
    """
    if dataset.history != policy_spec.history:
        raise ConfigError(f"dataset history {dataset.history} != policy history {policy_spec.history}")
    if policy_spec.history_dropout_rate > 0.0:
        raise ConfigError("use train_history_dropout for dropout policies")
    if scheme.kind == "boosting":
        raise ConfigError("boosting trains its own loop; see kfbc.boosting")

    mlp_spec = policy_spec.mlp_spec(dataset.obs_dim, dataset.action_dim, derived_seed(config.rng_seed, 101))
    if scheme.kind == "softmax":
        if ape_table is None:
            raise ConfigError("softmax weighting needs an APE table")
        if ape_table.n != dataset.n:
            raise ConfigError("APE table does not align with dataset")
        ape = ape_table.ape
        tau = scheme.tau
        result = train_supervised(
            dataset.windows,
            dataset.targets,
            mlp_spec,
            config,
            batch_weight_fn=lambda idx: softmax_weights(ape[idx], tau),
        )
    else:
        table = materialize_static_weights(scheme, dataset, ape_table)
        weights = None if scheme.kind == "uniform" else table.weights
        result = train_supervised(dataset.windows, dataset.targets, mlp_spec, config, sample_weights=weights)

    method = {"uniform": "bc-so" if policy_spec.history == 0 else "bc-oh"}.get(scheme.kind, scheme.kind)
    return TrainedPolicy(
        model=result.model,
        spec=policy_spec,
        provenance=_provenance(policy_spec, scheme, config, dataset, method),
        loss_trace=result.loss_trace,
    )


def apply_history_mask(
    windows: np.ndarray, history: int, obs_dim: int, rate: float, rng: np.random.Generator
) -> np.ndarray:
    """Zero each past frame independently with probability `rate`.

    Windows are [o_{t-H}, ..., o_t] flattened, so the past frames are the
    first `history` blocks; the current frame (last block) is never dropped.
    """
    out = np.array(windows, dtype=np.float64, copy=True)
    b = out.shape[0]
    drop = rng.random((b, history)) < rate
    mask = np.repeat(drop, obs_dim, axis=1)
    out[:, : history * obs_dim] = np.where(mask, 0.0, out[:, : history * obs_dim])
    return out


def train_history_dropout(dataset: Dataset, policy_spec: PolicySpec, config: TrainConfig) -> TrainedPolicy:
    """History BC with the past frames randomly blanked during training.

    Masks are redrawn per minibatch presentation; inference applies no mask
    and no rescaling.
    """
    p = policy_spec.history_dropout_rate
    if not 0.0 < p < 1.0:
        raise ConfigError("history_dropout_rate must be in (0, 1) for this trainer")
    if dataset.history != policy_spec.history:
        raise ConfigError(f"dataset history {dataset.history} != policy history {policy_spec.history}")
    mlp_spec = policy_spec.mlp_spec(dataset.obs_dim, dataset.action_dim, derived_seed(config.rng_seed, 101))
    h, od = policy_spec.history, dataset.obs_dim
    result = train_supervised(
        dataset.windows,
        dataset.targets,
        mlp_spec,
        config,
        batch_input_fn=lambda bx, rng: apply_history_mask(bx, h, od, p, rng),
    )
    scheme = WeightScheme(kind="uniform")
    prov = _provenance(policy_spec, scheme, config, dataset, "history-dropout")
    return TrainedPolicy(model=result.model, spec=policy_spec, provenance=prov, loss_trace=result.loss_trace)


def predict(policy: TrainedPolicy, window: np.ndarray) -> np.ndarray:
    """Deterministic forward pass, clamped to the action range [-1, 1]."""
    raw = forward(policy.model, np.asarray(window, dtype=np.float64).ravel())
    return np.clip(raw, -1.0, 1.0)


def rollout_episode(cfg: ToyCarConfig, policy: TrainedPolicy, traj_id: int = 0) -> Trajectory:
    """Execute the policy for one episode, labeling every state with the expert.

    The observation window repeats the first frame until `history` steps have
    elapsed, exactly like the dataset builder.
    """
    state, obs = toycar.toycar_reset(cfg)
    hist = [obs]
    h = policy.spec.history
    observations, labels, executed, full_states = [], [], [], []
    outcome = None
    while not toycar.is_terminal(state, cfg):
        t = len(hist) - 1
        window = np.concatenate([hist[i] for i in window_indices(t, h)])
        action = float(predict(policy, window)[0])
        observations.append(obs)
        labels.append([toycar.toycar_expert(state, cfg)])
        executed.append([action])
        full_states.append(toycar.full_state_vector(state))
        state, outcome = toycar.toycar_step(state, action, cfg)
        obs = outcome.observation
        hist.append(obs)
    events = {
        "reached_goal": bool(outcome.reached_goal),
        "red_violation": bool(outcome.red_violation),
        "timeout": bool(outcome.timeout),
        "final_position": float(state.position),
    }
    n = len(observations)
    return Trajectory(
        traj_id=traj_id,
        episode_seed=cfg.episode_seed,
        observations=np.asarray(observations, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.float64),
        executed=np.asarray(executed, dtype=np.float64),
        noise_mask=np.zeros(n, dtype=bool),
        full_states=np.asarray(full_states, dtype=np.float64),
        events=events,
    )


def _expert_episode_steps(cfg: ToyCarConfig, traj_id: int, quota: int) -> Trajectory:
    """Expert episode truncated at `quota` recorded steps."""
    state, obs = toycar.toycar_reset(cfg)
    observations, labels, executed, full_states = [], [], [], []
    events = {"reached_goal": False, "red_violation": False, "timeout": False, "truncated": False}
    while not toycar.is_terminal(state, cfg) and len(observations) < quota:
        a = toycar.toycar_expert(state, cfg)
        observations.append(obs)
        labels.append([a])
        executed.append([a])
        full_states.append(toycar.full_state_vector(state))
        state, outcome = toycar.toycar_step(state, a, cfg)
        obs = outcome.observation
        events = {
            "reached_goal": bool(outcome.reached_goal),
            "red_violation": bool(outcome.red_violation),
            "timeout": bool(outcome.timeout),
            "truncated": False,
        }
    if not toycar.is_terminal(state, cfg):
        events["truncated"] = True
    events["final_position"] = float(state.position)
    n = len(observations)
    return Trajectory(
        traj_id=traj_id,
        episode_seed=cfg.episode_seed,
        observations=np.asarray(observations, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.float64),
        executed=np.asarray(executed, dtype=np.float64),
        noise_mask=np.zeros(n, dtype=bool),
        full_states=np.asarray(full_states, dtype=np.float64),
        events=events,
    )


def _policy_episode_steps(cfg: ToyCarConfig, policy: TrainedPolicy, traj_id: int, quota: int) -> Trajectory:
    traj = rollout_episode(cfg, policy, traj_id)
    if traj.length <= quota:
        return traj
    return Trajectory(
        traj_id=traj_id,
        episode_seed=traj.episode_seed,
        observations=traj.observations[:quota],
        labels=traj.labels[:quota],
        executed=traj.executed[:quota],
        noise_mask=traj.noise_mask[:quota],
        full_states=traj.full_states[:quota],
        events={**traj.events, "truncated": True},
    )


def dagger(
    env_config: ToyCarConfig,
    policy_spec: PolicySpec,
    query_budget: int,
    n_rounds: int,
    config: TrainConfig,
    seed: int,
    context: int = 1,
) -> TrainedPolicy:
    """Interactive imitation with expert relabeling.

    Round 1 executes the expert to seed the dataset; later rounds execute the
    current policy while the expert labels every visited state. Each round
    adds its share of `query_budget` labeled states (the last episode of a
    round is truncated at the quota, so the aggregate is exactly the budget)
    and the policy is retrained from scratch on everything collected so far.
    """
    if n_rounds < 1 or query_budget < n_rounds:
        raise ConfigError("need query_budget >= n_rounds >= 1")
    base, extra = divmod(query_budget, n_rounds)
    trajectories: list[Trajectory] = []
    policy: Optional[TrainedPolicy] = None
    traj_counter = 0
    for r in range(n_rounds):
        quota = base + (1 if r < extra else 0)
        got = 0
        ep = 0
        while got < quota:
            cfg = replace(env_config, episode_seed=derived_seed(seed, r, ep))
            if r == 0:
                traj = _expert_episode_steps(cfg, traj_counter, quota - got)
            else:
                traj = _policy_episode_steps(cfg, policy, traj_counter, quota - got)
            trajectories.append(traj)
            got += traj.length
            traj_counter += 1
            ep += 1
        dataset = build_history_dataset(trajectories, policy_spec.history, context)
        policy = train_bc(dataset, policy_spec, WeightScheme(kind="uniform"), config)
    policy.provenance["method"] = "dagger"
    policy.provenance["dagger"] = {
        "query_budget": query_budget,
        "n_rounds": n_rounds,
        "seed": seed,
        "aggregated_samples": sum(t.length for t in trajectories),
        "episodes": traj_counter,
    }
    return policy


POLICY_FORMAT = "kfbc-policy"
POLICY_VERSION = 1


def save_policy(policy: TrainedPolicy, path) -> None:
    doc = {
        "format": POLICY_FORMAT,
        "version": POLICY_VERSION,
        "policy_spec": policy.spec.to_dict(),
        "provenance": policy.provenance,
        "model": model_to_dict(policy.model),
        "loss_trace": None if policy.loss_trace is None else policy.loss_trace.tolist(),
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_policy(path) -> TrainedPolicy:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != POLICY_FORMAT or doc.get("version") != POLICY_VERSION:
        raise ConfigError(f"{path} is not a {POLICY_FORMAT} v{POLICY_VERSION} document")
    trace = doc.get("loss_trace")
    return TrainedPolicy(
        model=model_from_dict(doc["model"]),
        spec=PolicySpec.from_dict(doc["policy_spec"]),
        provenance=doc.get("provenance", {}),
        loss_trace=None if trace is None else np.asarray(trace, dtype=np.float64),
    )
