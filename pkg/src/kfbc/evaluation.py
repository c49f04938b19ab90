"""Rollout evaluation and diagnostics.

Covers the environment metrics (success, red-light violations, progress,
average speed, inertia stalls), the distributional-shift probe that replays
the rule-based expert on a policy's own visited states, the avgAPE measure of
how copycat-like a policy's action stream is, and the changepoint/other loss
breakdown.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import toycar
from .copycat import ApeTable, CopycatSpec, compute_ape, copycat_heldout_mse, squared_error_per_sample, train_copycat
from .demos import Dataset, Trajectory, build_history_dataset
from .imitation import TrainedPolicy, rollout_episode
from .mlp import ConfigError, forward_batch
from .toycar import ToyCarConfig
from .training import derived_seed
from .weighting import top_fraction_indices


@dataclass
class EvalReport:
    n_episodes: int
    success_rate: float
    violations: int
    progress: float
    avg_speed: float
    inertia_stalls: int  # episodes containing at least one stall
    episodes: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "n_episodes": self.n_episodes,
            "success_rate": self.success_rate,
            "violations": self.violations,
            "progress": self.progress,
            "avg_speed": self.avg_speed,
            "inertia_stalls": self.inertia_stalls,
            "episodes": self.episodes,
        }


def _expert_episode(cfg: ToyCarConfig, traj_id: int) -> Trajectory:
    state, obs = toycar.toycar_reset(cfg)
    observations, labels, full_states = [], [], []
    outcome = None
    while not toycar.is_terminal(state, cfg):
        a = toycar.toycar_expert(state, cfg)
        observations.append(obs)
        labels.append([a])
        full_states.append(toycar.full_state_vector(state))
        state, outcome = toycar.toycar_step(state, a, cfg)
        obs = outcome.observation
    acts = np.asarray(labels, dtype=np.float64)
    return Trajectory(
        traj_id=traj_id,
        episode_seed=cfg.episode_seed,
        observations=np.asarray(observations, dtype=np.float64),
        labels=acts,
        executed=acts.copy(),
        noise_mask=np.zeros(len(labels), dtype=bool),
        full_states=np.asarray(full_states, dtype=np.float64),
        events={
            "reached_goal": bool(outcome.reached_goal),
            "red_violation": bool(outcome.red_violation),
            "timeout": bool(outcome.timeout),
            "final_position": float(state.position),
        },
    )


def detect_stall(traj: Trajectory, config: ToyCarConfig, speed_fraction: float = 0.05, min_steps: int = 30) -> bool:
    """True if velocity stayed below speed_fraction * v_max for at least
    `min_steps` consecutive steps while the light was green."""
    threshold = speed_fraction * config.v_max
    run = 0
    for row in traj.full_states:
        if row[1] < threshold and int(row[2]) == toycar.GREEN:
            run += 1
            if run >= min_steps:
                return True
        else:
            run = 0
    return False


def rollout(
    env_config: ToyCarConfig,
    policy: Optional[TrainedPolicy],
    n_episodes: int,
    seed: int,
    stall_speed_fraction: float = 0.05,
    stall_steps: int = 30,
) -> tuple[list[Trajectory], EvalReport]:
    """Seeded evaluation episodes; `policy=None` rolls out the rule-based expert.

    Episode seeds derive from the report seed, so the report is a pure
    function of (policy, config, seed) and episode order does not matter.
    """
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    trajectories = []
    records = []
    stalls = 0
    for i in range(n_episodes):
        cfg = replace(env_config, episode_seed=derived_seed(seed, i))
        traj = _expert_episode(cfg, i) if policy is None else rollout_episode(cfg, policy, i)
        trajectories.append(traj)
        final_x = traj.events["final_position"]
        progress = min(1.0, max(0.0, final_x / cfg.road_length))
        speed = final_x / (traj.length * cfg.dt) if traj.length else 0.0
        stalled = detect_stall(traj, cfg, stall_speed_fraction, stall_steps)
        stalls += int(stalled)
        records.append(
            {
                "episode": i,
                "episode_seed": cfg.episode_seed,
                "steps": traj.length,
                "success": traj.events["reached_goal"],
                "red_violation": traj.events["red_violation"],
                "timeout": traj.events["timeout"],
                "progress": progress,
                "avg_speed": speed,
                "stalled": stalled,
            }
        )
    report = EvalReport(
        n_episodes=n_episodes,
        success_rate=float(np.mean([r["success"] for r in records])),
        violations=int(sum(r["red_violation"] for r in records)),
        progress=float(np.mean([r["progress"] for r in records])),
        avg_speed=float(np.mean([r["avg_speed"] for r in records])),
        inertia_stalls=stalls,
        episodes=records,
    )
    return trajectories, report


def rollout_imitation_error(trajectories: list[Trajectory], env_config: ToyCarConfig) -> float:
    """Mean squared gap between executed actions and the expert's action at
    each visited state. Possible offline because the expert is a rule."""
    total = 0.0
    count = 0
    for traj in trajectories:
        if traj.full_states.size == 0 and traj.length > 0:
            raise ConfigError("trajectories lack full states; cannot query the expert")
        for row, executed in zip(traj.full_states, traj.executed):
            state = toycar.state_from_vector(row)
            expert = toycar.toycar_expert(state, env_config)
            err = executed - np.array([expert])
            total += float(np.mean(err * err))
            count += 1
    if count == 0:
        raise ConfigError("no steps to evaluate")
    return total / count


@dataclass
class AvgApeReport:
    avg_ape: float
    n_episodes: int
    n_train_episodes: int
    n_heldout_episodes: int
    copycat: dict
    actor: str
    seed: int

    def to_dict(self) -> dict:
        return {
            "avg_ape": self.avg_ape,
            "n_episodes": self.n_episodes,
            "n_train_episodes": self.n_train_episodes,
            "n_heldout_episodes": self.n_heldout_episodes,
            "copycat": self.copycat,
            "actor": self.actor,
            "seed": self.seed,
        }


def avg_ape(
    policy: Optional[TrainedPolicy],
    env_config: ToyCarConfig,
    n_episodes: int,
    copycat_spec: CopycatSpec,
    seed: int,
    heldout_fraction: float = 0.25,
) -> AvgApeReport:
    """Held-out error of a copycat trained on the actor's own rollouts.

    Low values mean the actor's action stream is smooth and predictable from
    its recent past, the copycat signature. `policy=None` measures the expert.
    """
    if n_episodes < 4:
        raise ConfigError("avg_ape needs at least 4 episodes for a train/held-out split")
    trajectories, _ = rollout(env_config, policy, n_episodes, seed)
    # The copycat must model the actor's own action stream.
    own = [
        Trajectory(
            traj_id=t.traj_id,
            episode_seed=t.episode_seed,
            observations=t.observations,
            labels=t.executed,
            executed=t.executed,
            noise_mask=t.noise_mask,
            full_states=t.full_states,
            events=t.events,
        )
        for t in trajectories
    ]
    n_held = min(max(1, int(round(heldout_fraction * n_episodes))), n_episodes - 1)
    perm = np.random.default_rng(derived_seed(seed, 7001)).permutation(n_episodes)
    held_ids = set(int(i) for i in perm[:n_held])
    dataset = build_history_dataset(own, history=0, context=copycat_spec.context, context_source="executed")
    train_ds = dataset.by_trajectories([t.traj_id for t in own if t.traj_id not in held_ids], split="train")
    held_ds = dataset.by_trajectories(sorted(held_ids), split="val")
    ensemble = train_copycat(train_ds, replace_folds(copycat_spec, 1))
    score = copycat_heldout_mse(ensemble, held_ds)
    return AvgApeReport(
        avg_ape=score,
        n_episodes=n_episodes,
        n_train_episodes=n_episodes - n_held,
        n_heldout_episodes=n_held,
        copycat=copycat_spec.to_dict(),
        actor="expert" if policy is None else policy.provenance.get("method", "policy"),
        seed=seed,
    )


def replace_folds(spec: CopycatSpec, folds: int) -> CopycatSpec:
    return CopycatSpec(
        context=spec.context,
        hidden_dims=spec.hidden_dims,
        activation=spec.activation,
        train=spec.train,
        folds=folds,
    )


def loss_breakdown(policy: TrainedPolicy, dataset: Dataset, ape_table: ApeTable, percentile: float) -> dict:
    """Unweighted MSE on the top-`percentile`-APE samples vs the rest.

    The overall MSE equals the sample-count-weighted mean of the two subsets;
    callers can use that identity as a self-check.
    """
    if not 0.0 < percentile <= 100.0:
        raise ConfigError("percentile must be in (0, 100]")
    if ape_table.n != dataset.n:
        raise ConfigError("APE table does not align with dataset")
    err = squared_error_per_sample(forward_batch(policy.model, dataset.windows), dataset.targets)
    cp_idx = top_fraction_indices(ape_table.ape, percentile)
    mask = np.zeros(dataset.n, dtype=bool)
    mask[cp_idx] = True
    n_cp = int(mask.sum())
    n_other = dataset.n - n_cp
    return {
        "changepoint_mse": float(np.mean(err[mask])),
        "other_mse": float(np.mean(err[~mask])) if n_other else math.nan,
        "overall_mse": float(np.mean(err)),
        "n_changepoint": n_cp,
        "n_other": n_other,
        "percentile": percentile,
    }
