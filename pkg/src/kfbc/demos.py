"""Demonstration collection, history-window datasets, splits, persistence.

Collection follows the noise-injection convention: with probability
``noise_rate`` the *executed* action is resampled uniformly from [-1, 1] while
the recorded label stays the expert's intended action, so the data covers
recovery states but supervision stays clean.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .mlp import ConfigError
from . import toycar
from .toycar import ToyCarConfig


class ParseError(ValueError):
    """A persisted file failed to parse; the message names the line."""


@dataclass
class Trajectory:
    traj_id: int
    episode_seed: int
    observations: np.ndarray  # (T, obs_dim), observation before each action
    labels: np.ndarray  # (T, action_dim), expert intended actions
    executed: np.ndarray  # (T, action_dim), actions actually applied
    noise_mask: np.ndarray  # (T,) bool, True where executed was perturbed
    full_states: np.ndarray  # (T, state_dim), full state before each action
    events: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.observations.shape[0]


def collect_demonstrations(
    env_config: ToyCarConfig,
    n_episodes: int,
    noise_rate: float,
    seed: int,
) -> list[Trajectory]:
    """Run the rule-based expert for `n_episodes` seeded ToyCar episodes."""
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    if not 0.0 <= noise_rate < 1.0:
        raise ConfigError("noise_rate must be in [0, 1)")
    trajectories = []
    for i in range(n_episodes):
        rng = np.random.default_rng([seed, i])
        episode_seed = int(rng.integers(0, 2**63))
        cfg = replace(env_config, episode_seed=episode_seed)
        trajectories.append(_run_expert_episode(cfg, i, noise_rate, rng))
    return trajectories


def _run_expert_episode(cfg: ToyCarConfig, traj_id: int, noise_rate: float, rng: np.random.Generator) -> Trajectory:
    state, obs = toycar.toycar_reset(cfg)
    observations, labels, executed, noise_mask, full_states = [], [], [], [], []
    outcome = None
    while not toycar.is_terminal(state, cfg):
        label = toycar.toycar_expert(state, cfg)
        act = label
        perturbed = noise_rate > 0.0 and rng.random() < noise_rate
        if perturbed:
            act = float(rng.uniform(-1.0, 1.0))
        observations.append(obs)
        labels.append([label])
        executed.append([act])
        noise_mask.append(perturbed)
        full_states.append(toycar.full_state_vector(state))
        state, outcome = toycar.toycar_step(state, act, cfg)
        obs = outcome.observation
    events = {
        "reached_goal": bool(outcome.reached_goal),
        "red_violation": bool(outcome.red_violation),
        "timeout": bool(outcome.timeout),
        "final_position": float(state.position),
    }
    return Trajectory(
        traj_id=traj_id,
        episode_seed=cfg.episode_seed,
        observations=np.asarray(observations, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.float64),
        executed=np.asarray(executed, dtype=np.float64),
        noise_mask=np.asarray(noise_mask, dtype=bool),
        full_states=np.asarray(full_states, dtype=np.float64),
        events=events,
    )


CONTEXT_SOURCES = ("label", "executed")


@dataclass
class Dataset:
    """Flattened history samples, aligned arrays, one row per demonstration step.

    ``windows[i]`` is the observation history [o_{t-H}, ..., o_t] flattened
    oldest-first; ``contexts[i]`` holds the K most recent previous actions,
    most-recent-first. Windows never cross trajectory boundaries: early steps
    are left-padded by repeating the first observation (windows) and with
    zero actions (contexts), and carry padding flags.
    """

    windows: np.ndarray
    contexts: np.ndarray
    targets: np.ndarray
    traj_ids: np.ndarray
    steps: np.ndarray
    obs_padded: np.ndarray
    ctx_padded: np.ndarray
    obs_dim: int
    action_dim: int
    history: int
    context: int
    context_source: str = "label"
    split: str = "all"

    @property
    def n(self) -> int:
        return self.targets.shape[0]

    @property
    def trajectory_ids(self) -> np.ndarray:
        seen = dict.fromkeys(self.traj_ids.tolist())
        return np.array(list(seen), dtype=np.int64)

    def subset(self, indices: np.ndarray, split: Optional[str] = None) -> "Dataset":
        return Dataset(
            windows=self.windows[indices],
            contexts=self.contexts[indices],
            targets=self.targets[indices],
            traj_ids=self.traj_ids[indices],
            steps=self.steps[indices],
            obs_padded=self.obs_padded[indices],
            ctx_padded=self.ctx_padded[indices],
            obs_dim=self.obs_dim,
            action_dim=self.action_dim,
            history=self.history,
            context=self.context,
            context_source=self.context_source,
            split=self.split if split is None else split,
        )

    def by_trajectories(self, ids, split: Optional[str] = None) -> "Dataset":
        mask = np.isin(self.traj_ids, np.asarray(list(ids), dtype=np.int64))
        return self.subset(np.nonzero(mask)[0], split=split)


def window_indices(t: int, history: int) -> np.ndarray:
    """Time indices of the observation window at step t, clipped at episode start."""
    return np.clip(np.arange(t - history, t + 1), 0, None)


def build_history_dataset(
    trajectories: list[Trajectory],
    history: int,
    context: int,
    context_source: str = "label",
) -> Dataset:
    """One sample per demonstration step; see `Dataset` for layout and padding."""
    if not trajectories:
        raise ConfigError("no trajectories given")
    if history < 0:
        raise ConfigError("history must be >= 0")
    if context < 1:
        raise ConfigError("context must be >= 1")
    if context_source not in CONTEXT_SOURCES:
        raise ConfigError(f"context_source must be one of {CONTEXT_SOURCES}")

    obs_dim = trajectories[0].observations.shape[1]
    action_dim = trajectories[0].labels.shape[1]
    windows, contexts, targets = [], [], []
    traj_ids, steps, obs_padded, ctx_padded = [], [], [], []
    for traj in trajectories:
        obs = traj.observations
        acts = traj.labels if context_source == "label" else traj.executed
        if obs.shape[1] != obs_dim or traj.labels.shape[1] != action_dim:
            raise ConfigError("inconsistent observation/action dimensions across trajectories")
        T = traj.length
        for t in range(T):
            windows.append(obs[window_indices(t, history)].ravel())
            ctx = np.zeros((context, action_dim), dtype=np.float64)
            avail = min(context, t)
            for j in range(1, avail + 1):
                ctx[j - 1] = acts[t - j]
            contexts.append(ctx.ravel())
            targets.append(traj.labels[t])
            traj_ids.append(traj.traj_id)
            steps.append(t)
            obs_padded.append(t < history)
            ctx_padded.append(t < context)

    return Dataset(
        windows=np.asarray(windows, dtype=np.float64),
        contexts=np.asarray(contexts, dtype=np.float64),
        targets=np.asarray(targets, dtype=np.float64),
        traj_ids=np.asarray(traj_ids, dtype=np.int64),
        steps=np.asarray(steps, dtype=np.int64),
        obs_padded=np.asarray(obs_padded, dtype=bool),
        ctx_padded=np.asarray(ctx_padded, dtype=bool),
        obs_dim=obs_dim,
        action_dim=action_dim,
        history=history,
        context=context,
        context_source=context_source,
    )


def split_by_trajectory(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Assign whole trajectories to train/val so windows never leak across splits."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction must be in (0, 1)")
    ids = dataset.trajectory_ids
    if len(ids) < 2:
        raise ConfigError("need at least 2 trajectories to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    n_val = int(round(val_fraction * len(ids)))
    n_val = min(max(n_val, 1), len(ids) - 1)
    val_ids = set(ids[perm[:n_val]].tolist())
    train_ids = [i for i in ids.tolist() if i not in val_ids]
    return (
        dataset.by_trajectories(train_ids, split="train"),
        dataset.by_trajectories(sorted(val_ids), split="val"),
    )


TRAJ_FORMAT = "kfbc-trajectories"
TRAJ_VERSION = 1


def save_trajectories(trajectories: list[Trajectory], path, meta: Optional[dict] = None) -> None:
    """JSON-lines: a versioned header line, then one trajectory per line."""
    header = {
        "format": TRAJ_FORMAT,
        "version": TRAJ_VERSION,
        "n_trajectories": len(trajectories),
        "obs_dim": int(trajectories[0].observations.shape[1]) if trajectories else 0,
        "action_dim": int(trajectories[0].labels.shape[1]) if trajectories else 0,
        "meta": meta or {},
    }
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for traj in trajectories:
            rec = {
                "traj_id": traj.traj_id,
                "episode_seed": traj.episode_seed,
                "observations": traj.observations.tolist(),
                "labels": traj.labels.tolist(),
                "executed": traj.executed.tolist(),
                "noise_mask": traj.noise_mask.astype(int).tolist(),
                "full_states": traj.full_states.tolist(),
                "events": traj.events,
            }
            f.write(json.dumps(rec) + "\n")


def load_trajectories(path) -> tuple[list[Trajectory], dict]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].strip():
        raise ParseError(f"{path}: empty file, expected a header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line 1: {e}") from e
    if header.get("format") != TRAJ_FORMAT or header.get("version") != TRAJ_VERSION:
        raise ParseError(f"{path}: line 1: not a {TRAJ_FORMAT} v{TRAJ_VERSION} header")
    trajectories = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: line {lineno}: {e}") from e
        try:
            trajectories.append(
                Trajectory(
                    traj_id=int(rec["traj_id"]),
                    episode_seed=int(rec["episode_seed"]),
                    observations=np.asarray(rec["observations"], dtype=np.float64),
                    labels=np.asarray(rec["labels"], dtype=np.float64),
                    executed=np.asarray(rec["executed"], dtype=np.float64),
                    noise_mask=np.asarray(rec["noise_mask"], dtype=bool),
                    full_states=np.asarray(rec["full_states"], dtype=np.float64),
                    events=dict(rec["events"]),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"{path}: line {lineno}: bad trajectory record ({e})") from e
    expected = header.get("n_trajectories")
    if expected is not None and expected != len(trajectories):
        raise ParseError(f"{path}: header promises {expected} trajectories, found {len(trajectories)}")
    return trajectories, header.get("meta", {})


def export_samples_csv(dataset: Dataset, path) -> None:
    """Flattened samples for external inspection, one row per sample."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        win_cols = [f"window_{i}" for i in range(dataset.windows.shape[1])]
        ctx_cols = [f"context_{i}" for i in range(dataset.contexts.shape[1])]
        tgt_cols = [f"target_{i}" for i in range(dataset.targets.shape[1])]
        writer.writerow(["sample_id", "traj_id", "step", "obs_padded", "ctx_padded", *tgt_cols, *ctx_cols, *win_cols])
        for i in range(dataset.n):
            writer.writerow(
                [
                    i,
                    int(dataset.traj_ids[i]),
                    int(dataset.steps[i]),
                    int(dataset.obs_padded[i]),
                    int(dataset.ctx_padded[i]),
                    *[repr(float(v)) for v in dataset.targets[i]],
                    *[repr(float(v)) for v in dataset.contexts[i]],
                    *[repr(float(v)) for v in dataset.windows[i]],
                ]
            )
