"""Scripted replay environment: a fixed observation/expert-action sequence.

Serves as a deterministic oracle for changepoint-score tests — the action
sequence, and therefore the exact set of changepoints, is chosen by the test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mlp import ConfigError
from .toycar import StepOutcome, UsageError


@dataclass(frozen=True)
class Script:
    observations: np.ndarray  # (length, obs_dim)
    actions: np.ndarray  # (length, action_dim)

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=np.float64)
        act = np.asarray(self.actions, dtype=np.float64)
        if obs.ndim != 2 or act.ndim != 2 or obs.shape[0] != act.shape[0]:
            raise ConfigError("script observations and actions must be 2-D with equal length")
        if obs.shape[0] == 0:
            raise ConfigError("script must be non-empty")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "actions", act)

    @property
    def length(self) -> int:
        return self.observations.shape[0]


@dataclass(frozen=True)
class ScriptedState:
    index: int


def scripted_reset(script: Script) -> tuple[ScriptedState, np.ndarray]:
    return ScriptedState(0), script.observations[0].copy()


def scripted_step(state: ScriptedState, action, script: Script) -> tuple[ScriptedState, StepOutcome]:
    """Replays the script verbatim; the supplied action is ignored."""
    if state.index >= script.length:
        raise UsageError("scripted_step called past the end of the script")
    nxt = state.index + 1
    done = nxt >= script.length
    obs = script.observations[min(nxt, script.length - 1)].copy()
    outcome = StepOutcome(
        observation=obs,
        reward=0.0,
        done=done,
        reached_goal=done,
        red_violation=False,
        timeout=False,
    )
    return ScriptedState(nxt), outcome


def scripted_expert(state: ScriptedState, script: Script) -> np.ndarray:
    if state.index >= script.length:
        raise UsageError("expert queried past the end of the script")
    return script.actions[state.index].copy()


def constant_script(length: int, action: float = 1.0, obs_dim: int = 2) -> Script:
    """Constant-action script: zero action changepoints by construction."""
    t = np.linspace(0.0, 1.0, length)
    obs = np.stack([t] + [np.ones(length)] * (obs_dim - 1), axis=1)
    return Script(obs, np.full((length, 1), float(action)))


def single_switch_script(length: int, t_star: int, before: float = 1.0, after: float = -1.0, obs_dim: int = 2) -> Script:
    """Script whose action flips exactly once, at index `t_star`."""
    if not 0 < t_star < length:
        raise ConfigError("t_star must be strictly inside the script")
    actions = np.full((length, 1), float(before))
    actions[t_star:] = float(after)
    t = np.linspace(0.0, 1.0, length)
    obs = np.stack([t] + [np.ones(length)] * (obs_dim - 1), axis=1)
    return Script(obs, actions)
