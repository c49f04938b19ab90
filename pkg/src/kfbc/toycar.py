"""ToyCar: a car on a straight road with one traffic light.

Point-mass double-integrator dynamics under semi-implicit Euler (velocity
updates first, then position), velocity clipped to [0, v_max]. The action is
a scalar in [-1, +1] blending full brake and full throttle; the rule-based
expert only ever emits exactly -1 or +1. The light holds each phase for a
uniformly sampled number of steps.

Partial observations expose [position, light status, light position]
(position normalized by road length); velocity and the phase countdown are
withheld, so an imitator must integrate history to know how fast it is
going. The expert acts on the full state, countdown included.

The environment is a pure state machine: phase durations are derived from
(episode_seed, phase index), so stepping is deterministic and states are
plain data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .mlp import ConfigError

RED = 0
GREEN = 1

OBS_DIM = 3
ACTION_DIM = 1


class UsageError(RuntimeError):
    """Environment driven outside its contract (e.g. stepping a finished episode)."""


@dataclass(frozen=True)
class ToyCarConfig:
    road_length: float = 100.0
    dt: float = 0.1
    accel_throttle: float = 2.0
    accel_brake: float = 4.0
    v_max: float = 10.0
    light_position: float = 60.0
    light_duration_min: int = 20
    light_duration_max: int = 80
    horizon: int = 400
    stop_margin: float = 2.0
    episode_seed: int = 0

    def __post_init__(self):
        if self.dt <= 0 or self.v_max <= 0 or self.accel_throttle <= 0 or self.accel_brake <= 0:
            raise ConfigError("dt, v_max and accelerations must be positive")
        if not 0.0 < self.light_position < self.road_length:
            raise ConfigError("light_position must lie strictly inside the road")
        if self.light_duration_min > self.light_duration_max or self.light_duration_min <= 0:
            raise ConfigError("light durations must satisfy 0 < min <= max")
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if self.stop_margin < 0 or self.stop_margin >= self.light_position:
            raise ConfigError("stop_margin must be in [0, light_position)")
        if self.episode_seed < 0:
            raise ConfigError("episode_seed must be non-negative")

    def to_dict(self) -> dict:
        return {
            "road_length": self.road_length,
            "dt": self.dt,
            "accel_throttle": self.accel_throttle,
            "accel_brake": self.accel_brake,
            "v_max": self.v_max,
            "light_position": self.light_position,
            "light_duration_min": self.light_duration_min,
            "light_duration_max": self.light_duration_max,
            "horizon": self.horizon,
            "stop_margin": self.stop_margin,
            "episode_seed": self.episode_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyCarConfig":
        return cls(
            road_length=float(d.get("road_length", 100.0)),
            dt=float(d.get("dt", 0.1)),
            accel_throttle=float(d.get("accel_throttle", 2.0)),
            accel_brake=float(d.get("accel_brake", 4.0)),
            v_max=float(d.get("v_max", 10.0)),
            light_position=float(d.get("light_position", 60.0)),
            light_duration_min=int(d.get("light_duration_min", 20)),
            light_duration_max=int(d.get("light_duration_max", 80)),
            horizon=int(d.get("horizon", 400)),
            stop_margin=float(d.get("stop_margin", 2.0)),
            episode_seed=int(d.get("episode_seed", 0)),
        )


@dataclass(frozen=True)
class ToyCarState:
    position: float
    velocity: float
    light_status: int
    light_time_remaining: int
    step_index: int
    crossed_on_red: bool
    phase_count: int  # phase samples drawn so far; keys the seeded duration stream


@dataclass(frozen=True)
class StepOutcome:
    observation: np.ndarray
    reward: float
    done: bool
    reached_goal: bool
    red_violation: bool
    timeout: bool


def _phase_rng(config: ToyCarConfig, phase_index: int) -> np.random.Generator:
    return np.random.default_rng([config.episode_seed, phase_index])


def _sample_duration(config: ToyCarConfig, phase_index: int, rng=None) -> int:
    rng = rng if rng is not None else _phase_rng(config, phase_index)
    return int(rng.integers(config.light_duration_min, config.light_duration_max + 1))


def partial_observation(state: ToyCarState, config: ToyCarConfig) -> np.ndarray:
    """[position/road_length, light status (1 = green), light_position/road_length]."""
    return np.array(
        [state.position / config.road_length, float(state.light_status), config.light_position / config.road_length],
        dtype=np.float64,
    )


def full_state_vector(state: ToyCarState) -> np.ndarray:
    return np.array(
        [state.position, state.velocity, float(state.light_status), float(state.light_time_remaining), float(state.step_index)],
        dtype=np.float64,
    )


def state_from_vector(vec: np.ndarray, phase_count: int = 0) -> ToyCarState:
    """Rebuild enough state for expert queries from a stored full-state row."""
    return ToyCarState(
        position=float(vec[0]),
        velocity=float(vec[1]),
        light_status=int(vec[2]),
        light_time_remaining=int(vec[3]),
        step_index=int(vec[4]),
        crossed_on_red=False,
        phase_count=phase_count,
    )


def is_terminal(state: ToyCarState, config: ToyCarConfig) -> bool:
    return state.crossed_on_red or state.position >= config.road_length or state.step_index >= config.horizon


def toycar_reset(config: ToyCarConfig) -> tuple[ToyCarState, np.ndarray]:
    rng = _phase_rng(config, 0)
    status = int(rng.integers(0, 2))
    duration = _sample_duration(config, 0, rng)
    state = ToyCarState(
        position=0.0,
        velocity=0.0,
        light_status=status,
        light_time_remaining=duration,
        step_index=0,
        crossed_on_red=False,
        phase_count=1,
    )
    return state, partial_observation(state, config)


def toycar_step(state: ToyCarState, action: float, config: ToyCarConfig) -> tuple[ToyCarState, StepOutcome]:
    """Advance one step. Events are judged against the light status the agent
    observed when it acted; the phase countdown updates at the end of the step."""
    if is_terminal(state, config):
        raise UsageError("toycar_step called on a terminal state")
    a = float(action)
    if not math.isfinite(a):
        raise ConfigError("action must be finite")
    a = min(1.0, max(-1.0, a))

    accel = a * config.accel_throttle if a >= 0.0 else a * config.accel_brake
    new_v = min(config.v_max, max(0.0, state.velocity + accel * config.dt))
    new_x = state.position + new_v * config.dt

    red_violation = (
        state.light_status == RED and state.position < config.light_position and new_x >= config.light_position
    )
    reached_goal = (not red_violation) and new_x >= config.road_length

    # Light phase countdown, flipping with a freshly sampled duration at zero.
    remaining = state.light_time_remaining - 1
    status = state.light_status
    phase_count = state.phase_count
    if remaining == 0:
        status = GREEN if status == RED else RED
        remaining = _sample_duration(config, phase_count)
        phase_count += 1

    step_index = state.step_index + 1
    timeout = (not red_violation) and (not reached_goal) and step_index >= config.horizon

    new_state = ToyCarState(
        position=new_x,
        velocity=new_v,
        light_status=status,
        light_time_remaining=remaining,
        step_index=step_index,
        crossed_on_red=red_violation,
        phase_count=phase_count,
    )
    done = reached_goal or red_violation or timeout
    reward = 1.0 if reached_goal else (-1.0 if red_violation else 0.0)
    outcome = StepOutcome(
        observation=partial_observation(new_state, config),
        reward=reward,
        done=done,
        reached_goal=reached_goal,
        red_violation=red_violation,
        timeout=timeout,
    )
    return new_state, outcome


def _throttle_steps_to_cover(distance: float, v: float, config: ToyCarConfig) -> int:
    """Steps of full throttle until the cumulative displacement reaches `distance`."""
    if distance <= 0.0:
        return 0
    dt = config.dt
    dv = config.accel_throttle * dt
    # Accelerating phase: k-th step velocity is min(v + k*dv, v_max).
    k_acc = max(0, math.ceil((config.v_max - v) / dv))
    dist_acc = v * k_acc * dt + dv * dt * k_acc * (k_acc + 1) / 2.0
    if dist_acc >= distance:
        # Solve (dv*dt/2) k^2 + (v*dt + dv*dt/2) k - distance >= 0 for the smallest integer k.
        a_coef = dv * dt / 2.0
        b_coef = v * dt + dv * dt / 2.0
        root = (-b_coef + math.sqrt(b_coef * b_coef + 4.0 * a_coef * distance)) / (2.0 * a_coef)
        return max(1, math.ceil(root - 1e-12))
    return k_acc + math.ceil((distance - dist_acc) / (config.v_max * dt) - 1e-12)


def toycar_expert(state: ToyCarState, config: ToyCarConfig) -> float:
    """Rule-based full-observation expert; emits exactly +1 (throttle) or -1 (brake).

    Past the light it always throttles. On green it throttles only if it can
    clear the light within the remaining green steps (it sees the countdown);
    otherwise, and on red, it throttles toward the stop line but brakes once
    the braking distance v^2/(2b) reaches the gap to the line or the next step
    would drift into the stop window.
    """
    if state.position >= config.light_position:
        return 1.0
    if state.light_status == GREEN:
        to_light = config.light_position - state.position
        if _throttle_steps_to_cover(to_light, state.velocity, config) <= state.light_time_remaining:
            return 1.0
    gap = config.light_position - config.stop_margin - state.position
    if state.velocity * state.velocity / (2.0 * config.accel_brake) >= gap:
        return -1.0
    if state.position + state.velocity * config.dt >= config.light_position - config.stop_margin:
        return -1.0
    return 1.0
