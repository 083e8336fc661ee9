"""Parameterized point-mass task families with delayed-reward wrapping.

All tasks share the state space (2-D position + velocity), the action space
([-1, 1]^2) and the reward (forward velocity minus an optional control cost),
and differ only in dynamics knobs: mass, drag, per-axis actuator gain,
actuator rotation, and crippled action dimensions. Rotation tasks admit an
exact action correspondence (counter-rotate the action); crippled tasks do
not, which spans both transfer regimes of interest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, InputError
from .models import history_window, window_width

Array = np.ndarray

STATE_DIM = 4
ACTION_DIM = 2
RESET_BOX_HALF_WIDTH = 1.0


@dataclass(frozen=True)
class PointMassParams:
    """Dynamics knobs for a single task."""

    mass: float = 1.0
    drag: float = 0.25
    actuator_gain: tuple[float, float] = (1.0, 1.0)
    actuator_rotation: float = 0.0
    crippled_dims: frozenset[int] = frozenset()
    dt: float = 0.05

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if not (0.0 <= self.drag < 1.0):
            raise ValueError(f"drag must lie in [0, 1), got {self.drag}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if any(d not in (0, 1) for d in self.crippled_dims):
            raise ValueError(f"crippled_dims must be a subset of {{0, 1}}, got {self.crippled_dims}")
        object.__setattr__(self, "crippled_dims", frozenset(int(d) for d in self.crippled_dims))
        object.__setattr__(self, "actuator_gain", tuple(float(g) for g in self.actuator_gain))


@dataclass(frozen=True)
class EnvState:
    position: tuple[float, float]
    velocity: tuple[float, float]
    step_index: int


def rotation_matrix(theta: float) -> Array:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


class PointMassEnv:
    """Dense-reward point mass: v' = (1-drag) v + dt R(theta) (gain*a) / mass."""

    state_dim = STATE_DIM
    action_dim = ACTION_DIM

    def __init__(self, params: PointMassParams, horizon: int, control_cost: float = 0.0):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.params = params
        self.horizon = int(horizon)
        self.control_cost = float(control_cost)
        self._rot = rotation_matrix(params.actuator_rotation)
        self._gain = np.array(params.actuator_gain)
        self._cripple_mask = np.array([0.0 if d in params.crippled_dims else 1.0 for d in range(ACTION_DIM)])

    def reset(self, rng: np.random.Generator) -> EnvState:
        pos = rng.uniform(-RESET_BOX_HALF_WIDTH, RESET_BOX_HALF_WIDTH, size=2)
        return EnvState(position=(float(pos[0]), float(pos[1])), velocity=(0.0, 0.0), step_index=0)

    def observe(self, state: EnvState) -> Array:
        return np.array([*state.position, *state.velocity])

    def step(self, state: EnvState, action: Array) -> tuple[EnvState, float, bool]:
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (ACTION_DIM,):
            raise DimensionError(f"action must have shape ({ACTION_DIM},), got {a.shape}")
        if not np.isfinite(a).all():
            raise InputError("non-finite action")
        a = np.clip(a, -1.0, 1.0) * self._cripple_mask
        p = self.params
        v = np.array(state.velocity)
        force = self._rot @ (self._gain * a)
        v_next = (1.0 - p.drag) * v + p.dt * force / p.mass
        pos_next = np.array(state.position) + p.dt * v_next
        reward = float(v_next[0]) - self.control_cost * float(a @ a)
        next_state = EnvState(
            position=(float(pos_next[0]), float(pos_next[1])),
            velocity=(float(v_next[0]), float(v_next[1])),
            step_index=state.step_index + 1,
        )
        done = next_state.step_index == self.horizon
        return next_state, reward, done


class DelayedRewardWrapper:
    """Accumulates dense rewards and emits them every `delay_steps` steps and
    at episode end; the emitted total over an episode equals the dense total."""

    def __init__(self, env: PointMassEnv, delay_steps: int):
        if delay_steps < 1:
            raise ValueError("delay_steps must be >= 1")
        self.env = env
        self.delay_steps = int(delay_steps)
        self.accumulator = 0.0

    @property
    def params(self) -> PointMassParams:
        return self.env.params

    @property
    def horizon(self) -> int:
        return self.env.horizon

    state_dim = STATE_DIM
    action_dim = ACTION_DIM

    def observe(self, state: EnvState) -> Array:
        return self.env.observe(state)

    def reset(self, rng: np.random.Generator) -> EnvState:
        self.accumulator = 0.0
        return self.env.reset(rng)

    def wrapped_step(self, state: EnvState, action: Array) -> tuple[EnvState, float, bool]:
        next_state, dense, done = self.env.step(state, action)
        self.accumulator += dense
        emit = done or (next_state.step_index % self.delay_steps == 0)
        if emit:
            reward, self.accumulator = self.accumulator, 0.0
        else:
            reward = 0.0
        return next_state, reward, done

    step = wrapped_step


@dataclass
class EpisodeTrace:
    """One episode: observations, actions, emitted and dense rewards, and the
    K-step history window that preceded each action."""

    obs: Array  # [T+1, STATE_DIM]
    actions: Array  # [T, ACTION_DIM]
    rewards: Array  # [T] emitted rewards
    dense_rewards: Array  # [T] inner dense rewards
    windows: Array  # [T, window_width]

    @property
    def episode_reward(self) -> float:
        return float(self.rewards.sum())

    def __len__(self) -> int:
        return len(self.actions)


PolicyFn = Callable[[Array, Array], Array]


def rollout(env, policy_fn: PolicyFn, horizon: int, rng: np.random.Generator, history_k: int = 10) -> EpisodeTrace:
    """Run one episode. policy_fn maps (observation, history window) -> action."""
    state = env.reset(rng)
    width = window_width(STATE_DIM, ACTION_DIM, history_k)
    obs = np.zeros((horizon + 1, STATE_DIM))
    actions = np.zeros((horizon, ACTION_DIM))
    rewards = np.zeros(horizon)
    dense = np.zeros(horizon)
    windows = np.zeros((horizon, width))
    obs[0] = env.observe(state)
    t = 0
    for t in range(horizon):
        windows[t] = history_window(obs, actions, t, history_k)
        action = np.asarray(policy_fn(obs[t], windows[t]), dtype=np.float64)
        if not np.isfinite(action).all():
            raise InputError("policy produced a non-finite action")
        if isinstance(env, DelayedRewardWrapper):
            pre = env.accumulator
            state, emitted, done = env.wrapped_step(state, action)
            # dense reward this step = accumulator growth, folding in any emission
            dense[t] = (env.accumulator - pre) + emitted
            rewards[t] = emitted
        else:
            state, r, done = env.step(state, action)
            dense[t] = r
            rewards[t] = r
        actions[t] = np.clip(action, -1.0, 1.0)
        obs[t + 1] = env.observe(state)
        if done:
            break
    n = t + 1
    return EpisodeTrace(
        obs=obs[: n + 1],
        actions=actions[:n],
        rewards=rewards[:n],
        dense_rewards=dense[:n],
        windows=windows[:n],
    )


@dataclass(frozen=True)
class TaskSet:
    """Named family of training and held-out test tasks."""

    family: str
    train_params: tuple[PointMassParams, ...]
    test_params: tuple[PointMassParams, ...]
    horizon: int
    delay_steps: int
    control_cost: float = 0.0

    def __post_init__(self):
        if set(self.train_params) & set(self.test_params):
            raise ValueError("train and test parameter lists must be disjoint")

    def train_envs(self) -> list[DelayedRewardWrapper]:
        return [self._wrap(p) for p in self.train_params]

    def test_envs(self) -> list[DelayedRewardWrapper]:
        return [self._wrap(p) for p in self.test_params]

    def _wrap(self, params: PointMassParams) -> DelayedRewardWrapper:
        return DelayedRewardWrapper(PointMassEnv(params, self.horizon, self.control_cost), self.delay_steps)


FAMILIES = ("mass", "gain", "rotation", "cripple")

# Cripple-family tasks keep a fixed non-axis-aligned rotation so that losing
# either action dimension degrades (but never zeroes) forward actuation.
CRIPPLE_FAMILY_ROTATION = np.pi / 4


def family_params(family: str, value: float, base: PointMassParams | None = None) -> PointMassParams:
    base = base if base is not None else PointMassParams()
    if family == "mass":
        return PointMassParams(mass=float(value), drag=base.drag, actuator_gain=base.actuator_gain,
                               actuator_rotation=base.actuator_rotation, crippled_dims=base.crippled_dims, dt=base.dt)
    if family == "gain":
        return PointMassParams(mass=base.mass, drag=base.drag, actuator_gain=(float(value), base.actuator_gain[1]),
                               actuator_rotation=base.actuator_rotation, crippled_dims=base.crippled_dims, dt=base.dt)
    if family == "rotation":
        return PointMassParams(mass=base.mass, drag=base.drag, actuator_gain=base.actuator_gain,
                               actuator_rotation=float(value), crippled_dims=base.crippled_dims, dt=base.dt)
    if family == "cripple":
        dim = int(value)
        crippled = frozenset() if dim < 0 else frozenset({dim})
        return PointMassParams(mass=base.mass, drag=base.drag, actuator_gain=base.actuator_gain,
                               actuator_rotation=CRIPPLE_FAMILY_ROTATION, crippled_dims=crippled, dt=base.dt)
    raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")


def make_task_set(
    family: str,
    train_values: Sequence[float],
    test_values: Sequence[float],
    horizon: int = 200,
    delay_steps: int = 50,
    control_cost: float = 0.0,
    base: PointMassParams | None = None,
) -> TaskSet:
    return TaskSet(
        family=family,
        train_params=tuple(family_params(family, v, base) for v in train_values),
        test_params=tuple(family_params(family, v, base) for v in test_values),
        horizon=horizon,
        delay_steps=delay_steps,
        control_cost=control_cost,
    )


def default_task_set(horizon: int = 200, delay_steps: int = 50) -> TaskSet:
    """Five training masses and two held-out masses."""
    return make_task_set("mass", (0.5, 1.0, 1.5, 2.0, 2.5), (0.3, 2.8), horizon, delay_steps)


def scripted_throttle_policy(params: PointMassParams, throttle: float = 0.9) -> PolicyFn:
    """Constant policy pushing the mass along +x for this task's actuators.

    Counter-rotates the throttle vector and divides out the per-axis gain so
    the applied force is (throttle, 0) whenever that action is feasible.
    """
    gain = np.array(params.actuator_gain)
    target = rotation_matrix(-params.actuator_rotation) @ np.array([throttle, 0.0])
    safe_gain = np.where(np.abs(gain) > 1e-9, gain, 1.0)
    action = np.clip(target / safe_gain, -1.0, 1.0)

    def policy(obs: Array, window: Array) -> Array:
        return action.copy()

    return policy


def random_action_policy(rng: np.random.Generator, scale: float = 1.0) -> PolicyFn:
    def policy(obs: Array, window: Array) -> Array:
        return rng.uniform(-scale, scale, size=ACTION_DIM)

    return policy


def noisy_policy(base: PolicyFn, rng: np.random.Generator, noise_scale: float, mix: float = 1.0) -> PolicyFn:
    """Behavior policy for dataset collection: mix * base + uniform noise."""

    def policy(obs: Array, window: Array) -> Array:
        a = mix * np.asarray(base(obs, window), dtype=np.float64)
        a = a + rng.uniform(-noise_scale, noise_scale, size=ACTION_DIM)
        return np.clip(a, -1.0, 1.0)

    return policy


def trace_to_jsonl(trace: EpisodeTrace) -> list[str]:
    """One JSON object per step: observation, action, emitted and dense reward."""
    import json

    lines = []
    for t in range(len(trace)):
        lines.append(
            json.dumps(
                {
                    "t": t,
                    "obs": trace.obs[t].tolist(),
                    "action": trace.actions[t].tolist(),
                    "reward": trace.rewards[t],
                    "dense_reward": trace.dense_rewards[t],
                    "next_obs": trace.obs[t + 1].tolist(),
                }
            )
        )
    return lines
