"""Off-policy machinery: replay buffers, context-conditioned twin-critic
actor-critic, the TD3 critic / self-imitation losses, and the actor update.

The critic loss sums the squared TD error over both critics and averages over
the batch; the self-imitation term adds squared positive advantages
max(R - Q, 0)^2 so only returns that beat the critic estimate contribute.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .numkit import Mlp

Array = np.ndarray


@dataclass
class Td3Config:
    """TD3 hyperparameters; defaults follow the standard table."""

    batch_size: int = 256
    gamma: float = 0.99
    tau: float = 5e-3
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_freq: int = 2
    explore_noise: float = 0.1
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, window_dim: int):
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.windows = np.zeros((capacity, window_dim))
        self.task_ids = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def add(self, state, action, reward, next_state, window, task_id) -> None:
        i = self.cursor
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.windows[i] = window
        self.task_ids[i] = task_id
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, Array]:
        if self.size == 0:
            raise DimensionError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return {
            "states": self.states[idx],
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "next_states": self.next_states[idx],
            "windows": self.windows[idx],
            "task_ids": self.task_ids[idx],
        }


class SilBuffer:
    """Ring buffer of (state, action, window, discounted return, task id);
    episodes are inserted only after they complete."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, window_dim: int):
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.windows = np.zeros((capacity, window_dim))
        self.returns = np.zeros(capacity)
        self.task_ids = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def add(self, state, action, window, ret, task_id) -> None:
        if not np.isfinite(ret):
            raise DimensionError("non-finite return")
        i = self.cursor
        self.states[i] = state
        self.actions[i] = action
        self.windows[i] = window
        self.returns[i] = ret
        self.task_ids[i] = task_id
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, Array]:
        if self.size == 0:
            raise DimensionError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return {
            "states": self.states[idx],
            "actions": self.actions[idx],
            "windows": self.windows[idx],
            "returns": self.returns[idx],
            "task_ids": self.task_ids[idx],
        }


def compute_returns(rewards: Array, gamma: float) -> Array:
    """Discounted returns R_t = r_t + gamma R_{t+1} by backward recursion."""
    rewards = np.asarray(rewards, dtype=np.float64)
    returns = np.zeros_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        returns[t] = acc
    return returns


class ActorCritic:
    """Tanh-bounded actor pi(s, z) and twin critics Q(s, a, z) with targets."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        z_dim: int,
        actor_hidden=(128, 128),
        critic_hidden=(128, 128),
        cfg: Td3Config | None = None,
        rng=None,
    ):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.z_dim = z_dim
        self.cfg = cfg if cfg is not None else Td3Config()
        self.actor = Mlp([state_dim + z_dim, *actor_hidden, action_dim], "relu", "tanh", rng=rng)
        self.q1 = Mlp([state_dim + action_dim + z_dim, *critic_hidden, 1], "relu", "identity", rng=rng)
        self.q2 = Mlp([state_dim + action_dim + z_dim, *critic_hidden, 1], "relu", "identity", rng=rng)
        self.actor_target = self.actor.clone()
        self.q1_target = self.q1.clone()
        self.q2_target = self.q2.clone()

    def act(self, states: Array, zs: Array, target: bool = False) -> Array:
        net = self.actor_target if target else self.actor
        return net.forward(np.concatenate([np.atleast_2d(states), np.atleast_2d(zs)], axis=1))

    def q_values(self, net: Mlp, states: Array, actions: Array, zs: Array) -> Array:
        x = np.concatenate([states, actions, zs], axis=1)
        return net.forward(x)[:, 0]


def td3_targets(ac: ActorCritic, batch: dict[str, Array], z: Array, rng: np.random.Generator) -> Array:
    """Smoothed bootstrap targets y = r + gamma min_l Q'_l(s', a', z) with
    a' = clip(pi'(s', z) + clipped noise, -1, 1)."""
    cfg = ac.cfg
    a_next = ac.act(batch["next_states"], z, target=True)
    noise = np.clip(
        rng.normal(0.0, cfg.policy_noise, size=a_next.shape), -cfg.noise_clip, cfg.noise_clip
    )
    a_next = np.clip(a_next + noise, -1.0, 1.0)
    q1 = ac.q_values(ac.q1_target, batch["next_states"], a_next, z)
    q2 = ac.q_values(ac.q2_target, batch["next_states"], a_next, z)
    return batch["rewards"] + cfg.gamma * np.minimum(q1, q2)


def td3_critic_loss(
    ac: ActorCritic, batch: dict[str, Array], z: Array, targets: Array
) -> tuple[float, list[Array], list[Array]]:
    """Mean over the batch of the summed squared TD errors of both critics."""
    b = len(targets)
    q1 = ac.q_values(ac.q1, batch["states"], batch["actions"], z)
    q2 = ac.q_values(ac.q2, batch["states"], batch["actions"], z)
    e1 = q1 - targets
    e2 = q2 - targets
    loss = float((e1 * e1 + e2 * e2).mean())
    g1, _ = ac.q1.backward((2.0 * e1 / b)[:, np.newaxis])
    g2, _ = ac.q2.backward((2.0 * e2 / b)[:, np.newaxis])
    return loss, g1, g2


def sil_loss(ac: ActorCritic, batch: dict[str, Array], z: Array) -> tuple[float, list[Array], list[Array]]:
    """Self-imitation critic loss: mean over the batch of
    sum_l max(R - Q_l, 0)^2; inactive records contribute no gradient."""
    b = len(batch["returns"])
    q1 = ac.q_values(ac.q1, batch["states"], batch["actions"], z)
    q2 = ac.q_values(ac.q2, batch["states"], batch["actions"], z)
    adv1 = np.maximum(batch["returns"] - q1, 0.0)
    adv2 = np.maximum(batch["returns"] - q2, 0.0)
    loss = float((adv1 * adv1 + adv2 * adv2).mean())
    g1, _ = ac.q1.backward((-2.0 * adv1 / b)[:, np.newaxis])
    g2, _ = ac.q2.backward((-2.0 * adv2 / b)[:, np.newaxis])
    return loss, g1, g2


def actor_loss(ac: ActorCritic, states: Array, z: Array) -> tuple[float, list[Array]]:
    """Deterministic policy-gradient objective: minimize -mean Q1(s, pi(s, z), z).

    Critics stay frozen; the gradient flows through Q1's action input into the
    actor parameters only.
    """
    b = states.shape[0]
    actions = ac.act(states, z)
    q1 = ac.q_values(ac.q1, states, actions, z)
    loss = float(-q1.mean())
    _, dx = ac.q1.backward(np.full((b, 1), -1.0 / b))
    d_actions = dx[:, ac.state_dim : ac.state_dim + ac.action_dim]
    grads, _ = ac.actor.backward(d_actions)
    return loss, grads


def soft_update(online: Mlp, target: Mlp, tau: float) -> None:
    """target <- (1 - tau) target + tau online, in place."""
    for t_arr, o_arr in zip(target.params(), online.params()):
        t_arr *= 1.0 - tau
        t_arr += tau * o_arr


def explore_action(
    ac: ActorCritic, state: Array, z: Array, rng: np.random.Generator, sigma: float
) -> Array:
    """Policy action plus Gaussian exploration noise, clipped to [-1, 1]."""
    a = ac.act(state[np.newaxis, :] if state.ndim == 1 else state, np.atleast_2d(z))[0]
    if sigma > 0:
        a = a + rng.normal(0.0, sigma, size=a.shape)
    return np.clip(a, -1.0, 1.0)
