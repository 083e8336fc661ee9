"""Learned components: context encoder, Gaussian forward dynamics, action
translator, reward predictor, and their losses.

Conventions: every loss is a mean over the batch (the multi-step prediction
loss sums its future steps per anchor before averaging), and every loss
returns analytic gradients for exactly the parameter sets it is allowed to
move. Translation losses send gradients to the translator only; the forward
path stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, StateError
from .numkit import Mlp, _sigmoid, seeded_rng

Array = np.ndarray

LOGVAR_LOW = -5.0
LOGVAR_HIGH = 2.0
LOG_2PI = float(np.log(2.0 * np.pi))


def window_width(state_dim: int, action_dim: int, k: int) -> int:
    return k * (state_dim + action_dim)


def history_window(obs: Array, actions: Array, t: int, k: int) -> Array:
    """History window preceding the action at step t.

    The window holds the last k (state-delta, action) pairs, oldest first,
    zero-padded at the front when fewer than k steps exist. State deltas are
    differences of consecutive observations.
    """
    s = obs.shape[1]
    a = actions.shape[1]
    pair = s + a
    w = np.zeros(k * pair)
    n = min(t, k)
    for m in range(n):
        step = t - n + m
        slot = k - n + m
        w[slot * pair : slot * pair + s] = obs[step + 1] - obs[step]
        w[slot * pair + s : (slot + 1) * pair] = actions[step]
    return w


class ContextEncoder:
    """Maps a history window to a latent context vector."""

    def __init__(self, window_dim: int, z_dim: int, hidden=(128, 64, 32), rng=None):
        self.window_dim = window_dim
        self.z_dim = z_dim
        self.net = Mlp([window_dim, *hidden, z_dim], hidden_activation="swish", output_activation="identity", rng=rng)

    def encode(self, windows: Array) -> Array:
        windows = np.atleast_2d(np.asarray(windows, dtype=np.float64))
        if windows.shape[1] != self.window_dim:
            raise DimensionError(f"window width {windows.shape[1]} != {self.window_dim}")
        return self.net.forward(windows)

    def backward(self, dz: Array) -> list[Array]:
        grads, _ = self.net.backward(dz)
        return grads


class GaussianDynamics:
    """Diagonal-Gaussian predictor of the state delta given (s, a, z).

    The log-variance head is squashed smoothly into [LOGVAR_LOW, LOGVAR_HIGH]
    so the likelihood stays differentiable everywhere.
    """

    def __init__(self, state_dim: int, action_dim: int, z_dim: int, hidden=(128, 128), rng=None):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.z_dim = z_dim
        self.net = Mlp(
            [state_dim + action_dim + z_dim, *hidden, 2 * state_dim],
            hidden_activation="relu",
            output_activation="identity",
            rng=rng,
        )
        self._last_sig: Array | None = None

    def predict(self, states: Array, actions: Array, zs: Array) -> tuple[Array, Array]:
        x = np.concatenate([states, actions, zs], axis=1)
        out = self.net.forward(x)
        mu = out[:, : self.state_dim]
        sig = _sigmoid(out[:, self.state_dim :])
        self._last_sig = sig
        logvar = LOGVAR_LOW + (LOGVAR_HIGH - LOGVAR_LOW) * sig
        return mu, logvar

    def backward(self, dmu: Array, dlogvar: Array) -> tuple[list[Array], Array]:
        """Gradients for the last predict call; returns (param grads, input grads)."""
        if self._last_sig is None:
            raise StateError("backward called before predict")
        draw = dlogvar * (LOGVAR_HIGH - LOGVAR_LOW) * self._last_sig * (1.0 - self._last_sig)
        dout = np.concatenate([dmu, draw], axis=1)
        return self.net.backward(dout)

    def split_input_grad(self, dx: Array) -> tuple[Array, Array, Array]:
        s, a = self.state_dim, self.action_dim
        return dx[:, :s], dx[:, s : s + a], dx[:, s + a :]


class ActionTranslator:
    """Maps (state, source action, source feature, target feature) to a
    bounded target-task action via a tanh output layer."""

    def __init__(self, state_dim: int, action_dim: int, z_dim: int, hidden=(128, 128), rng=None):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.z_dim = z_dim
        self.net = Mlp(
            [state_dim + action_dim + 2 * z_dim, *hidden, action_dim],
            hidden_activation="relu",
            output_activation="tanh",
            rng=rng,
        )

    def translate(self, states: Array, actions: Array, z_src: Array, z_tgt: Array) -> Array:
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        b = states.shape[0]
        z_src = np.broadcast_to(np.asarray(z_src, dtype=np.float64), (b, self.z_dim))
        z_tgt = np.broadcast_to(np.asarray(z_tgt, dtype=np.float64), (b, self.z_dim))
        x = np.concatenate([states, actions, z_src, z_tgt], axis=1)
        return self.net.forward(x)

    def backward(self, dout: Array) -> list[Array]:
        grads, _ = self.net.backward(dout)
        return grads


class RewardPredictor:
    """Scalar reward model r_hat(s, a, z)."""

    def __init__(self, state_dim: int, action_dim: int, z_dim: int, hidden=(128, 128), rng=None):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.z_dim = z_dim
        self.net = Mlp(
            [state_dim + action_dim + z_dim, *hidden, 1],
            hidden_activation="relu",
            output_activation="identity",
            rng=rng,
        )

    def predict(self, states: Array, actions: Array, zs: Array) -> Array:
        x = np.concatenate([states, actions, zs], axis=1)
        return self.net.forward(x)[:, 0]

    def backward(self, dout: Array) -> tuple[list[Array], Array]:
        return self.net.backward(dout[:, np.newaxis])


def gaussian_nll(mu: Array, logvar: Array, target: Array) -> tuple[Array, Array, Array]:
    """Per-row diagonal Gaussian negative log-likelihood and its gradients.

    Returns (nll [B], d nll/d mu, d nll/d logvar); each row sums over dims.
    """
    inv_var = np.exp(-logvar)
    resid = target - mu
    nll = 0.5 * (LOG_2PI + logvar + resid * resid * inv_var).sum(axis=1)
    dmu = -resid * inv_var
    dlogvar = 0.5 * (1.0 - resid * resid * inv_var)
    return nll, dmu, dlogvar


@dataclass
class SegmentBatch:
    """Anchored training segments: the history window at the anchor plus the
    next future_m transitions (states s_t..s_{t+M}, actions a_t..a_{t+M-1})."""

    windows: Array  # [B, W]
    states: Array  # [B, M+1, S]
    actions: Array  # [B, M, A]
    task_ids: Array  # [B]

    @property
    def batch_size(self) -> int:
        return self.windows.shape[0]

    @property
    def future_m(self) -> int:
        return self.actions.shape[1]


@dataclass
class ForwardLossResult:
    loss: float
    encoder_grads: list[Array]
    dynamics_grads: list[Array]
    z: Array
    dz_forward: Array


def forward_loss(encoder: ContextEncoder, dynamics: GaussianDynamics, segment: SegmentBatch) -> ForwardLossResult:
    """Teacher-forced multi-step prediction loss.

    Each future step m conditions on the recorded s_{t+m-1} with the anchor's
    context fixed; the loss is the mean over anchors of the per-anchor sum of
    Gaussian NLL terms for the state deltas.
    """
    b, m = segment.batch_size, segment.future_m
    s_dim = segment.states.shape[2]
    z = encoder.encode(segment.windows)
    states_in = segment.states[:, :m, :].reshape(b * m, s_dim)
    actions_in = segment.actions.reshape(b * m, -1)
    z_rep = np.repeat(z, m, axis=0)
    mu, logvar = dynamics.predict(states_in, actions_in, z_rep)
    target = (segment.states[:, 1:, :] - segment.states[:, :m, :]).reshape(b * m, s_dim)
    nll, dmu, dlogvar = gaussian_nll(mu, logvar, target)
    loss = float(nll.sum() / b)
    dyn_grads, dx = dynamics.backward(dmu / b, dlogvar / b)
    dz = dynamics.split_input_grad(dx)[2].reshape(b, m, -1).sum(axis=1)
    enc_grads = encoder.backward(dz)
    return ForwardLossResult(loss=loss, encoder_grads=enc_grads, dynamics_grads=dyn_grads, z=z, dz_forward=dz)


def sample_contrastive_pairs(rng: np.random.Generator, batch_size: int) -> list[tuple[int, int]]:
    """batch_size // 2 disjoint index pairs drawn without replacement."""
    perm = rng.permutation(batch_size)
    return [(int(perm[2 * k]), int(perm[2 * k + 1])) for k in range(batch_size // 2)]


def contrastive_loss(
    z: Array, task_ids: Array, margin: float, pairs: list[tuple[int, int]]
) -> tuple[float, Array]:
    """Margin loss over embedding pairs: squared distance for same-task pairs,
    hinge max(0, margin - distance) for cross-task pairs. Returns the mean
    over pairs and the gradient with respect to z."""
    if len(pairs) == 0:
        raise DimensionError("contrastive_loss needs at least one pair")
    dz = np.zeros_like(z)
    total = 0.0
    for i, j in pairs:
        diff = z[i] - z[j]
        dist = float(np.sqrt(diff @ diff))
        if task_ids[i] == task_ids[j]:
            total += dist * dist
            dz[i] += 2.0 * diff
            dz[j] -= 2.0 * diff
        elif dist < margin:
            total += margin - dist
            if dist > 1e-12:
                g = -diff / dist
                dz[i] += g
                dz[j] -= g
    n = len(pairs)
    return total / n, dz / n


def task_feature(encoder: ContextEncoder, windows: Array, n_samples: int, rng: np.random.Generator) -> Array:
    """Mean context embedding over up to n_samples windows drawn uniformly
    without replacement."""
    if windows.shape[0] == 0:
        raise StateError("task_feature called with an empty window buffer")
    n = min(int(n_samples), windows.shape[0])
    idx = rng.choice(windows.shape[0], size=n, replace=False)
    return encoder.encode(windows[idx]).mean(axis=0)


@dataclass
class TransitionBatch:
    states: Array  # [B, S]
    actions: Array  # [B, A]
    next_states: Array  # [B, S]
    rewards: Array | None = None  # [B]


@dataclass
class TranslationLossResult:
    loss: float
    translator_grads: list[Array]
    translated: Array


def translation_loss(
    dynamics: GaussianDynamics,
    translator,
    batch: TransitionBatch,
    z_src: Array,
    z_tgt: Array,
) -> TranslationLossResult:
    """Single-step NLL of the recorded next state under the frozen forward
    model evaluated at the translated action; gradients reach the translator
    through the dynamics model's action input only."""
    b = batch.states.shape[0]
    translated = translator.translate(batch.states, batch.actions, z_src, z_tgt)
    z_rows = np.broadcast_to(np.asarray(z_tgt, dtype=np.float64), (b, len(np.atleast_1d(z_tgt))))
    mu, logvar = dynamics.predict(batch.states, translated, z_rows)
    target = batch.next_states - batch.states
    nll, dmu, dlogvar = gaussian_nll(mu, logvar, target)
    loss = float(nll.mean())
    _, dx = dynamics.backward(dmu / b, dlogvar / b)
    d_translated = dynamics.split_input_grad(dx)[1]
    grads = translator.backward(d_translated)
    return TranslationLossResult(loss=loss, translator_grads=grads, translated=translated)


def translation_loss_with_reward(
    dynamics: GaussianDynamics,
    reward_model: RewardPredictor,
    translator,
    batch: TransitionBatch,
    z_src: Array,
    z_tgt: Array,
    lam: float = 10.0,
) -> TranslationLossResult:
    """Reward-augmented translation loss: mean |r - r_hat(s, a~, z_tgt)| plus
    lam times the single-step NLL term."""
    if batch.rewards is None:
        raise DimensionError("reward-augmented translation needs batch rewards")
    b = batch.states.shape[0]
    translated = translator.translate(batch.states, batch.actions, z_src, z_tgt)
    z_rows = np.broadcast_to(np.asarray(z_tgt, dtype=np.float64), (b, len(np.atleast_1d(z_tgt))))
    r_hat = reward_model.predict(batch.states, translated, z_rows)
    resid = batch.rewards - r_hat
    reward_term = float(np.abs(resid).mean())
    dr = -np.sign(resid) / b  # d |r - r_hat| / d r_hat
    _, dx_r = reward_model.backward(dr)
    d_translated = reward_model_split(reward_model, dx_r)

    mu, logvar = dynamics.predict(batch.states, translated, z_rows)
    target = batch.next_states - batch.states
    nll, dmu, dlogvar = gaussian_nll(mu, logvar, target)
    nll_term = float(nll.mean())
    _, dx_f = dynamics.backward(lam * dmu / b, lam * dlogvar / b)
    d_translated = d_translated + dynamics.split_input_grad(dx_f)[1]

    grads = translator.backward(d_translated)
    return TranslationLossResult(loss=reward_term + lam * nll_term, translator_grads=grads, translated=translated)


def reward_model_split(reward_model: RewardPredictor, dx: Array) -> Array:
    s, a = reward_model.state_dim, reward_model.action_dim
    return dx[:, s : s + a]
