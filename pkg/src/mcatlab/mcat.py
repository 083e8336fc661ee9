"""Training orchestration: episode-level selection between the shared and
transferred policies via recent-reward windows, alternating updates of the
context/forward models, the action translator, and the TD3+SIL actor-critic,
plus the fixed-dataset transfer and improvement-matrix evaluation protocols.

The iteration pipeline is strictly sequential: collect, then context/forward
updates, then translator updates (context and forward frozen), then critic and
actor updates (context frozen), then task-feature refresh. Runs are
deterministic given (config, seed): all randomness flows through named
per-purpose streams that are persisted in checkpoints, so a resumed run
continues bit-exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash
from .envs import (
    ACTION_DIM,
    STATE_DIM,
    DelayedRewardWrapper,
    EpisodeTrace,
    PointMassEnv,
    PolicyFn,
    rollout,
)
from .errors import InputError, NumericError, StateError
from .models import (
    ActionTranslator,
    ContextEncoder,
    GaussianDynamics,
    RewardPredictor,
    SegmentBatch,
    TransitionBatch,
    contrastive_loss,
    forward_loss,
    history_window,
    sample_contrastive_pairs,
    translation_loss,
    translation_loss_with_reward,
    window_width,
)
from .numkit import AdamState, adam_init, adam_step, load_checkpoint, save_checkpoint, seeded_rng
from .rl import (
    ActorCritic,
    ReplayBuffer,
    SilBuffer,
    Td3Config,
    actor_loss,
    compute_returns,
    explore_action,
    sil_loss,
    soft_update,
    td3_critic_loss,
    td3_targets,
)

Array = np.ndarray


# --- reward windows and behavior selection -------------------------------------


@dataclass(frozen=True)
class BehaviorChoice:
    kind: str  # "shared" | "transferred"
    source_task: int | None = None

    def __post_init__(self):
        if self.kind not in ("shared", "transferred"):
            raise ValueError(f"unknown behavior kind {self.kind!r}")
        if (self.kind == "transferred") != (self.source_task is not None):
            raise ValueError("source_task must be set exactly when kind is 'transferred'")


class RewardWindows:
    """Recent episode rewards for the shared policy per task and for the
    transferred policy per ordered (source, target) pair.

    Entries are (episode reward, global timestep); an entry is kept while its
    timestep lies within the last window_steps global steps (inclusive).
    """

    def __init__(self, task_ids: list[int], window_steps: int):
        self.window_steps = int(window_steps)
        self.task_ids = list(task_ids)
        self.shared: dict[int, list[tuple[float, int]]] = {i: [] for i in task_ids}
        self.transferred: dict[tuple[int, int], list[tuple[float, int]]] = {
            (j, i): [] for j in task_ids for i in task_ids if j != i
        }

    def record_episode(self, task: int, choice: BehaviorChoice, episode_reward: float, timestep: int) -> None:
        entry = (float(episode_reward), int(timestep))
        if choice.kind == "shared":
            self.shared[task].append(entry)
        else:
            self.transferred[(choice.source_task, task)].append(entry)
        self.evict(timestep)

    def evict(self, now: int) -> None:
        cutoff = now - self.window_steps
        for key in self.shared:
            self.shared[key] = [e for e in self.shared[key] if e[1] >= cutoff]
        for key in self.transferred:
            self.transferred[key] = [e for e in self.transferred[key] if e[1] >= cutoff]

    @staticmethod
    def _mean(entries: list[tuple[float, int]]) -> float:
        return sum(e[0] for e in entries) / len(entries)

    def shared_mean(self, task: int) -> float | None:
        entries = self.shared[task]
        return self._mean(entries) if entries else None

    def transferred_mean(self, source: int, target: int) -> float | None:
        entries = self.transferred[(source, target)]
        return self._mean(entries) if entries else None


def select_behavior(windows: RewardWindows, task_i: int) -> BehaviorChoice:
    """Episode-level behavior cascade.

    1. No shared-policy rewards recorded for the target yet: use shared.
    2. Else if some source j (smallest index wins) has an untried transfer
       window and a strictly better shared mean: transfer from j.
    3. Else if the best tried transfer source strictly beats the target's
       shared mean (argmax ties to the smallest index): transfer from it.
    4. Else use shared.
    """
    mean_i = windows.shared_mean(task_i)
    if mean_i is None:
        return BehaviorChoice("shared")
    for j in sorted(windows.task_ids):
        if j == task_i:
            continue
        if not windows.transferred[(j, task_i)]:
            mean_j = windows.shared_mean(j)
            if mean_j is not None and mean_j > mean_i:
                return BehaviorChoice("transferred", j)
    best_j, best_mean = None, -np.inf
    for j in sorted(windows.task_ids):
        if j == task_i:
            continue
        mean_tr = windows.transferred_mean(j, task_i)
        if mean_tr is not None and mean_tr > best_mean:
            best_j, best_mean = j, mean_tr
    if best_j is not None and best_mean > mean_i:
        return BehaviorChoice("transferred", best_j)
    return BehaviorChoice("shared")


def transferred_policy_action(
    translator: ActionTranslator,
    actor_fn,
    obs: Array,
    z_src: Array,
    z_tgt: Array,
) -> Array:
    """Transferred policy: translate the source-conditioned policy action."""
    a_src = actor_fn(obs, z_src)
    return translator.translate(obs[np.newaxis, :], a_src[np.newaxis, :], z_src, z_tgt)[0]


# --- per-task episode storage ---------------------------------------------------


class EpisodeStore:
    """Ring of complete fixed-length episodes for one task; serves segment,
    transition, and history-window samples for model training."""

    def __init__(self, capacity_episodes: int, horizon: int, history_k: int):
        self.capacity = int(capacity_episodes)
        self.horizon = int(horizon)
        self.history_k = int(history_k)
        self.obs = np.zeros((self.capacity, horizon + 1, STATE_DIM))
        self.actions = np.zeros((self.capacity, horizon, ACTION_DIM))
        self.rewards = np.zeros((self.capacity, horizon))
        self.count = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.count

    @property
    def n_transitions(self) -> int:
        return self.count * self.horizon

    def add_episode(self, trace: EpisodeTrace) -> None:
        if len(trace) != self.horizon:
            raise InputError(f"episode length {len(trace)} != store horizon {self.horizon}")
        i = self.cursor
        self.obs[i] = trace.obs
        self.actions[i] = trace.actions
        self.rewards[i] = trace.rewards
        self.cursor = (self.cursor + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)

    def _require_data(self):
        if self.count == 0:
            raise StateError("episode store is empty")

    def window_at(self, episode: int, t: int) -> Array:
        return history_window(self.obs[episode], self.actions[episode], t, self.history_k)

    def sample_segments(self, batch: int, future_m: int, rng: np.random.Generator, task_id: int) -> SegmentBatch:
        self._require_data()
        eps = rng.integers(0, self.count, size=batch)
        ts = rng.integers(0, self.horizon - future_m + 1, size=batch)
        width = window_width(STATE_DIM, ACTION_DIM, self.history_k)
        windows = np.zeros((batch, width))
        states = np.zeros((batch, future_m + 1, STATE_DIM))
        actions = np.zeros((batch, future_m, ACTION_DIM))
        for row, (e, t) in enumerate(zip(eps, ts)):
            windows[row] = self.window_at(e, t)
            states[row] = self.obs[e, t : t + future_m + 1]
            actions[row] = self.actions[e, t : t + future_m]
        return SegmentBatch(windows=windows, states=states, actions=actions, task_ids=np.full(batch, task_id))

    def sample_transitions(self, batch: int, rng: np.random.Generator) -> TransitionBatch:
        self._require_data()
        eps = rng.integers(0, self.count, size=batch)
        ts = rng.integers(0, self.horizon, size=batch)
        return TransitionBatch(
            states=self.obs[eps, ts],
            actions=self.actions[eps, ts],
            next_states=self.obs[eps, ts + 1],
            rewards=self.rewards[eps, ts],
        )

    def sample_windows(self, n: int, rng: np.random.Generator) -> Array:
        self._require_data()
        n = min(int(n), self.n_transitions)
        flat = rng.choice(self.n_transitions, size=n, replace=False)
        width = window_width(STATE_DIM, ACTION_DIM, self.history_k)
        out = np.zeros((n, width))
        for row, f in enumerate(flat):
            out[row] = self.window_at(int(f) // self.horizon, int(f) % self.horizon)
        return out


def collect_dataset(env, behavior: PolicyFn, n_episodes: int, rng: np.random.Generator, history_k: int) -> EpisodeStore:
    """Roll a behavior policy for n_episodes and store the traces."""
    store = EpisodeStore(n_episodes, env.horizon, history_k)
    for _ in range(n_episodes):
        store.add_episode(rollout(env, behavior, env.horizon, rng, history_k))
    return store


# --- evaluation helpers ---------------------------------------------------------


@dataclass
class EvalStats:
    mean: float
    stderr: float
    rewards: list[float]


def evaluate_policy(env, policy_fn: PolicyFn, episodes: int, rng: np.random.Generator, history_k: int) -> EvalStats:
    rewards = [rollout(env, policy_fn, env.horizon, rng, history_k).episode_reward for _ in range(episodes)]
    arr = np.asarray(rewards)
    stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return EvalStats(mean=float(arr.mean()), stderr=stderr, rewards=rewards)


# --- the trainer -----------------------------------------------------------------

COMPONENT_NAMES = (
    "context",
    "forward",
    "translator",
    "reward",
    "actor",
    "critic1",
    "critic2",
    "actor_target",
    "critic1_target",
    "critic2_target",
)
OPTIMIZED = ("context", "forward", "translator", "reward", "actor", "critic1", "critic2")

_STREAMS = {"collect": 1, "train": 2, "feature": 3, "eval": 4, "init": 5}


class McatTrainer:
    """Owns the full experiment state for one (config, seed) run."""

    def __init__(self, cfg: ExperimentConfig, seed: int, out_dir: str | Path):
        self.cfg = cfg
        self.seed = int(seed)
        self.out_dir = Path(out_dir)
        self.task_set = cfg.task_set()
        self.train_envs = self.task_set.train_envs()
        self.test_envs = self.task_set.test_envs()
        self.n_tasks = len(self.train_envs)
        self.task_ids = list(range(self.n_tasks))
        m = cfg.models
        self.history_k = m.history_k
        self.window_dim = window_width(STATE_DIM, ACTION_DIM, m.history_k)

        init_rng = seeded_rng(self.seed, _STREAMS["init"])
        self.encoder = ContextEncoder(self.window_dim, m.z_dim, m.context_hidden, rng=init_rng)
        self.dynamics = GaussianDynamics(STATE_DIM, ACTION_DIM, m.z_dim, m.forward_hidden, rng=init_rng)
        self.translator = ActionTranslator(STATE_DIM, ACTION_DIM, m.z_dim, m.translator_hidden, rng=init_rng)
        self.reward_model = RewardPredictor(STATE_DIM, ACTION_DIM, m.z_dim, m.reward_hidden, rng=init_rng)
        td3 = cfg.td3
        self.td3_cfg = Td3Config(
            batch_size=td3.batch_size,
            gamma=td3.gamma,
            tau=td3.tau,
            policy_noise=td3.policy_noise,
            noise_clip=td3.noise_clip,
            policy_freq=td3.policy_freq,
            explore_noise=td3.explore_noise,
            actor_lr=td3.actor_lr,
            critic_lr=td3.critic_lr,
        )
        self.ac = ActorCritic(
            STATE_DIM, ACTION_DIM, m.z_dim, td3.actor_hidden, td3.critic_hidden, self.td3_cfg, rng=init_rng
        )

        self.opt: dict[str, AdamState] = {
            "context": adam_init(self.encoder.net.params(), m.cf_lr),
            "forward": adam_init(self.dynamics.net.params(), m.cf_lr),
            "translator": adam_init(self.translator.net.params(), m.h_lr),
            "reward": adam_init(self.reward_model.net.params(), m.cf_lr),
            "actor": adam_init(self.ac.actor.params(), td3.actor_lr),
            "critic1": adam_init(self.ac.q1.params(), td3.critic_lr),
            "critic2": adam_init(self.ac.q2.params(), td3.critic_lr),
        }

        per_task_eps = max(2, td3.replay_capacity // max(1, self.n_tasks * self.task_set.horizon))
        self.stores = [EpisodeStore(per_task_eps, self.task_set.horizon, m.history_k) for _ in self.task_ids]
        self.replay = ReplayBuffer(td3.replay_capacity, STATE_DIM, ACTION_DIM, self.window_dim)
        self.sil = SilBuffer(td3.sil_capacity, STATE_DIM, ACTION_DIM, self.window_dim)
        self.windows = RewardWindows(self.task_ids, cfg.schedule.reward_window)
        self.features = np.zeros((self.n_tasks, m.z_dim))

        self.rng = {name: seeded_rng(self.seed, stream) for name, stream in _STREAMS.items()}
        self.global_step = 0
        self.iteration = 0
        self.task_cursor = 0

    # -- component table for serialization --

    def _nets(self) -> dict[str, object]:
        return {
            "context": self.encoder.net,
            "forward": self.dynamics.net,
            "translator": self.translator.net,
            "reward": self.reward_model.net,
            "actor": self.ac.actor,
            "critic1": self.ac.q1,
            "critic2": self.ac.q2,
            "actor_target": self.ac.actor_target,
            "critic1_target": self.ac.q1_target,
            "critic2_target": self.ac.q2_target,
        }

    # -- behavior policies --

    def _shared_action(self, obs: Array, window: Array, noise: bool) -> Array:
        z = self.encoder.encode(window[np.newaxis, :])[0]
        if noise:
            return explore_action(self.ac, obs, z, self.rng["collect"], self.td3_cfg.explore_noise)
        return self.ac.act(obs[np.newaxis, :], z[np.newaxis, :])[0]

    def _transferred_action(self, obs: Array, source: int, target: int, noise: bool) -> Array:
        z_src = self.features[source]
        z_tgt = self.features[target]
        a = transferred_policy_action(
            self.translator,
            lambda o, z: self.ac.act(o[np.newaxis, :], z[np.newaxis, :])[0],
            obs,
            z_src,
            z_tgt,
        )
        if noise:
            a = a + self.rng["collect"].normal(0.0, self.td3_cfg.explore_noise, size=a.shape)
        return np.clip(a, -1.0, 1.0)

    # -- phases --

    def _collect_phase(self) -> dict[str, float]:
        sched = self.cfg.schedule
        stats_reward = {i: [] for i in self.task_ids}
        stats_kind = {i: {"shared": 0, "transferred": 0} for i in self.task_ids}
        collected = 0
        while collected < sched.samples_per_iter:
            task = self.task_cursor
            self.task_cursor = (self.task_cursor + 1) % self.n_tasks
            warmup = self.global_step < self.cfg.td3.start_steps
            if warmup or not self.cfg.ablations.pt_enabled:
                choice = BehaviorChoice("shared")
            else:
                choice = select_behavior(self.windows, task)

            if warmup:
                rng = self.rng["collect"]

                def policy(obs, window):
                    return rng.uniform(-1.0, 1.0, size=ACTION_DIM)

            elif choice.kind == "shared":

                def policy(obs, window):
                    return self._shared_action(obs, window, noise=True)

            else:
                src = choice.source_task

                def policy(obs, window, _src=src, _tgt=task):
                    return self._transferred_action(obs, _src, _tgt, noise=True)

            trace = rollout(self.train_envs[task], policy, self.task_set.horizon, self.rng["collect"], self.history_k)
            collected += len(trace)
            self.global_step += len(trace)
            self.stores[task].add_episode(trace)
            returns = compute_returns(trace.rewards, self.td3_cfg.gamma)
            for t in range(len(trace)):
                self.replay.add(trace.obs[t], trace.actions[t], trace.rewards[t], trace.obs[t + 1], trace.windows[t], task)
                self.sil.add(trace.obs[t], trace.actions[t], trace.windows[t], returns[t], task)
            self.windows.record_episode(task, choice, trace.episode_reward, self.global_step)
            stats_reward[task].append(trace.episode_reward)
            stats_kind[task][choice.kind] += 1
        out: dict[str, float] = {}
        for i in self.task_ids:
            if stats_reward[i]:
                out[f"train/task{i}/reward_mean"] = float(np.mean(stats_reward[i]))
            out[f"train/task{i}/episodes_shared"] = stats_kind[i]["shared"]
            out[f"train/task{i}/episodes_transferred"] = stats_kind[i]["transferred"]
        return out

    def _sample_cf_batch(self, batch: int) -> SegmentBatch:
        rng = self.rng["train"]
        ready = [i for i in self.task_ids if len(self.stores[i]) > 0]
        tasks = [ready[int(k)] for k in rng.integers(0, len(ready), size=batch)]
        parts = []
        m = self.cfg.models.future_m
        for i in self.task_ids:
            rows = sum(1 for t in tasks if t == i)
            if rows:
                parts.append(self.stores[i].sample_segments(rows, m, rng, i))
        return SegmentBatch(
            windows=np.concatenate([p.windows for p in parts]),
            states=np.concatenate([p.states for p in parts]),
            actions=np.concatenate([p.actions for p in parts]),
            task_ids=np.concatenate([p.task_ids for p in parts]),
        )

    def _cf_phase(self) -> dict[str, float]:
        m = self.cfg.models
        losses_f, losses_c, losses_r = [], [], []
        for _ in range(self.cfg.schedule.cf_steps):
            seg = self._sample_cf_batch(m.cf_batch)
            res = forward_loss(self.encoder, self.dynamics, seg)
            enc_grads = res.encoder_grads
            losses_f.append(res.loss)
            if self.cfg.ablations.contrastive_enabled:
                pairs = sample_contrastive_pairs(self.rng["train"], seg.batch_size)
                c_loss, dz = contrastive_loss(res.z, seg.task_ids, m.margin, pairs)
                enc_grads = [a + b for a, b in zip(enc_grads, self.encoder.backward(dz))]
                losses_c.append(c_loss)
            adam_step(self.encoder.net.params(), enc_grads, self.opt["context"])
            adam_step(self.dynamics.net.params(), res.dynamics_grads, self.opt["forward"])
            if self.cfg.ablations.reward_augmented_trans:
                losses_r.append(self._reward_model_step())
        out = {"loss/forward": float(np.mean(losses_f))}
        if losses_c:
            out["loss/contrastive"] = float(np.mean(losses_c))
        if losses_r:
            out["loss/reward_model"] = float(np.mean(losses_r))
        return out

    def _reward_model_step(self) -> float:
        batch = self.replay.sample(self.cfg.models.cf_batch, self.rng["train"])
        z = self.encoder.encode(batch["windows"])
        pred = self.reward_model.predict(batch["states"], batch["actions"], z)
        err = pred - batch["rewards"]
        loss = float((err * err).mean())
        grads, _ = self.reward_model.backward((2.0 * err / len(err)))
        adam_step(self.reward_model.net.params(), grads, self.opt["reward"])
        return loss

    def _h_phase(self) -> dict[str, float]:
        m = self.cfg.models
        rng = self.rng["train"]
        losses = []
        ready = [i for i in self.task_ids if len(self.stores[i]) > 0]
        for _ in range(self.cfg.schedule.h_steps):
            j = ready[int(rng.integers(0, len(ready)))]
            i = ready[int(rng.integers(0, len(ready)))]
            batch = self.stores[j].sample_transitions(m.h_batch, rng)
            if self.cfg.ablations.reward_augmented_trans:
                res = translation_loss_with_reward(
                    self.dynamics, self.reward_model, self.translator, batch,
                    self.features[j], self.features[i], lam=m.lambda_reward,
                )
            else:
                res = translation_loss(self.dynamics, self.translator, batch, self.features[j], self.features[i])
            adam_step(self.translator.net.params(), res.translator_grads, self.opt["translator"])
            losses.append(res.loss)
        return {"loss/translation": float(np.mean(losses))}

    def _rl_phase(self) -> dict[str, float]:
        cfg = self.td3_cfg
        rng = self.rng["train"]
        td3_losses, sil_losses, actor_losses = [], [], []
        for step in range(self.cfg.schedule.rl_steps):
            batch = self.replay.sample(cfg.batch_size, rng)
            z = self.encoder.encode(batch["windows"])
            targets = td3_targets(self.ac, batch, z, rng)
            loss, g1, g2 = td3_critic_loss(self.ac, batch, z, targets)
            td3_losses.append(loss)
            if self.cfg.ablations.sil_enabled and len(self.sil) > 0:
                sil_batch = self.sil.sample(cfg.batch_size, rng)
                sz = self.encoder.encode(sil_batch["windows"])
                s_loss, sg1, sg2 = sil_loss(self.ac, sil_batch, sz)
                sil_losses.append(s_loss)
                g1 = [a + b for a, b in zip(g1, sg1)]
                g2 = [a + b for a, b in zip(g2, sg2)]
            adam_step(self.ac.q1.params(), g1, self.opt["critic1"])
            adam_step(self.ac.q2.params(), g2, self.opt["critic2"])
            if (step + 1) % cfg.policy_freq == 0:
                a_loss, a_grads = actor_loss(self.ac, batch["states"], z)
                adam_step(self.ac.actor.params(), a_grads, self.opt["actor"])
                actor_losses.append(a_loss)
                soft_update(self.ac.actor, self.ac.actor_target, cfg.tau)
                soft_update(self.ac.q1, self.ac.q1_target, cfg.tau)
                soft_update(self.ac.q2, self.ac.q2_target, cfg.tau)
        out = {"loss/td3": float(np.mean(td3_losses)), "loss/actor": float(np.mean(actor_losses))}
        out["loss/sil"] = float(np.mean(sil_losses)) if sil_losses else 0.0
        return out

    def _recompute_features(self) -> None:
        m = self.cfg.models
        for i in self.task_ids:
            if len(self.stores[i]) == 0:
                continue
            wins = self.stores[i].sample_windows(m.feature_samples, self.rng["feature"])
            self.features[i] = self.encoder.encode(wins).mean(axis=0)

    def _evaluate(self) -> dict[str, float]:
        out = {}
        for k, env in enumerate(self.test_envs):
            stats = evaluate_policy(
                env,
                lambda obs, window: self._shared_action(obs, window, noise=False),
                self.cfg.experiment.eval_episodes,
                self.rng["eval"],
                self.history_k,
            )
            out[f"test/task{k}/reward_mean"] = stats.mean
        return out

    def train_iteration(self) -> dict[str, float]:
        """One full pipeline iteration; returns the metrics record."""
        record: dict[str, float] = {}
        collect_stats = self._collect_phase()
        cf_stats = self._cf_phase()
        h_stats = self._h_phase()
        rl_stats = self._rl_phase()
        self._recompute_features()
        self.windows.evict(self.global_step)
        self.iteration += 1
        record["global_step"] = self.global_step
        record["iteration"] = self.iteration
        record.update(collect_stats)
        if self.iteration % self.cfg.experiment.eval_every == 0:
            record.update(self._evaluate())
        record.update(cf_stats)
        record.update(h_stats)
        record.update(rl_stats)
        for value in record.values():
            if not np.isfinite(value):
                raise NumericError(f"non-finite metric in iteration {self.iteration}")
        return record

    # -- run/checkpoint/resume --

    @property
    def run_dir(self) -> Path:
        return self.out_dir / f"seed{self.seed}"

    @property
    def metrics_path(self) -> Path:
        return self.run_dir / "metrics.jsonl"

    def _append_metrics(self, record: dict[str, float]) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        new_file = not self.metrics_path.exists()
        with open(self.metrics_path, "a", encoding="utf-8") as fh:
            if new_file:
                meta = {"meta": {"config_hash": config_hash(self.cfg), "seed": self.seed}}
                fh.write(json.dumps(meta) + "\n")
            fh.write(json.dumps(record) + "\n")
            fh.flush()

    def run(self, iterations: int | None = None, log=None) -> Path:
        """Train until the configured iteration count, checkpointing every
        checkpoint_every iterations and at exit."""
        total = iterations if iterations is not None else self.cfg.experiment.iterations
        every = self.cfg.experiment.checkpoint_every
        while self.iteration < total:
            start = time.monotonic()
            try:
                record = self.train_iteration()
            except (NumericError, FloatingPointError) as exc:
                self._append_metrics({"global_step": self.global_step, "iteration": self.iteration + 1,
                                      "error": 1.0})
                raise NumericError(f"iteration {self.iteration + 1} aborted: {exc}") from exc
            self._append_metrics(record)
            if log is not None:
                log(f"iter {self.iteration} step {self.global_step} "
                    f"({time.monotonic() - start:.1f}s)")
            if every > 0 and self.iteration % every == 0:
                self.save_checkpoint()
        self.save_checkpoint()
        return self.metrics_path

    def checkpoint_dir(self, iteration: int) -> Path:
        return self.run_dir / "checkpoints" / f"iter_{iteration:06d}"

    def save_checkpoint(self) -> Path:
        arrays: dict[str, Array] = {}
        for name, net in self._nets().items():
            for pname, p in zip(net.param_names(), net.params()):
                arrays[f"{name}/{pname}"] = p
        adam_steps = {}
        for name in OPTIMIZED:
            state = self.opt[name]
            adam_steps[name] = state.step_count
            for k, (m_arr, v_arr) in enumerate(zip(state.m, state.v)):
                arrays[f"adam_{name}/m{k}"] = m_arr
                arrays[f"adam_{name}/v{k}"] = v_arr
        for i in self.task_ids:
            st = self.stores[i]
            arrays[f"store{i}/obs"] = st.obs[: st.count]
            arrays[f"store{i}/actions"] = st.actions[: st.count]
            arrays[f"store{i}/rewards"] = st.rewards[: st.count]
        arrays["replay/states"] = self.replay.states[: self.replay.size]
        arrays["replay/actions"] = self.replay.actions[: self.replay.size]
        arrays["replay/rewards"] = self.replay.rewards[: self.replay.size]
        arrays["replay/next_states"] = self.replay.next_states[: self.replay.size]
        arrays["replay/windows"] = self.replay.windows[: self.replay.size]
        arrays["replay/task_ids"] = self.replay.task_ids[: self.replay.size].astype(np.float64)
        arrays["sil/states"] = self.sil.states[: self.sil.size]
        arrays["sil/actions"] = self.sil.actions[: self.sil.size]
        arrays["sil/windows"] = self.sil.windows[: self.sil.size]
        arrays["sil/returns"] = self.sil.returns[: self.sil.size]
        arrays["sil/task_ids"] = self.sil.task_ids[: self.sil.size].astype(np.float64)
        arrays["features"] = self.features
        for i, entries in self.windows.shared.items():
            arrays[f"rwin/shared{i}"] = np.asarray(entries, dtype=np.float64).reshape(len(entries), 2)
        for (j, i), entries in self.windows.transferred.items():
            arrays[f"rwin/xfer{j}_{i}"] = np.asarray(entries, dtype=np.float64).reshape(len(entries), 2)
        extra = {
            "iteration": self.iteration,
            "global_step": self.global_step,
            "task_cursor": self.task_cursor,
            "seed": self.seed,
            "config_hash": config_hash(self.cfg),
            "adam_steps": adam_steps,
            "replay": {"size": self.replay.size, "cursor": self.replay.cursor},
            "sil": {"size": self.sil.size, "cursor": self.sil.cursor},
            "stores": {str(i): {"count": self.stores[i].count, "cursor": self.stores[i].cursor} for i in self.task_ids},
            "rng": {name: _rng_state_to_json(gen) for name, gen in self.rng.items()},
        }
        path = self.checkpoint_dir(self.iteration)
        save_checkpoint(path, arrays, extra)
        return path

    def load_state(self, checkpoint: str | Path) -> None:
        arrays, extra = load_checkpoint(checkpoint)
        for name, net in self._nets().items():
            net.set_params([arrays[f"{name}/{pname}"] for pname in net.param_names()])
        for name in OPTIMIZED:
            state = self.opt[name]
            state.step_count = int(extra["adam_steps"][name])
            for k in range(len(state.m)):
                state.m[k][...] = arrays[f"adam_{name}/m{k}"]
                state.v[k][...] = arrays[f"adam_{name}/v{k}"]
        for i in self.task_ids:
            st = self.stores[i]
            meta = extra["stores"][str(i)]
            st.count = int(meta["count"])
            st.cursor = int(meta["cursor"])
            st.obs[: st.count] = arrays[f"store{i}/obs"]
            st.actions[: st.count] = arrays[f"store{i}/actions"]
            st.rewards[: st.count] = arrays[f"store{i}/rewards"]
        self.replay.size = int(extra["replay"]["size"])
        self.replay.cursor = int(extra["replay"]["cursor"])
        n = self.replay.size
        self.replay.states[:n] = arrays["replay/states"]
        self.replay.actions[:n] = arrays["replay/actions"]
        self.replay.rewards[:n] = arrays["replay/rewards"]
        self.replay.next_states[:n] = arrays["replay/next_states"]
        self.replay.windows[:n] = arrays["replay/windows"]
        self.replay.task_ids[:n] = arrays["replay/task_ids"].astype(np.int64)
        self.sil.size = int(extra["sil"]["size"])
        self.sil.cursor = int(extra["sil"]["cursor"])
        n = self.sil.size
        self.sil.states[:n] = arrays["sil/states"]
        self.sil.actions[:n] = arrays["sil/actions"]
        self.sil.windows[:n] = arrays["sil/windows"]
        self.sil.returns[:n] = arrays["sil/returns"]
        self.sil.task_ids[:n] = arrays["sil/task_ids"].astype(np.int64)
        self.features[...] = arrays["features"]
        for i in self.task_ids:
            rows = arrays[f"rwin/shared{i}"]
            self.windows.shared[i] = [(float(r), int(t)) for r, t in rows]
        for (j, i) in list(self.windows.transferred.keys()):
            rows = arrays[f"rwin/xfer{j}_{i}"]
            self.windows.transferred[(j, i)] = [(float(r), int(t)) for r, t in rows]
        self.iteration = int(extra["iteration"])
        self.global_step = int(extra["global_step"])
        self.task_cursor = int(extra["task_cursor"])
        for name, gen in self.rng.items():
            gen.bit_generator.state = _rng_state_from_json(extra["rng"][name])

    def latest_checkpoint(self) -> Path | None:
        root = self.run_dir / "checkpoints"
        if not root.is_dir():
            return None
        dirs = sorted(d for d in root.iterdir() if d.name.startswith("iter_"))
        return dirs[-1] if dirs else None

    def resume(self) -> bool:
        """Load the latest checkpoint if one exists; trims any metrics lines
        past the checkpoint so the continued file matches an unbroken run."""
        latest = self.latest_checkpoint()
        if latest is None:
            return False
        self.load_state(latest)
        if self.metrics_path.exists():
            kept = []
            for line in self.metrics_path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                obj = json.loads(line)
                if "meta" in obj or obj.get("iteration", 0) <= self.iteration:
                    kept.append(line)
            self.metrics_path.write_text("\n".join(kept) + ("\n" if kept else ""), encoding="utf-8")
        return True


def _rng_state_to_json(gen: np.random.Generator) -> dict:
    state = gen.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {"state": str(state["state"]["state"]), "inc": str(state["state"]["inc"])},
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def _rng_state_from_json(d: dict) -> dict:
    return {
        "bit_generator": d["bit_generator"],
        "state": {"state": int(d["state"]["state"]), "inc": int(d["state"]["inc"])},
        "has_uint32": int(d["has_uint32"]),
        "uinteger": int(d["uinteger"]),
    }


# --- fixed-dataset transfer protocol ---------------------------------------------


@dataclass
class FixedDatasetSettings:
    """Desk-scale settings for the offline transfer protocol."""

    z_dim: int = 8
    history_k: int = 10
    future_m: int = 10
    context_hidden: tuple[int, ...] = (64, 32)
    forward_hidden: tuple[int, ...] = (96, 96)
    translator_hidden: tuple[int, ...] = (64, 64)
    margin: float = 1.0
    cf_steps: int = 3000
    cf_batch: int = 256
    cf_lr: float = 1e-3
    cf_lr_final: float | None = None  # step decay at 70% of the steps
    h_steps: int = 2000
    h_batch: int = 256
    h_lr: float = 1e-3
    h_lr_final: float | None = None
    feature_samples: int = 512
    eval_episodes: int = 100
    contrastive_enabled: bool = True
    reward_augmented: bool = False
    lambda_reward: float = 10.0


@dataclass
class TransferReport:
    source_on_source: EvalStats
    source_on_target: EvalStats
    transferred_on_target: EvalStats


@dataclass
class TrainedTransfer:
    """Models produced by offline context/forward/translator training."""

    encoder: ContextEncoder
    dynamics: GaussianDynamics
    translator: ActionTranslator
    reward_model: RewardPredictor
    features: Array  # [n_tasks, z_dim]


def train_transfer_models(
    datasets: list[EpisodeStore],
    settings: FixedDatasetSettings,
    seed: int,
) -> TrainedTransfer:
    """Offline training of the context encoder and forward model on labeled
    datasets, then the action translator over every ordered task pair."""
    if not datasets:
        raise InputError("need at least one dataset")
    k = datasets[0].history_k
    horizon = datasets[0].horizon
    for d in datasets:
        if d.history_k != k or d.horizon != horizon:
            raise InputError("datasets disagree on history length or horizon")
    width = window_width(STATE_DIM, ACTION_DIM, k)
    init_rng = seeded_rng(seed, _STREAMS["init"])
    train_rng = seeded_rng(seed, _STREAMS["train"])
    feat_rng = seeded_rng(seed, _STREAMS["feature"])
    enc = ContextEncoder(width, settings.z_dim, settings.context_hidden, rng=init_rng)
    dyn = GaussianDynamics(STATE_DIM, ACTION_DIM, settings.z_dim, settings.forward_hidden, rng=init_rng)
    trans = ActionTranslator(STATE_DIM, ACTION_DIM, settings.z_dim, settings.translator_hidden, rng=init_rng)
    rmodel = RewardPredictor(STATE_DIM, ACTION_DIM, settings.z_dim, settings.forward_hidden, rng=init_rng)
    opt_c = adam_init(enc.net.params(), settings.cf_lr)
    opt_f = adam_init(dyn.net.params(), settings.cf_lr)
    opt_h = adam_init(trans.net.params(), settings.h_lr)
    opt_r = adam_init(rmodel.net.params(), settings.cf_lr)

    n_tasks = len(datasets)
    cf_decay_at = int(0.7 * settings.cf_steps)
    for step in range(settings.cf_steps):
        if settings.cf_lr_final is not None and step == cf_decay_at:
            opt_c.learning_rate = settings.cf_lr_final
            opt_f.learning_rate = settings.cf_lr_final
        rows_per = [settings.cf_batch // n_tasks] * n_tasks
        for extra_row in range(settings.cf_batch - sum(rows_per)):
            rows_per[extra_row] += 1
        parts = [
            datasets[i].sample_segments(rows_per[i], settings.future_m, train_rng, i)
            for i in range(n_tasks)
            if rows_per[i] > 0
        ]
        seg = SegmentBatch(
            windows=np.concatenate([p.windows for p in parts]),
            states=np.concatenate([p.states for p in parts]),
            actions=np.concatenate([p.actions for p in parts]),
            task_ids=np.concatenate([p.task_ids for p in parts]),
        )
        res = forward_loss(enc, dyn, seg)
        enc_grads = res.encoder_grads
        if settings.contrastive_enabled and n_tasks > 1:
            pairs = sample_contrastive_pairs(train_rng, seg.batch_size)
            _, dz = contrastive_loss(res.z, seg.task_ids, settings.margin, pairs)
            enc_grads = [a + b for a, b in zip(enc_grads, enc.backward(dz))]
        adam_step(enc.net.params(), enc_grads, opt_c)
        adam_step(dyn.net.params(), res.dynamics_grads, opt_f)

    features = np.zeros((n_tasks, settings.z_dim))
    for i in range(n_tasks):
        wins = datasets[i].sample_windows(settings.feature_samples, feat_rng)
        features[i] = enc.encode(wins).mean(axis=0)

    if settings.reward_augmented:
        for _ in range(settings.cf_steps):
            i = int(train_rng.integers(0, n_tasks))
            batch = datasets[i].sample_transitions(settings.cf_batch, train_rng)
            z = np.broadcast_to(features[i], (settings.cf_batch, settings.z_dim))
            pred = rmodel.predict(batch.states, batch.actions, z)
            err = pred - batch.rewards
            grads, _ = rmodel.backward(2.0 * err / len(err))
            adam_step(rmodel.net.params(), grads, opt_r)

    h_decay_at = int(0.7 * settings.h_steps)
    for step in range(settings.h_steps):
        if settings.h_lr_final is not None and step == h_decay_at:
            opt_h.learning_rate = settings.h_lr_final
        j = int(train_rng.integers(0, n_tasks))
        i = int(train_rng.integers(0, n_tasks))
        batch = datasets[j].sample_transitions(settings.h_batch, train_rng)
        if settings.reward_augmented:
            res = translation_loss_with_reward(
                dyn, rmodel, trans, batch, features[j], features[i], lam=settings.lambda_reward
            )
        else:
            res = translation_loss(dyn, trans, batch, features[j], features[i])
        adam_step(trans.net.params(), res.translator_grads, opt_h)

    return TrainedTransfer(encoder=enc, dynamics=dyn, translator=trans, reward_model=rmodel, features=features)


def translated_policy(trained: TrainedTransfer, source_policy: PolicyFn, source: int, target: int) -> PolicyFn:
    z_src = trained.features[source]
    z_tgt = trained.features[target]

    def policy(obs, window):
        a = np.asarray(source_policy(obs, window), dtype=np.float64)
        return trained.translator.translate(obs[np.newaxis, :], a[np.newaxis, :], z_src, z_tgt)[0]

    return policy


def fixed_dataset_transfer(
    source_env,
    target_env,
    source_data: EpisodeStore,
    target_data: EpisodeStore,
    source_policy: PolicyFn,
    settings: FixedDatasetSettings,
    seed: int,
) -> TransferReport:
    """Offline transfer protocol: train context/forward models on both fixed
    datasets, train the translator, then compare the frozen source policy and
    its translated version on the target task."""
    if source_data.obs.shape[2] != target_data.obs.shape[2]:
        raise InputError("datasets disagree on state dimension")
    trained = train_transfer_models([source_data, target_data], settings, seed)
    eval_rng = seeded_rng(seed, _STREAMS["eval"])
    k = settings.history_k
    on_source = evaluate_policy(source_env, source_policy, settings.eval_episodes, eval_rng, k)
    on_target = evaluate_policy(target_env, source_policy, settings.eval_episodes, eval_rng, k)
    transferred = evaluate_policy(
        target_env, translated_policy(trained, source_policy, 0, 1), settings.eval_episodes, eval_rng, k
    )
    return TransferReport(
        source_on_source=on_source, source_on_target=on_target, transferred_on_target=transferred
    )


def transfer_matrix(
    envs: list,
    source_policies: list[PolicyFn],
    trained: TrainedTransfer,
    episodes: int,
    rng: np.random.Generator,
    history_k: int,
) -> Array:
    """Percentage improvement of the translated source policy over the raw
    source policy for every ordered (source, target) pair; entry (j, i) is
    100 (transferred - source_on_target) / |source_on_target|."""
    n = len(envs)
    matrix = np.zeros((n, n))
    for j in range(n):
        for i in range(n):
            base = evaluate_policy(envs[i], source_policies[j], episodes, rng, history_k).mean
            moved = evaluate_policy(
                envs[i], translated_policy(trained, source_policies[j], j, i), episodes, rng, history_k
            ).mean
            matrix[j, i] = 100.0 * (moved - base) / abs(base)
    return matrix
