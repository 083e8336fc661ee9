"""Experiment configuration: a flat-sectioned UTF-8 key=value format with a
typed schema. Unknown sections or keys are rejected, every field has a
documented default, and load -> serialize -> load round-trips exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .envs import FAMILIES, PointMassParams, TaskSet, make_task_set
from .errors import ConfigError


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "default"
    seeds: tuple[int, ...] = (0,)
    iterations: int = 50
    eval_episodes: int = 4
    eval_every: int = 1
    checkpoint_every: int = 10
    out_dir: str = "runs/default"


@dataclass(frozen=True)
class EnvSection:
    family: str = "mass"
    horizon: int = 200
    delay_steps: int = 50
    control_cost: float = 0.0
    drag: float = 0.25
    dt: float = 0.05
    base_mass: float = 1.0
    train_values: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0, 2.5)
    test_values: tuple[float, ...] = (0.3, 2.8)


@dataclass(frozen=True)
class ModelSection:
    context_hidden: tuple[int, ...] = (128, 64, 32)
    z_dim: int = 8
    history_k: int = 10
    future_m: int = 10
    forward_hidden: tuple[int, ...] = (128, 128)
    translator_hidden: tuple[int, ...] = (128, 128)
    reward_hidden: tuple[int, ...] = (128, 128)
    margin: float = 1.0
    cf_lr: float = 5e-4
    h_lr: float = 3e-4
    cf_batch: int = 256
    h_batch: int = 256
    feature_samples: int = 256
    lambda_reward: float = 10.0


@dataclass(frozen=True)
class Td3Section:
    batch_size: int = 256
    gamma: float = 0.99
    tau: float = 5e-3
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_freq: int = 2
    explore_noise: float = 0.1
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    actor_hidden: tuple[int, ...] = (128, 128)
    critic_hidden: tuple[int, ...] = (128, 128)
    replay_capacity: int = 100000
    sil_capacity: int = 50000
    start_steps: int = 1000


@dataclass(frozen=True)
class ScheduleSection:
    samples_per_iter: int = 1000
    cf_steps: int = 2000
    h_steps: int = 200
    rl_steps: int = 1000
    reward_window: int = 4000


@dataclass(frozen=True)
class AblationSection:
    pt_enabled: bool = True
    sil_enabled: bool = True
    contrastive_enabled: bool = True
    reward_augmented_trans: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    env: EnvSection = field(default_factory=EnvSection)
    models: ModelSection = field(default_factory=ModelSection)
    td3: Td3Section = field(default_factory=Td3Section)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    ablations: AblationSection = field(default_factory=AblationSection)

    def task_set(self) -> TaskSet:
        e = self.env
        base = PointMassParams(mass=e.base_mass, drag=e.drag, dt=e.dt)
        return make_task_set(
            e.family,
            e.train_values,
            e.test_values,
            horizon=e.horizon,
            delay_steps=e.delay_steps,
            control_cost=e.control_cost,
            base=base,
        )


_SECTIONS = {
    "experiment": ExperimentSection,
    "env": EnvSection,
    "models": ModelSection,
    "td3": Td3Section,
    "schedule": ScheduleSection,
    "ablations": AblationSection,
}


def _parse_value(raw: str, proto) -> object:
    raw = raw.strip()
    try:
        if isinstance(proto, bool):
            low = raw.lower()
            if low in ("true", "false"):
                return low == "true"
            raise ConfigError(f"expected true/false, got {raw!r}")
        if isinstance(proto, int):
            return int(raw)
        if isinstance(proto, float):
            return float(raw)
        if isinstance(proto, str):
            return raw
        if isinstance(proto, tuple):
            if raw == "":
                return ()
            elem = proto[0] if len(proto) else 0.0
            items = [part.strip() for part in raw.split(",")]
            if isinstance(elem, int) and not isinstance(elem, bool):
                return tuple(int(x) for x in items)
            return tuple(float(x) for x in items)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"cannot parse value {raw!r}: {exc}") from exc
    raise ConfigError(f"unsupported field prototype {proto!r}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> ExperimentConfig:
    """Parse the sectioned key=value format; unknown keys are errors."""
    sections: dict[str, dict[str, str]] = {}
    current: str | None = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#") or stripped.startswith(";"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            if current not in _SECTIONS:
                raise ConfigError(f"unknown section [{current}] (line {lineno})")
            sections.setdefault(current, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected key = value (line {lineno}): {stripped!r}")
        if current is None:
            raise ConfigError(f"key outside any section (line {lineno})")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in sections[current]:
            raise ConfigError(f"duplicate key {key!r} in section [{current}]")
        sections[current][key] = value

    built = {}
    for section_name, cls in _SECTIONS.items():
        proto = cls()
        known = {f.name: getattr(proto, f.name) for f in fields(cls)}
        raw = sections.get(section_name, {})
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section_name}]: {sorted(unknown)}")
        values = {k: _parse_value(v, known[k]) for k, v in raw.items()}
        built[section_name] = cls(**values)
    cfg = ExperimentConfig(**built)
    validate_config(cfg)
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section_name, cls in _SECTIONS.items():
        lines.append(f"[{section_name}]")
        section = getattr(cfg, section_name)
        for f in fields(cls):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(serialize_config(cfg), encoding="utf-8")


def validate_config(cfg: ExperimentConfig) -> None:
    e = cfg.env
    if e.family not in FAMILIES:
        raise ConfigError(f"env.family must be one of {FAMILIES}, got {e.family!r}")
    if e.horizon < 1 or e.delay_steps < 1:
        raise ConfigError("horizon and delay_steps must be >= 1")
    if set(e.train_values) & set(e.test_values):
        raise ConfigError("env.train_values and env.test_values must be disjoint")
    if not (0.0 <= cfg.td3.gamma < 1.0):
        raise ConfigError("td3.gamma must lie in [0, 1)")
    s = cfg.schedule
    if min(s.samples_per_iter, s.cf_steps, s.h_steps, s.rl_steps, s.reward_window) < 1:
        raise ConfigError("schedule values must be positive")
    if cfg.experiment.iterations < 1 or not cfg.experiment.seeds:
        raise ConfigError("experiment.iterations must be >= 1 and seeds non-empty")
    m = cfg.models
    if min(m.z_dim, m.history_k, m.future_m, m.cf_batch, m.h_batch, m.feature_samples) < 1:
        raise ConfigError("model dimensions and batch sizes must be positive")
    if cfg.env.horizon <= m.future_m:
        raise ConfigError("horizon must exceed models.future_m")


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of the config with run-identity and run-length fields (seeds,
    out_dir, iterations, checkpoint cadence) removed: metrics records produced
    at shared steps are identical whenever the hashes agree, so runs group
    together across seeds and run lengths."""
    neutral = ExperimentConfig(
        experiment=ExperimentSection(
            name=cfg.experiment.name,
            seeds=(0,),
            iterations=1,
            eval_episodes=cfg.experiment.eval_episodes,
            eval_every=cfg.experiment.eval_every,
            checkpoint_every=1,
            out_dir="",
        ),
        env=cfg.env,
        models=cfg.models,
        td3=cfg.td3,
        schedule=cfg.schedule,
        ablations=cfg.ablations,
    )
    return hashlib.sha256(serialize_config(neutral).encode("utf-8")).hexdigest()[:16]
