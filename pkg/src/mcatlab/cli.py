"""Command-line surface: verify-bounds, train, transfer-eval, plot.

Exit codes: 0 success, 1 usage error, 2 runtime/numeric failure,
3 bound violation (verify-bounds only).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tabular
from .config import ExperimentConfig, config_hash, load_config
from .errors import ConfigError, NumericError, StateError
from .mcat import (
    McatTrainer,
    TrainedTransfer,
    evaluate_policy,
    translated_policy,
)
from .models import ActionTranslator, ContextEncoder, GaussianDynamics, RewardPredictor, window_width
from .numkit import load_checkpoint, seeded_rng
from .rl import ActorCritic
from .envs import ACTION_DIM, STATE_DIM

USAGE_ERROR = 1
RUNTIME_ERROR = 2
BOUND_VIOLATION = 3

# rng streams for verify-bounds instances; pair generation stream lives in tabular
_POLICY_J_STREAM = 103
_BIJECTION_STREAM = 104


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def cmd_verify_bounds(args) -> int:
    modes = ("thm1", "prop1", "prop2")
    if args.mode not in modes:
        raise ConfigError(f"--mode must be one of {modes}")
    perturbations = [float(p) for p in args.perturbations.split(",") if p.strip() != ""]
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    reward_form = "sas" if args.mode == "thm1" else "ss"
    rows = []
    n_violations = 0
    for w in perturbations:
        for k in range(args.seeds):
            instance_seed = args.seed + k
            mdp_i, twin = tabular.random_mdp_pair(
                instance_seed, args.states, args.actions, w, gamma=args.gamma, reward_form=reward_form
            )
            # source policy is random; the verified target policy is its
            # brute-force translation (zero perturbation gives exact
            # equivalence, hence d == 0 and zero gap)
            pi_j = tabular.random_policy(seeded_rng(instance_seed, _POLICY_J_STREAM), args.states, args.actions)
            if args.mode == "thm1":
                pi_i = tabular.brute_force_translate_policy(mdp_i, twin, pi_j)
                report = tabular.theorem1_d(mdp_i, twin, pi_i, pi_j)
            elif args.mode == "prop1":
                pi_i = tabular.brute_force_translate_policy(mdp_i, twin, pi_j)
                report = tabular.prop1_d(mdp_i, twin, pi_i, pi_j)
            else:
                if args.identity_bijection:
                    g = tabular.StateBijection.identity(args.states)
                else:
                    g = tabular.StateBijection(seeded_rng(instance_seed, _BIJECTION_STREAM).permutation(args.states))
                mdp_j = tabular.relabel_states(twin, g)
                pi_i = tabular.translate_policy_under_bijection(mdp_i, mdp_j, pi_j, g)
                report = tabular.prop2_verify(mdp_i, mdp_j, pi_i, pi_j, g)
            rows.append((instance_seed, w, report))
            if not report.satisfied:
                n_violations += 1
    out_path = Path(args.out) if args.out else Path(f"verify_bounds_{args.mode}.csv")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("instance,perturbation,d,M,bound,max_observed_gap,satisfied\n")
        for instance_seed, w, rep in rows:
            fh.write(
                f"{instance_seed},{_fmt(w)},{_fmt(rep.d)},{_fmt(rep.M)},{_fmt(rep.bound)},"
                f"{_fmt(rep.max_observed_gap)},{_fmt(rep.satisfied)}\n"
            )
    total = len(rows)
    print(f"verify-bounds mode={args.mode}: {total - n_violations}/{total} satisfied -> {out_path}")
    return BOUND_VIOLATION if n_violations else 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out) if args.out else Path(cfg.experiment.out_dir)
    seeds = [args.seed] if args.seed is not None else list(cfg.experiment.seeds)
    for seed in seeds:
        trainer = McatTrainer(cfg, seed, out_dir)
        if args.resume:
            resumed = trainer.resume()
            if resumed:
                print(f"seed {seed}: resumed at iteration {trainer.iteration}", file=sys.stderr)
        trainer.run(log=lambda msg: print(msg, file=sys.stderr) if args.verbose else None)
        print(f"seed {seed}: metrics at {trainer.metrics_path}")
    return 0


def load_models_for_eval(cfg: ExperimentConfig, checkpoint: Path) -> tuple[TrainedTransfer, ActorCritic]:
    """Rebuild model objects from config shapes and checkpoint parameters."""
    if not (checkpoint / "manifest.json").exists():
        raise StateError(f"no checkpoint at {checkpoint}")
    arrays, extra = load_checkpoint(checkpoint)
    m = cfg.models
    width = window_width(STATE_DIM, ACTION_DIM, m.history_k)
    rng = seeded_rng(0)
    enc = ContextEncoder(width, m.z_dim, m.context_hidden, rng=rng)
    dyn = GaussianDynamics(STATE_DIM, ACTION_DIM, m.z_dim, m.forward_hidden, rng=rng)
    trans = ActionTranslator(STATE_DIM, ACTION_DIM, m.z_dim, m.translator_hidden, rng=rng)
    rmodel = RewardPredictor(STATE_DIM, ACTION_DIM, m.z_dim, m.reward_hidden, rng=rng)
    ac = ActorCritic(STATE_DIM, ACTION_DIM, m.z_dim, cfg.td3.actor_hidden, cfg.td3.critic_hidden, rng=rng)
    table = {
        "context": enc.net,
        "forward": dyn.net,
        "translator": trans.net,
        "reward": rmodel.net,
        "actor": ac.actor,
        "critic1": ac.q1,
        "critic2": ac.q2,
        "actor_target": ac.actor_target,
        "critic1_target": ac.q1_target,
        "critic2_target": ac.q2_target,
    }
    for name, net in table.items():
        net.set_params([arrays[f"{name}/{p}"] for p in net.param_names()])
    features = arrays["features"]
    return TrainedTransfer(encoder=enc, dynamics=dyn, translator=trans, reward_model=rmodel, features=features), ac


def cmd_transfer_eval(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out) if args.out else Path(cfg.experiment.out_dir)
    seed = args.seed if args.seed is not None else cfg.experiment.seeds[0]
    if args.checkpoint:
        checkpoint = Path(args.checkpoint)
    else:
        root = out_dir / f"seed{seed}" / "checkpoints"
        if not root.is_dir():
            raise StateError(f"no checkpoints under {root}")
        dirs = sorted(d for d in root.iterdir() if d.name.startswith("iter_"))
        if not dirs:
            raise StateError(f"no checkpoints under {root}")
        checkpoint = dirs[-1]
    trained, ac = load_models_for_eval(cfg, checkpoint)
    task_set = cfg.task_set()
    envs = task_set.train_envs()
    n = len(envs)
    eval_rng = seeded_rng(seed, 901)
    k = cfg.models.history_k

    def source_policy(j):
        z = trained.features[j]

        def policy(obs, window):
            return ac.act(obs[np.newaxis, :], z[np.newaxis, :])[0]

        return policy

    if args.matrix:
        pairs = [(j, i) for j in range(n) for i in range(n)]
    else:
        if args.source is None or args.target is None:
            raise ConfigError("provide --source and --target, or --matrix")
        if not (0 <= args.source < n and 0 <= args.target < n):
            raise ConfigError(f"--source/--target must index the {n} training tasks")
        pairs = [(args.source, args.target)]

    out_path = out_dir / ("transfer_matrix.csv" if args.matrix else f"transfer_{pairs[0][0]}_to_{pairs[0][1]}.csv")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(
            "source,target,source_mean,source_stderr,transferred_mean,transferred_stderr,improvement_pct\n"
        )
        for j, i in pairs:
            base = evaluate_policy(envs[i], source_policy(j), args.episodes, eval_rng, k)
            moved = evaluate_policy(
                envs[i], translated_policy(trained, source_policy(j), j, i), args.episodes, eval_rng, k
            )
            improvement = 100.0 * (moved.mean - base.mean) / abs(base.mean) if base.mean != 0 else 0.0
            fh.write(
                f"{j},{i},{_fmt(base.mean)},{_fmt(base.stderr)},{_fmt(moved.mean)},"
                f"{_fmt(moved.stderr)},{_fmt(improvement)}\n"
            )
    print(f"transfer-eval report -> {out_path}")
    return 0


def cmd_plot(args) -> int:
    keys = [k.strip() for k in args.keys.split(",") if k.strip()]
    if not keys:
        raise ConfigError("--keys must name at least one metric")
    files = [Path(f) for f in args.metrics]
    if not files:
        raise ConfigError("need at least one metrics file")
    per_file: list[dict] = []
    hashes = set()
    available: set[str] = set()
    for path in files:
        records = {}
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            if "meta" in obj:
                hashes.add(obj["meta"].get("config_hash"))
                continue
            records[int(obj["global_step"])] = obj
            available.update(obj.keys())
        per_file.append(records)
    if len(hashes) > 1:
        raise ConfigError(f"metrics files span {len(hashes)} config hashes; aggregate one experiment at a time")
    for key in keys:
        if not any(key in rec for records in per_file for rec in records.values()):
            raise ConfigError(f"key {key!r} not present; available keys: {sorted(available)}")
    out_dir = Path(args.out) if args.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    for key in keys:
        steps = None
        for records in per_file:
            have = {s for s, rec in records.items() if key in rec}
            steps = have if steps is None else (steps & have)
        steps = sorted(steps or [])
        path = out_dir / (key.replace("/", "_") + ".csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,mean,stderr\n")
            for s in steps:
                vals = np.array([records[s][key] for records in per_file])
                stderr = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
                fh.write(f"{s},{_fmt(float(vals.mean()))},{_fmt(stderr)}\n")
        print(f"plot series for {key} -> {path}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="mcatlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    vb = sub.add_parser("verify-bounds", help="numerically verify the value-difference bounds")
    vb.add_argument("--mode", required=True, choices=("thm1", "prop1", "prop2"))
    vb.add_argument("--seeds", type=int, default=100, help="instances per perturbation")
    vb.add_argument("--states", type=int, default=10)
    vb.add_argument("--actions", type=int, default=5)
    vb.add_argument("--perturbations", default="0,0.1,0.5,1.0")
    vb.add_argument("--gamma", type=float, default=0.95)
    vb.add_argument("--identity-bijection", action="store_true")
    vb.add_argument("--seed", type=int, default=0)
    vb.add_argument("--out", default=None, help="CSV report path")
    vb.set_defaults(func=cmd_verify_bounds)

    tr = sub.add_parser("train", help="run the training loop")
    tr.add_argument("--config", required=True)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--out", default=None)
    tr.add_argument("--resume", action="store_true")
    tr.add_argument("--verbose", action="store_true")
    tr.set_defaults(func=cmd_train)

    te = sub.add_parser("transfer-eval", help="evaluate transferred vs source policies")
    te.add_argument("--config", required=True)
    te.add_argument("--seed", type=int, default=None)
    te.add_argument("--out", default=None)
    te.add_argument("--checkpoint", default=None)
    te.add_argument("--source", type=int, default=None)
    te.add_argument("--target", type=int, default=None)
    te.add_argument("--matrix", action="store_true")
    te.add_argument("--episodes", type=int, default=20)
    te.set_defaults(func=cmd_transfer_eval)

    pl = sub.add_parser("plot", help="export per-key CSV series from metrics files")
    pl.add_argument("metrics", nargs="+")
    pl.add_argument("--keys", required=True)
    pl.add_argument("--out", default=None)
    pl.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (NumericError, StateError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
