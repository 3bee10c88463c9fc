"""Command line entry point: ``cloudalloc <subcommand> [options]``.

Every run writes its results plus one ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 usage or config error, 3 infeasible problem,
4 internal invariant breach.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import best_response
from .auction import EnvironmentConfig, constant_policy, run_episode, zero_policy
from .monte_carlo import estimate
from .private_alloc import InfeasibleError, allocate, rate_bound
from .rl_core import PolicyCheckpoint, TrainConfig, evaluate, train
from .special_fn import OuParams, RngStream
from .task_model import Config, ConfigError, TaskSpec, ValidationError, load_config, task_violations

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_INVARIANT = 0, 2, 3, 4

ZERO_BID_TOTAL = 0.05


class InvariantError(AssertionError):
    pass


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_json(path: Path, data):
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# environment and training setup from a config file


def build_env(config: Config, task_index: int) -> EnvironmentConfig:
    sect = dict(config.auction)
    unknown = sorted(set(sect) - {"p_minus", "bid_cap"})
    if unknown:
        raise ConfigError(f"auction: unknown key(s) {', '.join(unknown)}")
    if "p_minus" not in sect:
        raise ConfigError("auction.p_minus is required for auction subcommands")
    raw = sect["p_minus"]
    if isinstance(raw, dict):
        extra = sorted(set(raw) - {"mu", "theta", "sigma"})
        if extra:
            raise ConfigError(f"auction.p_minus: unknown key(s) {', '.join(extra)}")
        try:
            p_minus = OuParams(float(raw["mu"]), float(raw["theta"]), float(raw["sigma"]), config.cloud.step)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"auction.p_minus: {exc}") from None
    elif isinstance(raw, (int, float)) and not isinstance(raw, bool):
        p_minus = float(raw)
    else:
        raise ConfigError("auction.p_minus must be a number or an object with mu, theta, sigma")
    try:
        return EnvironmentConfig(
            p_minus=p_minus,
            delay=config.delays[task_index],
            gamma=config.cloud.total_rate,
            t_s=config.cloud.step,
            bid_cap=float(sect.get("bid_cap", 1.5)),
        )
    except ValueError as exc:
        raise ConfigError(f"auction: {exc}") from None


def build_train_config(config: Config, env: EnvironmentConfig, episodes: int | None = None) -> TrainConfig:
    data = dict(config.train)
    data.setdefault("bid_cap", env.bid_cap)
    if episodes is not None:
        data["episodes"] = episodes
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None


def nominal_p_minus(env: EnvironmentConfig) -> float:
    return env.p_minus.mu if isinstance(env.p_minus, OuParams) else float(env.p_minus)


def _task_index(config: Config, number: int) -> int:
    if not 1 <= number <= len(config.tasks):
        raise ConfigError(f"--task must be in 1..{len(config.tasks)}")
    return number - 1


# subcommands


def cmd_alloc(args, config: Config, out: Path):
    res = allocate(config.tasks, config.delays, config.cloud.total_rate, method=args.method)
    bounds = [rate_bound(t, d) for t, d in zip(config.tasks, config.delays)]
    if abs(res.rates.sum() - config.cloud.total_rate) > 1e-9 * config.cloud.total_rate:
        raise InvariantError("allocation does not use the full capacity")
    if res.kkt_residual > 1e-8:
        raise InvariantError(f"KKT residual {res.kkt_residual:g} above 1e-8")
    rows = [
        (i + 1, rb.rho, g, bool(a), rb.alpha_star_paper, rb.alpha_star_corrected)
        for i, (rb, g, a) in enumerate(zip(bounds, res.rates, res.active))
    ]
    write_csv(out / "alloc.csv", ["task_id", "rho", "gamma", "active", "alpha_star_paper", "alpha_star_corrected"], rows)
    write_json(
        out / "alloc.json",
        {
            "rates": res.rates,
            "active": res.active,
            "rho": res.rho,
            "objective": res.objective,
            "kkt_residual": res.kkt_residual,
            "multiplier": res.multiplier,
            "method": args.method,
        },
    )
    for row in rows:
        print(f"task {row[0]}: rho={row[1]:.4f} gamma={row[2]:.4f} active={row[3]}")
    return EXIT_OK


def cmd_verify(args, config: Config, out: Path):
    if args.rates is not None:
        rates = np.array(args.rates)
        if len(rates) != len(config.tasks):
            raise ConfigError(f"--rates has {len(rates)} values for {len(config.tasks)} tasks")
    else:
        rates = allocate(config.tasks, config.delays, config.cloud.total_rate).rates
    rep = estimate(config.tasks, config.delays, rates, args.samples, args.seed)
    rows = [
        (i + 1, rep.miss_rate[i], rep.stderr[i], rep.alpha[i], bool(rep.passed[i]))
        for i in range(len(config.tasks))
    ]
    write_csv(out / "verify.csv", ["task_id", "miss_rate", "stderr", "alpha", "pass"], rows)
    write_json(
        out / "verify.json",
        {
            "rates": rates,
            "samples": rep.samples,
            "miss_rate": rep.miss_rate,
            "stderr": rep.stderr,
            "alpha": [None if np.isnan(a) else a for a in rep.alpha],
            "mean_cost": [None if np.isnan(c) else c for c in rep.mean_cost],
        },
    )
    for row in rows:
        print(f"task {row[0]}: miss={row[1]:.6g} +/- {row[2]:.2g} (limit {row[3]}) pass={row[4]}")
    return EXIT_OK


def cmd_bestresp(args, config: Config, out: Path):
    rows = []
    for i, task in enumerate(config.tasks):
        env = build_env(config, i)
        p_minus = args.p_minus if args.p_minus is not None else nominal_p_minus(env)
        tau = args.tau if args.tau is not None else config.delays[i].mean
        br = best_response.solve(task, p_minus, tau, env.gamma)
        disc = best_response.solve_discrete(task, p_minus, tau, env.gamma, env.t_s, env.bid_cap)
        rows.append((i + 1, p_minus, tau, br.p_star, br.cost, br.regime, disc.total_bid, disc.steps, disc.cost, disc.regime))
        if args.curve_points > 0:
            curve = best_response.cost_curve(task, p_minus, tau, env.gamma, points=args.curve_points)
            write_csv(out / f"curve_task{i + 1}.csv", ["p", "cost"], curve)
        print(f"task {i + 1}: p*={br.p_star:.4f} cost={br.cost:.4f} ({br.regime})")
    write_csv(
        out / "bestresp.csv",
        ["task_id", "p_minus", "tau", "p_star", "cost", "regime",
         "discrete_total_bid", "discrete_steps", "discrete_cost", "discrete_regime"],
        rows,
    )
    return EXIT_OK


def _policy(args, config: Config, index: int, env: EnvironmentConfig):
    if args.checkpoint:
        return PolicyCheckpoint.load(args.checkpoint).policy()
    kind = args.policy
    if kind == "zero":
        return zero_policy
    if kind.startswith("const:"):
        bid = float(kind.split(":", 1)[1])
        if not 0 <= bid <= env.bid_cap:
            raise ConfigError(f"constant bid must be in [0, {env.bid_cap}]")
        return constant_policy(bid)
    if kind == "bestresp":
        task = config.tasks[index]
        br = best_response.solve(task, nominal_p_minus(env), config.delays[index].mean, env.gamma)
        return constant_policy(min(br.p_star * env.t_s, env.bid_cap))
    raise ConfigError(f"unknown policy {kind!r} (zero, const:X, bestresp)")


def cmd_simulate(args, config: Config, out: Path):
    index = _task_index(config, args.task)
    env = build_env(config, index)
    policy = _policy(args, config, index, env)
    rng = RngStream(args.seed).child("simulate", index)
    rows, summary = [], []
    for k in range(args.episodes):
        ep = run_episode(policy, env, config.tasks[index], rng.child(k))
        check_episode(ep, config.tasks[index], env)
        for r in ep.trajectory:
            rows.append((k, r.step, r.bid, r.p_minus, r.share, r.w, r.d, r.reward, r.status))
        summary.append((k, ep.total_reward, ep.total_bid, ep.status, ep.delay_steps, ep.completion_time, ep.elapsed_time))
    write_csv(out / "trajectory.csv", ["episode", "step", "bid", "p_minus", "share", "w", "d", "reward", "status"], rows)
    write_csv(
        out / "episodes.csv",
        ["episode", "total_reward", "total_bid", "status", "delay_steps", "completion_time", "elapsed_time"],
        summary,
    )
    rewards = [s[1] for s in summary]
    print(f"{len(summary)} episode(s): mean reward {np.mean(rewards):.4f}")
    return EXIT_OK


def check_episode(ep, task: TaskSpec, env: EnvironmentConfig):
    if any(not 0 <= r.bid <= env.bid_cap for r in ep.trajectory):
        raise InvariantError("executed bid outside [0, bid_cap]")
    tail = task.qos_slope * ep.completion_time if ep.status == "completed" else (task.penalty or 0.0)
    if abs(ep.total_reward + ep.total_bid + tail) > 1e-9:
        raise InvariantError("episode reward does not decompose into bids plus terminal cost")


def cmd_train(args, config: Config, out: Path):
    index = _task_index(config, args.task)
    env = build_env(config, index)
    cfg = build_train_config(config, env, args.episodes)
    ck, curve = train(config.tasks[index], env, cfg, args.seed)
    ck.meta["task"] = dataclasses.asdict(config.tasks[index])
    ck.save(out / "checkpoint.json")
    write_csv(out / "curve.csv", ["episode", "test_mean", "test_std"], [(p.episode, p.test_mean, p.test_std) for p in curve])
    print(f"best episode {ck.episode}: test mean {ck.meta.get('test_mean', float('nan')):.4f}")
    return EXIT_OK


def evaluation_summary(ck: PolicyCheckpoint, task: TaskSpec, env: EnvironmentConfig, episodes: int, seed: int):
    runs = evaluate(ck.policy(), task, env, episodes, RngStream(seed).child("evaluate"))
    for ep in runs:
        check_episode(ep, task, env)
    return runs


def cmd_evaluate(args, config: Config, out: Path):
    index = _task_index(config, args.task)
    env = build_env(config, index)
    ck = PolicyCheckpoint.load(args.checkpoint)
    runs = evaluation_summary(ck, config.tasks[index], env, args.episodes, args.seed)
    rows = [(k, e.total_reward, e.total_bid, e.status, e.completion_time, e.elapsed_time) for k, e in enumerate(runs)]
    write_csv(out / "evaluate.csv", ["episode", "total_reward", "total_bid", "status", "completion_time", "elapsed_time"], rows)
    rewards = np.array([e.total_reward for e in runs])
    write_json(
        out / "evaluate.json",
        {
            "episodes": len(runs),
            "test_mean": float(rewards.mean()),
            "test_std": float(rewards.std()),
            "mean_total_bid": float(np.mean([e.total_bid for e in runs])),
        },
    )
    print(f"mean reward {rewards.mean():.4f} +/- {rewards.std():.4f}")
    return EXIT_OK


def sweep_point(
    config: Config,
    index: int,
    axis: str,
    value: float,
    seed: int,
    episodes: int | None = None,
    base_penalty: float | None = None,
    eval_episodes: int = 20,
):
    """Train one sweep point and classify the best checkpoint's regime.

    ``base_penalty`` overrides the task penalty on the workload and deadline
    axes.
    """
    base = config.tasks[index]
    if base_penalty is not None and axis != "penalty":
        base = dataclasses.replace(base, penalty=base_penalty)
    if axis == "penalty":
        task = dataclasses.replace(base, penalty=value)
    elif axis == "workload":
        task = dataclasses.replace(base, workload=value)
    elif axis == "deadline":
        task = dataclasses.replace(base, deadline=value, period=max(base.period, value))
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")
    errors = task_violations(task, f"sweep {axis}={value:g}")
    if errors:
        raise ValidationError(errors)
    env = build_env(config, index)
    cfg = build_train_config(config, env, episodes)
    ck, _ = train(task, env, cfg, seed)
    runs = evaluation_summary(ck, task, env, eval_episodes, seed)
    total_bid = float(np.mean([e.total_bid for e in runs]))
    reward = float(np.mean([e.total_reward for e in runs]))
    completed = float(np.mean([e.status == "completed" for e in runs]))
    oracle = best_response.solve_discrete(
        task, nominal_p_minus(env), config.delays[index].mean, env.gamma, env.t_s, env.bid_cap
    )
    return {
        "axis": axis,
        "value": value,
        "seed": seed,
        "best_episode": ck.episode,
        "test_reward": reward,
        "total_bid": total_bid,
        "completion_rate": completed,
        "regime": "zero_bid" if total_bid < ZERO_BID_TOTAL else "bidding",
        "oracle_regime": oracle.regime,
        "oracle_total_bid": oracle.total_bid,
        "oracle_cost": oracle.cost,
    }


SWEEP_COLUMNS = [
    "axis", "value", "seed", "best_episode", "test_reward", "total_bid",
    "completion_rate", "regime", "oracle_regime", "oracle_total_bid", "oracle_cost",
]


def cmd_sweep(args, config: Config, out: Path):
    index = _task_index(config, args.task)
    axes = [("penalty", args.penalty), ("workload", args.workload), ("deadline", args.deadline)]
    axes = [(a, v) for a, v in axes if v]
    if not axes:
        raise ConfigError("sweep needs at least one of --penalty, --workload, --deadline")
    rows = []
    for axis, values in axes:
        for value in values:
            for rep in range(args.replicates):
                row = sweep_point(config, index, axis, value, args.seed + rep, args.episodes, args.base_penalty)
                rows.append(row)
                print(f"{axis}={value:g} seed={row['seed']}: total bid {row['total_bid']:.3f} ({row['regime']})", flush=True)
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, [[r[c] for c in SWEEP_COLUMNS] for r in rows])
    return EXIT_OK


COMMANDS = {
    "alloc": cmd_alloc,
    "verify": cmd_verify,
    "bestresp": cmd_bestresp,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloudalloc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output directory (default: runs/<subcommand>)")
        return p

    p = add("alloc", "chance-constrained private-cloud allocation")
    p.add_argument("--method", choices=["active_set", "projected_gradient"], default="active_set")

    p = add("verify", "Monte Carlo deadline-miss verification")
    p.add_argument("--samples", type=int, default=10**6)
    p.add_argument("--rates", type=_floats, default=None, help="comma-separated rates (default: alloc result)")

    p = add("bestresp", "closed-form best response under constant p_minus and delay")
    p.add_argument("--p-minus", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--curve-points", type=int, default=0, help="write (p, J(p)) curves with this many points")

    p = add("simulate", "roll out a bidding policy in the auction environment")
    p.add_argument("--task", type=int, default=1)
    p.add_argument("--policy", default="zero", help="zero, const:BID or bestresp")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--episodes", type=int, default=1)

    p = add("train", "train a DDPG bidding policy")
    p.add_argument("--task", type=int, default=1)
    p.add_argument("--episodes", type=int, default=None)

    p = add("evaluate", "noise-free test episodes for a checkpoint")
    p.add_argument("--task", type=int, default=1)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=20)

    p = add("sweep", "sensitivity sweeps over penalty, workload and deadline")
    p.add_argument("--task", type=int, default=2)
    p.add_argument("--penalty", type=_floats, default=None)
    p.add_argument("--workload", type=_floats, default=None)
    p.add_argument("--deadline", type=_floats, default=None)
    p.add_argument("--base-penalty", type=float, default=None, help="penalty used on the workload and deadline axes")
    p.add_argument("--replicates", type=int, default=1, help="seeds per point: seed, seed+1, ...")
    p.add_argument("--episodes", type=int, default=None)
    return parser


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    started = time.time()
    try:
        config = load_config(args.config)
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or Path("runs") / args.command)
    out.mkdir(parents=True, exist_ok=True)
    try:
        code = COMMANDS[args.command](args, config, out)
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except AssertionError as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    manifest = {
        "subcommand": args.command,
        "argv": argv,
        "config": str(args.config),
        "config_sha256": _sha256(Path(args.config)),
        "seed": args.seed,
        "out": str(out),
        "version": __version__,
        "wall_clock": {
            "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "seconds": round(time.time() - started, 3),
        },
    }
    write_json(out / "manifest.json", manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
