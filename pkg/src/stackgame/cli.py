"""Command line entry point.

    stackgame minmax [PROBLEM] [--config PATH] [--seed N] [--out DIR] [--force]
    stackgame train  [--algo NAME] [--outer N] [--game NAME] [--resume STATE] ...
    stackgame eval   {tournament|pursuit|bellman|verify} ...

Every run writes into one directory: ``config.resolved`` (the full
configuration, readable back with ``--config``), ``metrics.csv`` where there
is a training log, and ``checkpoints/``, ``tables/`` and ``figures/`` as the
command needs them.  Exit status: 0 on success, 1 when a run diverges or a
checkpoint cannot be read, 2 for usage and configuration errors.
"""
from __future__ import annotations

import argparse
import json
import shutil
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import config as rc
from .algos import (ALGORITHMS, TrainingAborted, TrainState, load_state, save_state, train,
                    write_records)
from .errors import ArgumentError, CheckpointError, ConfigError, DivergenceError
from .eval import (PURSUIT, PURSUIT_STREAM, bellman_error, brute_force_commitment, format_table, match_states,
                   play_matches, stackelberg_verify_lp, tournament, write_table_csv)
from .games import OneStepBenchmark, two_arm_bandit
from .mdpgame import PolicyParams, load_policy, sample_trajectory, save_policy
from .minmax import init_rng, nested_sgda, problem_from_name, se_residual
from .reachavoid import ReachAvoidGame, trajectory_svg, write_trajectory_csv

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
OWNED = ("config.resolved", "metrics.csv", "solution.json", "checkpoints", "tables", "figures")
GAMES = ("reachavoid", "one-step", "two-arm-bandit")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument parsing


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="seed for every section")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--force", action="store_true", help="reuse a non-empty output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. train.batch_size=8")

    p = argparse.ArgumentParser(prog="stackgame", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("minmax", parents=[common], help="nested SGDA on a registered problem")
    m.add_argument("problem", nargs="?", default="quadratic",
                   help="quadratic or quadratic-noisy:SIGMA (default: quadratic)")

    t = sub.add_parser("train", parents=[common], help="train a leader/follower pair")
    t.add_argument("--algo", help=f"one of {', '.join(a.replace('_', '-') for a in ALGORITHMS)}")
    t.add_argument("--outer", type=int, help="outer iterations")
    t.add_argument("--game", default="reachavoid", help=f"one of {', '.join(GAMES)}")
    t.add_argument("--resume", help="training state file to continue from")

    e = sub.add_parser("eval", parents=[common], help="evaluate policies")
    e.add_argument("kind", choices=("tournament", "pursuit", "bellman", "verify"))
    e.add_argument("--attacker", action="append", default=[], metavar="[NAME=]PATH",
                   help="attacker checkpoint (repeat for tournaments)")
    e.add_argument("--defender", action="append", default=[], metavar="[NAME=]PATH",
                   help="defender checkpoint or 'pursuit' (repeatable)")
    e.add_argument("--leader", help="leader checkpoint for the Bellman error")
    e.add_argument("--follower", help="follower checkpoint for the Bellman error")
    e.add_argument("--variant", choices=("nash", "stackelberg"))
    e.add_argument("--payoff", help="CSV payoff matrix for verify")
    e.add_argument("--matches", type=int, help="matches per pair and seed")
    e.add_argument("--seeds", type=int, help="tournament seeds")
    e.add_argument("--episodes", type=int, help="episodes against the pursuer")
    e.add_argument("--render", type=int, help="SVG renders per pairing")
    return p


def _named(items):
    out = []
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = (PURSUIT if item == PURSUIT else Path(item).stem), item
        out.append(f"{name}={path}")
    return ";".join(out)


def _overrides(args):
    ov = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        ov[key.strip()] = rc.parse_value(value)
    if args.command == "train":
        if args.algo is not None:
            algo = args.algo.replace("-", "_")
            if algo not in ALGORITHMS:
                raise UsageError(f"unknown algorithm {args.algo!r}")
            ov["train.algo"] = algo
        if args.outer is not None:
            ov["train.outer_iters"] = args.outer
    if args.command == "eval":
        if args.attacker:
            if args.kind == "tournament":
                ov["eval.attackers"] = _named(args.attacker)
            else:
                ov["eval.attacker"] = args.attacker[-1]
        if args.defender:
            ov["eval.defenders"] = _named(args.defender)
        for flag, key in (("leader", "leader"), ("follower", "follower"), ("variant", "variant"),
                          ("payoff", "payoff"), ("matches", "matches_per_pair"), ("seeds", "seeds"),
                          ("episodes", "episodes"), ("render", "render")):
            value = getattr(args, flag)
            if value is not None:
                ov[f"eval.{key}"] = value
    return ov


def _prepare_out(out, force):
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force)")
        for name in OWNED:
            p = out / name
            if p.is_dir():
                shutil.rmtree(p)
            elif p.exists():
                p.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _subdir(out, name):
    d = out / name
    d.mkdir(exist_ok=True)
    return d


def _write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# minmax


def cmd_minmax(args, cfg: rc.RunConfig, out: Path):
    try:
        problem = problem_from_name(args.problem)
    except ConfigError as err:
        raise UsageError(str(err)) from None
    try:
        log = nested_sgda(problem, cfg.minmax)
    except DivergenceError as err:
        if err.partial is not None:
            err.partial.write_csv(out / "metrics.csv")
        raise
    log.write_csv(out / "metrics.csv")
    res = se_residual(problem, log.x_bar, log.y_bar)
    report = {"problem": args.problem, "epsilon": res.epsilon, "delta": res.delta, "probes": res.probes}
    log.write_json(out / "solution.json", cfg.minmax, {"se_residual": report})
    tables = _subdir(out, "tables")
    with open(tables / "se_residual.csv", "w") as fh:
        fh.write("problem,x_bar,y_bar,epsilon,delta\n")
        fh.write(f"{args.problem},{' '.join(map(repr, log.x_bar.tolist()))},"
                 f"{' '.join(map(repr, log.y_bar.tolist()))},{res.epsilon!r},{res.delta!r}\n")
    print(f"x_bar = {np.array2string(log.x_bar, precision=4)}  y_bar = {np.array2string(log.y_bar, precision=4)}")
    print(f"epsilon = {res.epsilon:.4g}  delta = {res.delta:.4g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _game(name, cfg: rc.RunConfig):
    if name == "reachavoid":
        return ReachAvoidGame(cfg.env)
    if name == "one-step":
        return OneStepBenchmark()
    if name == "two-arm-bandit":
        return two_arm_bandit()
    raise UsageError(f"unknown game {name!r}; choose from {', '.join(GAMES)}")


def _policy_metadata(args, cfg, state, role):
    meta = {"algo": cfg.train.algo, "game": args.game, "role": role, "iteration": state.iteration,
            "seed": cfg.train.seed}
    if args.game == "reachavoid":
        meta["reward_mode"] = cfg.env.reward_mode
    return meta


def cmd_train(args, cfg: rc.RunConfig, out: Path):
    game = _game(args.game, cfg)
    tc = cfg.train
    ckpt_dir = _subdir(out, "checkpoints")
    run_meta = {"algo": tc.algo, "game": args.game, "seed": tc.seed}
    resume = None
    if args.resume:
        resume, meta = load_state(args.resume)
        for key, value in run_meta.items():
            if key in meta and meta[key] != value:
                raise UsageError(f"state file was written with {key}={meta[key]!r}, run has {value!r}")
        if resume.iteration > tc.outer_iters:
            raise UsageError(f"state is at iteration {resume.iteration}, beyond outer_iters={tc.outer_iters}")

    def checkpoint(state: TrainState):
        save_state(ckpt_dir / f"state_{state.iteration:06d}.json", state, run_meta)

    try:
        result = train(game, tc, resume=resume, checkpoint=checkpoint)
    except TrainingAborted as err:
        write_records(err.partial or [], out / "metrics.csv", tc.record_time)
        raise
    state = TrainState(tc.outer_iters, result.leader, result.follower, result.lam)
    write_records(result.records, out / "metrics.csv", tc.record_time)
    save_policy(ckpt_dir / "leader.json", result.leader, _policy_metadata(args, cfg, state, "leader"))
    save_policy(ckpt_dir / "follower.json", result.follower, _policy_metadata(args, cfg, state, "follower"))
    if args.game == "reachavoid":
        figures = _subdir(out, "figures")
        rng = np.random.default_rng(np.random.SeedSequence(tc.seed, spawn_key=(2,)))
        traj = sample_trajectory(game, result.leader, result.follower, rng)
        write_trajectory_csv(traj.states, figures / "trajectory.csv")
        (figures / "trajectory.svg").write_text(trajectory_svg(traj.states, cfg.env))
    last = result.records[-1]
    print(f"{tc.algo}: {len(result.records)} iterations, return {last.ret:.4g}, "
          f"violation {last.violation:.4g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _pairs(text):
    out = {}
    for item in filter(None, (s.strip() for s in text.split(";"))):
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        if name in out:
            raise UsageError(f"duplicate name {name!r}")
        out[name] = PURSUIT if path == PURSUIT else path
    return out


def _write_matches(path, labelled):
    with open(path, "w") as fh:
        fh.write("scenario,seed,match,outcome,length,termination\n")
        for scenario, results in labelled:
            for k, r in enumerate(results):
                fh.write(f"{scenario},{r.seed},{k},{r.outcome},{r.length},{r.termination}\n")


def _render(out, stem, attacker, defender, n, seed, env, masking, stream_key):
    if n <= 0:
        return
    figures = _subdir(out, "figures")
    for k, states in enumerate(match_states(attacker, defender, n, seed, env, masking, stream_key)):
        (figures / f"{stem}_{k}.svg").write_text(trajectory_svg(states, env))


def _eval_tournament(cfg, out):
    ec = cfg.eval
    attackers, defenders = _pairs(ec.attackers), _pairs(ec.defenders)
    if not attackers or not defenders:
        raise UsageError("a tournament needs at least one attacker and one defender")
    seeds = [ec.seed + k for k in range(ec.seeds)]
    rows = tournament(attackers, defenders, ec.matches_per_pair, seeds, cfg.env, ec.mask_flag)
    tables = _subdir(out, "tables")
    write_table_csv(rows, tables / "tournament.csv")
    text = format_table(rows)
    (tables / "tournament.txt").write_text(text)
    _write_matches(tables / "matches.csv", [(r.scenario, r.matches) for r in rows])
    for ia, (na, pa) in enumerate(attackers.items()):
        for jd, (nd, pd) in enumerate(defenders.items()):
            _render(out, f"{na}_vs_{nd}", pa, pd, min(ec.render, ec.matches_per_pair), seeds[0], cfg.env,
                    ec.mask_flag, (ia, jd))
    sys.stdout.write(text)


def _eval_pursuit(cfg, out):
    ec = cfg.eval
    if not ec.attacker:
        raise UsageError("pursuit evaluation needs --attacker")
    res = play_matches(ec.attacker, PURSUIT, ec.episodes, ec.seed, cfg.env, ec.mask_flag, PURSUIT_STREAM)
    counts = {k: sum(r.outcome == o for r in res)
              for k, o in (("reached", "attacker_win"), ("collision", "defender_win"), ("neither", "draw"))}
    tables = _subdir(out, "tables")
    with open(tables / "pursuit.csv", "w") as fh:
        fh.write("reached,collision,neither\n")
        fh.write(f"{counts['reached']},{counts['collision']},{counts['neither']}\n")
    _write_matches(tables / "matches.csv", [("vs pursuit", res)])
    _render(out, "pursuit", ec.attacker, PURSUIT, min(ec.render, ec.episodes), ec.seed, cfg.env, ec.mask_flag,
            PURSUIT_STREAM)
    print(f"reached {counts['reached']}  collision {counts['collision']}  neither {counts['neither']}")


def _eval_bellman(cfg, out):
    ec = cfg.eval
    game = ReachAvoidGame(cfg.env)
    rng = init_rng(ec.seed)
    pols = []
    for path, space in ((ec.leader, game.leader_space), (ec.follower, game.follower_space)):
        # fresh random linear softmax policies unless a checkpoint is given
        pols.append(load_policy(path) if path else PolicyParams.init("mlp", game.obs_dim, space, rng, 0.5))
    est = bellman_error(game, *pols, ec.num_states, ec.num_rollouts, ec.variant,
                        np.random.default_rng(np.random.SeedSequence(ec.seed, spawn_key=(3,))),
                        next_state=ec.next_state, states=ec.states)
    tables = _subdir(out, "tables")
    with open(tables / "bellman.csv", "w") as fh:
        fh.write("variant,next_state,states,num_states,num_rollouts,error,std_error\n")
        fh.write(f"{est.variant},{ec.next_state},{ec.states},{est.num_states},{est.num_rollouts},"
                 f"{est.error!r},{est.std_error!r}\n")
    print(f"bellman error ({est.variant}) = {est.error:.6g} ± {est.std_error:.2g}")


def _eval_verify(cfg, out):
    ec = cfg.eval
    try:
        if ec.payoff:
            q = np.loadtxt(ec.payoff, delimiter=",", ndmin=2)
        else:
            with resources.files("stackgame").joinpath("data/matching_pennies.csv").open() as fh:
                q = np.loadtxt(fh, delimiter=",", ndmin=2)
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot read payoff matrix: {err}") from None
    p, value = stackelberg_verify_lp(q)
    tables = _subdir(out, "tables")
    with open(tables / "verify.csv", "w") as fh:
        fh.write("row,probability\n")
        for i, v in enumerate(p):
            fh.write(f"{i},{v!r}\n")
    report = {"value": value, "leader_mix": p.tolist(), "pure_maximin": float(q.min(axis=1).max())}
    if q.shape[0] <= 3:
        report["grid_value"] = brute_force_commitment(q, 0.01)[1]
    _write_json(tables / "verify.json", report)
    print(f"value = {value:.10g}  mix = {np.array2string(p, precision=4)}")


def cmd_eval(args, cfg: rc.RunConfig, out: Path):
    {"tournament": _eval_tournament, "pursuit": _eval_pursuit, "bellman": _eval_bellman,
     "verify": _eval_verify}[args.kind](cfg, out)
    return EXIT_OK


COMMANDS = {"minmax": cmd_minmax, "train": cmd_train, "eval": cmd_eval}


def main(argv=None):
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        try:
            cfg = rc.load(args.config, _overrides(args))
        except FileNotFoundError as err:
            raise UsageError(f"config file not found: {err.filename}") from None
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = _prepare_out(args.out, args.force)
        (out / "config.resolved").write_text(rc.format_config(cfg))
        return COMMANDS[args.command](args, cfg, out)
    except (UsageError, ConfigError, ArgumentError) as err:
        print(f"stackgame: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, DivergenceError, FloatingPointError) as err:
        print(f"stackgame: failed: {err}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
