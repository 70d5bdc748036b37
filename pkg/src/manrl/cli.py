"""Command-line entry point: ``manrl {train,eval,oracle,compare,gradcheck,plot-data}``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from manrl.agents import read_checkpoint, restore_agent
from manrl.core import ConfigError
from manrl.harness import (
    DEEP_AGENTS,
    ENVS,
    ORACLE_COLUMNS,
    OUT_ROOT_ENV,
    TABULAR_AGENTS,
    ExperimentConfig,
    TrainingDiverged,
    apply_overrides,
    build_agent,
    build_env,
    compare,
    evaluate_policy,
    load_config,
    parse_config,
    run_training,
    smooth_csv,
)
from manrl.nn import gradcheck_suite
from manrl.tabular import DivergenceError, ModelError, read_mdp_text, value_iteration


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return apply_overrides(cfg, args.set or []).validate()


def cmd_train(args) -> int:
    cfg = _config(args)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    out = Path(args.out or cfg.out_dir or os.environ.get(OUT_ROOT_ENV, "runs"))
    for seed in seeds:
        res = run_training(cfg, seed, out)
        last = res.records[-100:]
        mean = float(np.mean([r.total_reward for r in last])) if last else float("nan")
        print(f"seed {seed}: {len(res.records)} episodes, {res.env_steps} env steps, "
              f"final-100 mean return {mean:.4f} -> {res.csv_path}")
    return 0


def cmd_eval(args) -> int:
    data = read_checkpoint(args.checkpoint)
    cfg = parse_config(str(data["config"]))
    env_rng, init_rng = (np.random.Generator(np.random.PCG64(s))
                         for s in np.random.SeedSequence(args.seed).spawn(2))
    env = build_env(cfg, env_rng)
    agent = build_agent(cfg, env, init_rng)
    restore_agent(agent, data)
    res = evaluate_policy(agent, env, args.episodes)
    print(f"mean return {float(res.mean)!r} over {len(res.returns)} episodes")
    for i, r in enumerate(res.returns):
        print(f"{i} {float(r)!r}")
    return 0


def cmd_oracle(args) -> int:
    mdp = read_mdp_text(args.mdp)
    sol = value_iteration(mdp, args.gamma, args.tol)
    rows = []
    for s, (v, a) in enumerate(zip(sol.v_star, sol.greedy_policy)):
        a1, a2 = mdp.space.split(int(a))
        rows.append((s, repr(float(v)), a1, a2))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(ORACLE_COLUMNS)
    w.writerows(rows)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fw = csv.writer(fh, lineterminator="\n")
            fw.writerow(ORACLE_COLUMNS)
            fw.writerows(rows)
    return 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    cfg = cfg.replace(env=args.env)
    if args.episodes is not None:
        cfg = cfg.replace(episodes=args.episodes)
    agents = [a.strip() for a in args.agents.split(",") if a.strip()]
    for a in agents:
        if a not in DEEP_AGENTS + TABULAR_AGENTS:
            raise ConfigError(f"unknown agent {a!r}")
    seeds = list(range(args.seed_base, args.seed_base + args.seeds))
    out = Path(args.out or os.path.join(os.environ.get(OUT_ROOT_ENV, "runs"), "compare"))
    joined, summary = compare(cfg, agents, seeds, out, args.workers)
    print(f"{'agent':<18}{'seeds':>6}{'median final':>15}{'mean final':>13}{'bumpiness':>12}{'max height':>12}")
    for s in summary:
        print(f"{s.agent:<18}{s.seeds:>6}{s.median_final_return:>15.4f}{s.mean_final_return:>13.4f}"
              f"{s.mean_final_bumpiness:>12.4f}{s.mean_final_max_height:>12.3f}")
    print(f"learning curves: {joined}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite(args.seed, args.n, args.rtol)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4} sizes={r.layer_sizes} batch={r.batch} max_rel_err={r.max_rel_error:.3e}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} architectures passed")
    return 1 if failed else 0


def cmd_plot_data(args) -> int:
    out = smooth_csv(args.csv, args.out, args.window)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="manrl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_flags(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    sp = sub.add_parser("train", help="train one agent for each configured seed")
    config_flags(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="greedy evaluation of a saved agent")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--episodes", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("oracle", help="value iteration on an explicit MDP file")
    sp.add_argument("--mdp", required=True)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("compare", help="multi-agent multi-seed sweep")
    config_flags(sp)
    sp.add_argument("--agents", default="man,dqn,ddqn")
    sp.add_argument("--env", choices=ENVS, default="blockstack")
    sp.add_argument("--seeds", type=int, default=5, help="number of seeds")
    sp.add_argument("--seed-base", type=int, default=0)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("gradcheck", help="finite-difference check of network gradients")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n", type=int, default=20)
    sp.add_argument("--rtol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("plot-data", help="trailing-mean learning curves from a CSV")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--window", type=int, default=100)
    sp.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"manrl: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except (ConfigError, ModelError, DivergenceError) as exc:
        print(f"manrl: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"manrl: training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
