"""Experiment configuration, the training loop, evaluation and reporting.

Config files are flat ``key = value`` text; ``#`` starts a comment. Keys are
the field names of :class:`ExperimentConfig`; tuples are comma-separated.
Unknown keys are rejected.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from manrl.agents import (
    BLOCK_OUTLINES,
    DqnAgent,
    ManAgent,
    SyncPolicy,
    TabularAgent,
    save_agent,
)
from manrl.core import ConfigError, EpsilonSchedule, NumericError, Transition
from manrl.envs import BlockStacking, MdpEnv, RewardWeights, TraceWriter, mdp_generate
from manrl.tabular import read_mdp_text

log = logging.getLogger(__name__)

OUT_ROOT_ENV = "MANRL_OUT"

DEEP_AGENTS = ("man", "dqn", "ddqn")
TABULAR_AGENTS = ("tabular_man", "tabular_q", "tabular_double_q")
ENVS = ("blockstack", "mdp")

TRAIN_COLUMNS = ("episode", "return", "steps", "max_height", "bumpiness", "holes",
                 "epsilon", "learner_steps", "loss_first", "loss_second")
COMPARE_COLUMNS = ("agent", "seed", "episode", "return", "max_height", "bumpiness")
SUMMARY_COLUMNS = ("agent", "seeds", "median_final_return", "mean_final_return",
                   "mean_final_bumpiness", "mean_final_max_height")
ORACLE_COLUMNS = ("state", "v_star", "a_first", "a_second")


class TrainingDiverged(RuntimeError):
    pass


class UndefinedScoreError(ZeroDivisionError):
    pass


@dataclass
class ExperimentConfig:
    agent: str = "man"
    env: str = "blockstack"
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_decay_steps: int = 10_000
    batch_size: int = 32
    sync: str = "soft"
    tau: float = 0.005
    sync_period: int = 1000
    lr: Optional[float] = None  # None: 1e-3 for network agents, 0.1 for tables
    optimizer: str = "adam"
    hidden: tuple = (64, 64)
    buffer_capacity: int = 100_000
    warmup: int = 1000
    max_grad_norm: Optional[float] = None
    next_first: str = "stored"
    input_scale: Optional[float] = None  # None: 1/height_cap on blockstack, 1 otherwise
    episodes: int = 100
    max_steps: int = 0  # 0: no step budget
    seeds: tuple = (0,)
    out_dir: str = ""
    checkpoint: bool = True
    trace: bool = False
    eval_episodes: int = 0
    # block stacking
    stack_horizon: int = 20
    height_cap: int = 24
    w_height: float = 1.0
    w_bump: float = 0.5
    w_holes: float = 0.25
    # random factored MDP
    mdp_file: str = ""
    mdp_seed: int = 0
    mdp_states: int = 5
    mdp_n_first: int = 2
    mdp_n_second: int = 2
    mdp_sparsity: float = 0.5
    mdp_horizon: int = 50

    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.1 if self.agent in TABULAR_AGENTS else 1e-3

    def scale(self) -> float:
        if self.input_scale is not None:
            return self.input_scale
        return 1.0 / self.height_cap if self.env == "blockstack" else 1.0

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.agent in DEEP_AGENTS + TABULAR_AGENTS, f"unknown agent {self.agent!r}")
        need(self.env in ENVS, f"unknown env {self.env!r}")
        need(not (self.agent in TABULAR_AGENTS and self.env == "blockstack"),
             "tabular agents need env = mdp")
        need(0.0 <= self.gamma <= 1.0, "gamma must lie in [0, 1]")
        need(0.0 <= self.eps_start <= 1.0 and 0.0 <= self.eps_end <= 1.0, "epsilon outside [0, 1]")
        need(self.eps_decay_steps >= 1, "eps_decay_steps must be positive")
        need(self.batch_size >= 1, "batch_size must be positive")
        need(self.sync in ("soft", "hard"), "sync must be soft or hard")
        need(0.0 < self.tau <= 1.0, "tau must lie in (0, 1]")
        need(self.sync_period >= 1, "sync_period must be positive")
        need(self.learning_rate() > 0, "lr must be positive")
        need(self.agent in DEEP_AGENTS or self.learning_rate() <= 1.0, "tabular lr must be <= 1")
        need(self.optimizer in ("adam", "sgd"), "optimizer must be adam or sgd")
        need(all(int(h) >= 1 for h in self.hidden), "hidden widths must be positive")
        need(self.buffer_capacity >= 1, "buffer_capacity must be positive")
        need(self.warmup >= 0, "warmup must be >= 0")
        need(self.max_grad_norm is None or self.max_grad_norm > 0, "max_grad_norm must be positive")
        need(self.next_first in ("stored", "greedy"), "next_first must be stored or greedy")
        need(self.input_scale is None or self.input_scale > 0, "input_scale must be positive")
        need(self.episodes >= 0 and self.max_steps >= 0, "budgets must be >= 0")
        need(len(self.seeds) > 0, "seed list must be non-empty")
        need(all(0 <= int(s) < 2**64 for s in self.seeds), "seeds must be 64-bit unsigned")
        need(self.eval_episodes >= 0, "eval_episodes must be >= 0")
        need(self.stack_horizon >= 1 and self.height_cap >= 1, "stacking limits must be positive")
        need(self.mdp_states >= 2 and self.mdp_n_first >= 2 and self.mdp_n_second >= 2,
             "mdp sizes must be >= 2")
        need(0.0 <= self.mdp_sparsity < 1.0, "mdp_sparsity must lie in [0, 1)")
        need(self.mdp_horizon >= 1, "mdp_horizon must be positive")
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    default = _FIELDS[name].default
    raw = raw.strip()
    if name in ("hidden", "seeds"):
        try:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        except ValueError as exc:
            raise ConfigError(f"{name}: expected comma-separated integers, got {raw!r}") from exc
    if name in ("lr", "max_grad_norm", "input_scale"):
        return None if raw.lower() in ("", "none", "auto") else _number(name, raw, float)
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return _number(name, raw, int)
    if isinstance(default, float):
        return _number(name, raw, float)
    return raw


def _number(name, raw, kind):
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from exc


def apply_overrides(config: ExperimentConfig, pairs: Sequence[str]) -> ExperimentConfig:
    changes = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _coerce(key, value)
    return config.replace(**changes)


def parse_config(text: str) -> ExperimentConfig:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        pairs.append(line)
    return apply_overrides(ExperimentConfig(), pairs).validate()


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def format_config(config: ExperimentConfig) -> str:
    lines = []
    for name in _FIELDS:
        v = getattr(config, name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif v is None:
            v = "auto"
        lines.append(f"{name} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class EpisodeRecord:
    episode: int
    total_reward: float
    steps: int
    max_height: float = 0.0
    bumpiness: float = 0.0
    holes: int = 0
    epsilon: float = 0.0
    learner_steps: int = 0
    loss_first: Optional[float] = None
    loss_second: Optional[float] = None
    wall_ms: float = field(default=0.0, compare=False)

    def row(self) -> list:
        fmt = lambda v: "" if v is None else repr(float(v))
        return [self.episode, repr(float(self.total_reward)), self.steps,
                repr(float(self.max_height)), repr(float(self.bumpiness)), self.holes,
                repr(float(self.epsilon)), self.learner_steps, fmt(self.loss_first),
                fmt(self.loss_second)]


@dataclass
class RunResult:
    config: ExperimentConfig
    seed: int
    records: list
    agent: object
    env: object
    env_steps: int
    csv_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None


def _streams(seed: int) -> tuple[np.random.Generator, ...]:
    children = np.random.SeedSequence(int(seed)).spawn(3)
    return tuple(np.random.Generator(np.random.PCG64(c)) for c in children)


def build_env(config: ExperimentConfig, rng: np.random.Generator):
    if config.env == "blockstack":
        weights = RewardWeights(config.w_height, config.w_bump, config.w_holes)
        return BlockStacking(config.stack_horizon, config.height_cap, weights)
    if config.mdp_file:
        mdp = read_mdp_text(config.mdp_file)
    else:
        mdp = mdp_generate(config.mdp_seed, config.mdp_states, config.mdp_n_first,
                           config.mdp_n_second, config.mdp_sparsity, config.gamma)
    return MdpEnv(mdp, rng, config.mdp_horizon)


def build_agent(config: ExperimentConfig, env, rng: np.random.Generator):
    schedule = EpsilonSchedule(config.eps_start, config.eps_end, config.eps_decay_steps)
    if config.agent in TABULAR_AGENTS:
        return TabularAgent(config.agent, env.obs_dim, env.space, config.learning_rate(),
                            config.gamma, schedule)
    common = dict(
        hidden=tuple(config.hidden), gamma=config.gamma, lr=config.learning_rate(),
        optimizer=config.optimizer, schedule=schedule, buffer_capacity=config.buffer_capacity,
        batch_size=config.batch_size, warmup=config.warmup,
        sync=SyncPolicy(config.sync, config.tau, config.sync_period),
        input_scale=config.scale(), max_grad_norm=config.max_grad_norm,
    )
    if config.agent == "man":
        encoder = BLOCK_OUTLINES if config.env == "blockstack" else None
        return ManAgent(env.space, env.obs_dim, rng, encoder=encoder,
                        next_first=config.next_first, **common)
    return DqnAgent(env.space, env.obs_dim, rng, mode=config.agent, **common)


def _terminal_metrics(env) -> tuple[float, float, int]:
    if isinstance(env, BlockStacking):
        return float(env.map.max_height), env.map.bumpiness, env.map.holes
    return 0.0, 0.0, 0


def run_training(config: ExperimentConfig, seed: Optional[int] = None,
                 out_dir=None, write: bool = True) -> RunResult:
    """Run the act/store/learn/sync loop for one seed.

    Per-episode rows are appended to ``train_seed<seed>.csv`` as they finish.
    Wall-clock timings go to ``timing_seed<seed>.txt`` so the CSV stays
    byte-reproducible.
    """
    config.validate()
    seed = int(config.seeds[0] if seed is None else seed)
    init_rng, act_rng, env_rng = _streams(seed)
    env = build_env(config, env_rng)
    agent = build_agent(config, env, init_rng)

    out = None
    csv_fh = timing_fh = trace_fh = None
    writer = trace = None
    if write:
        out = Path(out_dir or config.out_dir or os.environ.get(OUT_ROOT_ENV, "runs"))
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"train_seed{seed}.csv"
        csv_fh = open(csv_path, "w", newline="")
        writer = csv.writer(csv_fh, lineterminator="\n")
        writer.writerow(TRAIN_COLUMNS)
        timing_fh = open(out / f"timing_seed{seed}.txt", "w")
        if config.trace:
            trace_fh = open(out / f"trace_seed{seed}.txt", "w")
            trace = TraceWriter(trace_fh)

    records = []
    env_steps = 0
    try:
        for episode in range(config.episodes):
            if config.max_steps and env_steps >= config.max_steps:
                break
            t0 = time.perf_counter()
            obs = env.reset()
            total, steps = 0.0, 0
            losses = []
            done = False
            while not done:
                a1, a2 = agent.select(obs, env_steps, act_rng)
                next_obs, reward, terminal = env.step(a1, a2)
                env_steps += 1
                steps += 1
                total += reward
                done = terminal or steps >= env.horizon or (
                    bool(config.max_steps) and env_steps >= config.max_steps)
                loss = agent.observe(Transition(obs, a1, a2, reward, next_obs, terminal),
                                     env_steps, act_rng)
                if loss is not None:
                    losses.append(loss if isinstance(loss, tuple) else (loss,))
                if trace is not None and isinstance(env, BlockStacking):
                    trace.write(episode, steps - 1, a1, a2, reward, env.map.max_height,
                                env.map.bumpiness, env.map.holes)
                obs = next_obs
            max_h, bump, holes = _terminal_metrics(env)
            l1 = l2 = None
            if losses:
                arr = np.array(losses)
                l1 = float(arr[:, 0].mean())
                l2 = float(arr[:, 1].mean()) if arr.shape[1] > 1 else None
            rec = EpisodeRecord(episode, total, steps, max_h, bump, holes,
                                float(agent.schedule(max(env_steps - 1, 0))),
                                agent.learner_steps, l1, l2,
                                (time.perf_counter() - t0) * 1000.0)
            records.append(rec)
            if writer is not None:
                writer.writerow(rec.row())
                timing_fh.write(f"{episode} {rec.wall_ms:.3f}\n")
    except NumericError as exc:
        if out is not None:
            (out / f"diagnostic_seed{seed}.json").write_text(json.dumps({
                "seed": seed, "episode": len(records), "env_steps": env_steps,
                "learner_steps": agent.learner_steps, "error": str(exc)}, indent=2))
        raise TrainingDiverged(f"seed {seed}: {exc}") from exc
    finally:
        for fh in (csv_fh, timing_fh, trace_fh):
            if fh is not None:
                fh.close()

    result = RunResult(config, seed, records, agent, env, env_steps)
    if out is not None:
        result.csv_path = out / f"train_seed{seed}.csv"
        if config.checkpoint:
            result.checkpoint_path = out / f"agent_seed{seed}.npz"
            save_agent(agent, result.checkpoint_path, config.agent, format_config(config),
                       {"learner_steps": agent.learner_steps, "env_steps": env_steps,
                        "episodes": len(records), "seed": seed})
    return result


@dataclass
class EvalResult:
    mean: float
    returns: list


def evaluate_policy(agent, env, episodes: int = 20, rng: Optional[np.random.Generator] = None) -> EvalResult:
    """Greedy rollouts; the agent is only queried, never updated."""
    returns = []
    for _ in range(int(episodes)):
        obs = env.reset()
        total, steps, done = 0.0, 0, False
        while not done:
            a1, a2 = agent.greedy(obs)
            obs, reward, terminal = env.step(a1, a2)
            total += reward
            steps += 1
            done = terminal or steps >= env.horizon
        returns.append(total)
    mean = float(np.mean(returns)) if returns else float("nan")
    return EvalResult(mean, returns)


def normalized_score(agent_score: float, random_score: float, human_score: float) -> float:
    """``(agent - random) / (human - random)`` as a fraction (1.0 = human level)."""
    if human_score == random_score:
        raise UndefinedScoreError("human and random scores coincide")
    return (agent_score - random_score) / (human_score - random_score)


def summarize(scores: Sequence[float]) -> tuple[float, float]:
    if len(scores) == 0:
        raise ValueError("cannot summarize an empty score list")
    return float(statistics.fmean(scores)), float(statistics.median(scores))


def trailing_mean(values: Sequence[float], window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# ---------------------------------------------------------------------------
# Multi-agent, multi-seed sweeps


def _sweep_worker(args):
    config, seed, out_dir = args
    res = run_training(config, seed, out_dir)
    return config.agent, seed, [dataclasses.astuple(r) for r in res.records]


@dataclass
class AgentSummary:
    agent: str
    seeds: int
    median_final_return: float
    mean_final_return: float
    mean_final_bumpiness: float
    mean_final_max_height: float
    per_seed_final_return: list


def summarize_sweep(rows: dict, final: int = 100) -> list[AgentSummary]:
    """``rows`` maps (agent, seed) to EpisodeRecord lists."""
    out = []
    for agent in dict.fromkeys(a for a, _ in rows):
        finals, bumps, heights = [], [], []
        for (a, seed), recs in sorted(rows.items(), key=lambda kv: kv[0][1]):
            if a != agent or not recs:
                continue
            tail = recs[-final:]
            finals.append(float(np.mean([r.total_reward for r in tail])))
            bumps.append(float(np.mean([r.bumpiness for r in tail])))
            heights.append(float(np.mean([r.max_height for r in tail])))
        if finals:
            out.append(AgentSummary(agent, len(finals), float(statistics.median(finals)),
                                    float(np.mean(finals)), float(np.mean(bumps)),
                                    float(np.mean(heights)), finals))
    return out


def compare(config: ExperimentConfig, agents: Sequence[str], seeds: Sequence[int],
            out_dir, workers: int = 1) -> tuple[Path, list[AgentSummary]]:
    """Train every agent on every seed, then join the learning curves into one CSV."""
    out = Path(out_dir)
    jobs = []
    for agent in agents:
        cfg = config.replace(agent=agent, seeds=tuple(seeds)).validate()
        for seed in seeds:
            jobs.append((cfg, int(seed), out / agent))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    else:
        results = [_sweep_worker(j) for j in jobs]

    rows = {(a, s): [EpisodeRecord(*t) for t in recs] for a, s, recs in results}
    out.mkdir(parents=True, exist_ok=True)
    joined = out / "compare.csv"
    with open(joined, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_COLUMNS)
        for (agent, seed), recs in rows.items():
            for r in recs:
                w.writerow([agent, seed, r.episode, repr(float(r.total_reward)),
                            repr(float(r.max_height)), repr(float(r.bumpiness))])
    summary = summarize_sweep(rows)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for s in summary:
            w.writerow([s.agent, s.seeds, repr(s.median_final_return), repr(s.mean_final_return),
                        repr(s.mean_final_bumpiness), repr(s.mean_final_max_height)])
    return joined, summary


def read_records(csv_path) -> list[EpisodeRecord]:
    recs = []
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            opt = lambda k: float(row[k]) if row[k] else None
            recs.append(EpisodeRecord(int(row["episode"]), float(row["return"]), int(row["steps"]),
                                      float(row["max_height"]), float(row["bumpiness"]),
                                      int(row["holes"]), float(row["epsilon"]),
                                      int(row["learner_steps"]), opt("loss_first"),
                                      opt("loss_second")))
    return recs


def smooth_csv(csv_path, out_path, window: int = 100) -> Path:
    """Trailing-window mean of ``return`` per (agent, seed) group of a training or sweep CSV."""
    groups: dict = {}
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if "return" not in (reader.fieldnames or []):
            raise ValueError(f"{csv_path} has no 'return' column")
        for row in reader:
            key = (row.get("agent", ""), row.get("seed", ""))
            groups.setdefault(key, []).append((int(row["episode"]), float(row["return"])))
    out_path = Path(out_path)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("agent", "seed", "episode", "return_smoothed"))
        for (agent, seed), pts in groups.items():
            sm = trailing_mean([r for _, r in pts], window)
            for (ep, _), v in zip(pts, sm):
                w.writerow([agent, seed, ep, repr(float(v))])
    return out_path


# Normalized scores (percent of human) on 12 Atari games for DQN, DDQN and MAN,
# and the reference mean/median across games.
ATARI_NORMALIZED = {
    "Boxing": (1707.86, 1942.86, 2239.29),
    "Chopper Command": (64.78, 42.36, 72.88),
    "Fishing Derby": (95.16, 115.23, 111.11),
    "Frostbite": (6.16, 4.13, 179.67),
    "H.E.R.O": (76.5, 78.15, 79.6),
    "Ice Hockey": (79.34, 72.73, 54.55),
    "James Bond": (145.00, 108.29, 145.88),
    "Krull": (277.01, 350.08, 989.58),
    "Private Eye": (2.53, 0.93, 0.11),
    "Robotank": (508.97, 458.76, 581.96),
    "Seaquest": (25.94, 39.41, 55.59),
    "Tennis": (143.15, 171.14, 265.77),
}
ATARI_SUMMARY = {"dqn": (261.0, 87.3), "ddqn": (282.0, 93.2), "man": (397.7, 128.5)}


def atari_column(agent: str) -> list[float]:
    col = {"dqn": 0, "ddqn": 1, "man": 2}[agent]
    return [v[col] for v in ATARI_NORMALIZED.values()]
