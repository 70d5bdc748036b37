"""Learning agents sharing one act/observe interface.

* :class:`ManAgent` - two coupled networks, one per sub-action.
* :class:`DqnAgent` - a single network over the joint action index, with
  either the DQN or the DDQN bootstrap target.
* :class:`TabularAgent` - table learners on integer-state environments.

The harness drives any of them with ``select(obs, step, rng)`` and
``observe(transition, step, rng)``.
"""

from __future__ import annotations

import io
import json
from typing import Callable, Optional, Sequence

import numpy as np

from manrl.core import (
    Batch,
    ContractViolation,
    EpsilonSchedule,
    FactoredActionSpace,
    NumericError,
    ReplayBuffer,
    ShapeError,
    Transition,
)
from manrl.nn import MLP, OptimizerState, TargetPair, dump_mlp, load_mlp, optimizer_step
from manrl.tabular import TabularJointQ, TabularMAN, epsilon_greedy_pair

AGENT_CHECKPOINT_VERSION = 1

# Height profile of each block type over the three cells around its centre.
BLOCK_OUTLINES = np.array([[0, 1, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3]], dtype=float)


def one_hot_encoder(n: int) -> np.ndarray:
    return np.eye(n)


class SyncPolicy:
    """Hard copy every ``period`` environment steps, or a soft blend after every learner step."""

    def __init__(self, mode: str = "soft", tau: float = 0.005, period: int = 1000):
        if mode not in ("soft", "hard"):
            raise ContractViolation(f"unknown sync mode {mode!r}")
        if mode == "soft" and not 0.0 < tau <= 1.0:
            raise ContractViolation(f"tau must lie in (0, 1], got {tau}")
        if mode == "hard" and period < 1:
            raise ContractViolation(f"sync period must be positive, got {period}")
        self.mode, self.tau, self.period = mode, float(tau), int(period)

    def apply(self, pairs: Sequence[TargetPair], env_step: int, learned: bool) -> bool:
        if self.mode == "soft":
            if learned:
                for p in pairs:
                    p.sync_soft(self.tau)
            return learned
        if env_step % self.period == 0:
            for p in pairs:
                p.sync_hard()
            return True
        return False


class _DeepAgent:
    """Replay, exploration and sync plumbing shared by the network agents."""

    def __init__(self, space: FactoredActionSpace, obs_dim: int, gamma: float,
                 schedule: EpsilonSchedule, buffer_capacity: int, batch_size: int,
                 warmup: int, sync: SyncPolicy, input_scale: float):
        if not 0.0 <= gamma <= 1.0:
            raise ContractViolation(f"gamma must lie in [0, 1], got {gamma}")
        self.space = space
        self.obs_dim = int(obs_dim)
        self.gamma = float(gamma)
        self.schedule = schedule
        self.buffer = ReplayBuffer(buffer_capacity)
        self.batch_size = int(batch_size)
        self.warmup = int(warmup)
        self.sync = sync
        self.input_scale = float(input_scale)
        self.learner_steps = 0

    def _pairs(self) -> list[TargetPair]:
        raise NotImplementedError

    def _scaled(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        if states.shape[-1] != self.obs_dim:
            raise ShapeError(f"expected observations of width {self.obs_dim}, got {states.shape}")
        return states * self.input_scale

    def select(self, obs, step: int, rng: np.random.Generator) -> tuple[int, int]:
        return epsilon_greedy_pair(self.space, lambda: self.greedy(obs), self.schedule(step), rng)

    def observe(self, t: Transition, env_step: int, rng: np.random.Generator):
        """Store ``t``; once past warm-up take one minibatch step, then sync targets.

        ``env_step`` counts environment steps including this one (1-based).
        Returns the pre-step losses, or ``None`` when no learning happened.
        """
        t.check(self.space)
        self.buffer.push(t)
        losses = None
        if len(self.buffer) > self.warmup:
            losses = self.train_step(self.batch_size, rng)
        self.sync.apply(self._pairs(), env_step, losses is not None)
        return losses

    def train_step(self, batch_size: int, rng: np.random.Generator):
        if len(self.buffer) < max(batch_size, 1):
            return None
        return self.train_batch(self.buffer.sample_batch(batch_size, rng))


class ManAgent(_DeepAgent):
    """Deep multi-action learner.

    ``net_first`` maps a state to one value per first sub-action; ``net_second``
    maps the state concatenated with an encoding of the first sub-action to one
    value per second sub-action.
    """

    def __init__(
        self,
        space: FactoredActionSpace,
        obs_dim: int,
        rng: np.random.Generator,
        hidden: Sequence[int] = (64, 64),
        encoder: Optional[np.ndarray] = None,
        gamma: float = 0.99,
        lr: float = 1e-3,
        optimizer: str = "adam",
        schedule: EpsilonSchedule = EpsilonSchedule(),
        buffer_capacity: int = 100_000,
        batch_size: int = 32,
        warmup: int = 1000,
        sync: Optional[SyncPolicy] = None,
        input_scale: float = 1.0,
        bias: bool = True,
        max_grad_norm: Optional[float] = None,
        next_first: str = "stored",
        second_features: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
        second_width: Optional[int] = None,
    ):
        super().__init__(space, obs_dim, gamma, schedule, buffer_capacity, batch_size, warmup,
                         sync or SyncPolicy(), input_scale)
        if next_first not in ("stored", "greedy"):
            raise ContractViolation(f"next_first must be 'stored' or 'greedy', got {next_first!r}")
        self.next_first = next_first
        self.encoder = one_hot_encoder(space.n_first) if encoder is None else np.asarray(encoder, float)
        if self.encoder.shape[0] != space.n_first:
            raise ShapeError(f"encoder needs one row per first sub-action, got {self.encoder.shape}")
        self._second_features = second_features
        if second_features is None:
            width2 = self.obs_dim + self.encoder.shape[1]
        elif second_width is None:
            raise ContractViolation("a custom second_features function needs second_width")
        else:
            width2 = int(second_width)
        self.net_first = TargetPair(MLP([self.obs_dim, *hidden, space.n_first], rng, bias))
        self.net_second = TargetPair(MLP([width2, *hidden, space.n_second], rng, bias))
        self.opt_first = OptimizerState(optimizer, lr, max_grad_norm=max_grad_norm)
        self.opt_second = OptimizerState(optimizer, lr, max_grad_norm=max_grad_norm)

    def _pairs(self):
        return [self.net_first, self.net_second]

    def second_input(self, states: np.ndarray, a_first: np.ndarray) -> np.ndarray:
        """Input rows for ``net_second``: scaled state followed by the sub-action encoding."""
        states = np.atleast_2d(states)
        a_first = np.asarray(a_first, dtype=np.int64).reshape(-1)
        if self._second_features is not None:
            return self._second_features(states, a_first)
        return np.hstack([self._scaled(states), self.encoder[a_first]])

    def greedy(self, obs) -> tuple[int, int]:
        x = self._scaled(obs)
        a1 = int(np.argmax(self.net_first.online.forward(x)))
        q2 = self.net_second.online.forward(self.second_input(obs, [a1])[0])
        return a1, int(np.argmax(q2))

    def targets(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        """Bootstrap targets for both networks; neither network is modified."""
        r = batch.rewards
        sp = batch.next_states
        n = len(r)
        rows = np.arange(n)
        x1 = self._scaled(sp)
        a1_next = np.argmax(self.net_first.online.forward(x1), axis=1)
        cond = batch.a_first if self.next_first == "stored" else a1_next
        x2 = self.second_input(sp, cond)
        a2_next = np.argmax(self.net_second.online.forward(x2), axis=1)
        boot_first = self.net_second.target.forward(x2)[rows, a2_next]
        boot_second = self.net_first.target.forward(x1)[rows, a1_next]
        live = ~batch.terminals
        y_first = r + self.gamma * np.where(live, boot_first, 0.0)
        y_second = r + self.gamma * np.where(live, boot_second, 0.0)
        return y_first, y_second

    def train_batch(self, batch: Batch) -> tuple[float, float]:
        y1, y2 = self.targets(batch)
        if not (np.all(np.isfinite(y1)) and np.all(np.isfinite(y2))):
            raise NumericError("non-finite bootstrap targets")
        x1 = self._scaled(batch.states)
        x2 = self.second_input(batch.states, batch.a_first)
        l1, g1 = self.net_first.online.mse_grad(x1, batch.a_first, y1)
        l2, g2 = self.net_second.online.mse_grad(x2, batch.a_second, y2)
        optimizer_step(self.opt_first, self.net_first.online, g1)
        optimizer_step(self.opt_second, self.net_second.online, g2)
        self.learner_steps += 1
        return l1, l2

    def networks(self) -> dict:
        return {"first_online": self.net_first.online, "first_target": self.net_first.target,
                "second_online": self.net_second.online, "second_target": self.net_second.target}

    def optimizers(self) -> dict:
        return {"first": self.opt_first, "second": self.opt_second}


class DqnAgent(_DeepAgent):
    """Single joint-action network with a DQN (``mode='dqn'``) or DDQN target."""

    def __init__(
        self,
        space: FactoredActionSpace,
        obs_dim: int,
        rng: np.random.Generator,
        mode: str = "dqn",
        hidden: Sequence[int] = (64, 64),
        gamma: float = 0.99,
        lr: float = 1e-3,
        optimizer: str = "adam",
        schedule: EpsilonSchedule = EpsilonSchedule(),
        buffer_capacity: int = 100_000,
        batch_size: int = 32,
        warmup: int = 1000,
        sync: Optional[SyncPolicy] = None,
        input_scale: float = 1.0,
        bias: bool = True,
        max_grad_norm: Optional[float] = None,
    ):
        super().__init__(space, obs_dim, gamma, schedule, buffer_capacity, batch_size, warmup,
                         sync or SyncPolicy(), input_scale)
        if mode not in ("dqn", "ddqn"):
            raise ContractViolation(f"mode must be 'dqn' or 'ddqn', got {mode!r}")
        self.mode = mode
        self.net = TargetPair(MLP([self.obs_dim, *hidden, space.n_joint], rng, bias))
        self.opt = OptimizerState(optimizer, lr, max_grad_norm=max_grad_norm)

    def _pairs(self):
        return [self.net]

    def greedy(self, obs) -> tuple[int, int]:
        return self.space.split(int(np.argmax(self.net.online.forward(self._scaled(obs)))))

    def targets(self, batch: Batch) -> np.ndarray:
        x = self._scaled(batch.next_states)
        q_target = self.net.target.forward(x)
        if self.mode == "dqn":
            boot = q_target.max(axis=1)
        else:
            pick = np.argmax(self.net.online.forward(x), axis=1)
            boot = q_target[np.arange(len(pick)), pick]
        return batch.rewards + self.gamma * np.where(batch.terminals, 0.0, boot)

    def train_batch(self, batch: Batch) -> float:
        y = self.targets(batch)
        if not np.all(np.isfinite(y)):
            raise NumericError("non-finite bootstrap targets")
        actions = batch.a_first * self.space.n_second + batch.a_second
        loss, grads = self.net.online.mse_grad(self._scaled(batch.states), actions, y)
        optimizer_step(self.opt, self.net.online, grads)
        self.learner_steps += 1
        return loss

    def networks(self) -> dict:
        return {"online": self.net.online, "target": self.net.target}

    def optimizers(self) -> dict:
        return {"joint": self.opt}


def man_select(agent: ManAgent, state, step: int, rng: np.random.Generator) -> tuple[int, int]:
    return agent.select(state, step, rng)


def man_targets(agent: ManAgent, batch) -> tuple[np.ndarray, np.ndarray]:
    if not isinstance(batch, Batch):
        batch = Batch.from_transitions(batch)
    if len(batch) == 0:
        raise ContractViolation("empty batch")
    return agent.targets(batch)


def man_train_step(agent: ManAgent, batch_size: int, rng: np.random.Generator):
    return agent.train_step(batch_size, rng)


def _single(agent: DqnAgent, t: Transition, mode: str) -> float:
    saved = agent.mode
    agent.mode = mode
    try:
        return float(agent.targets(Batch.from_transitions([t]))[0])
    finally:
        agent.mode = saved


def dqn_target(agent: DqnAgent, t: Transition) -> float:
    return _single(agent, t, "dqn")


def ddqn_target(agent: DqnAgent, t: Transition) -> float:
    return _single(agent, t, "ddqn")


def dqn_train_step(agent: DqnAgent, batch_size: int, rng: np.random.Generator):
    return agent.train_step(batch_size, rng)


class TabularAgent:
    """Online table learner over one-hot observations (index = argmax)."""

    def __init__(self, kind: str, n_states: int, space: FactoredActionSpace, alpha: float,
                 gamma: float, schedule: EpsilonSchedule):
        if kind not in ("tabular_man", "tabular_q", "tabular_double_q"):
            raise ContractViolation(f"unknown tabular agent {kind!r}")
        self.kind = kind
        self.space = space
        self.schedule = schedule
        self.learner_steps = 0
        if kind == "tabular_man":
            self.learner = TabularMAN(n_states, space, alpha, gamma)
        else:
            self.learner = TabularJointQ(n_states, space, alpha, gamma,
                                         double=kind == "tabular_double_q")

    @staticmethod
    def _index(obs) -> int:
        return int(np.argmax(obs))

    def greedy(self, obs) -> tuple[int, int]:
        return self.learner.greedy(self._index(obs))

    def select(self, obs, step: int, rng: np.random.Generator) -> tuple[int, int]:
        return epsilon_greedy_pair(self.space, lambda: self.greedy(obs), self.schedule(step), rng)

    def observe(self, t: Transition, env_step: int, rng: np.random.Generator):
        idx = Transition(np.array([self._index(t.state)], float), t.a_first, t.a_second,
                         t.reward, np.array([self._index(t.next_state)], float), t.terminal)
        if self.kind == "tabular_man":
            self.learner.update(idx)
        else:
            mode = "double_q" if self.kind == "tabular_double_q" else "q_learning"
            self.learner.update(idx, mode, rng)
        self.learner_steps += 1
        return None

    def tables(self) -> dict:
        if self.kind == "tabular_man":
            return {"q_first": self.learner.q_first, "q_second": self.learner.q_second}
        out = {"q": self.learner.q}
        if self.learner.q_b is not None:
            out["q_b"] = self.learner.q_b
        return out


# Agent checkpoints are .npz archives holding:
#   version, kind, counters (json), config (text), every network as a
#   manrl.nn byte blob ("net/<name>"), optimizer moments ("opt/<name>/m<i>",
#   "opt/<name>/v<i>", "opt/<name>/step") or tables ("table/<name>").


def save_agent(agent, path, kind: str, config_text: str = "", counters: Optional[dict] = None) -> None:
    arrays = {
        "version": np.array(AGENT_CHECKPOINT_VERSION),
        "kind": np.array(kind),
        "config": np.array(config_text),
        "counters": np.array(json.dumps(counters or {"learner_steps": agent.learner_steps},
                                        sort_keys=True)),
    }
    if isinstance(agent, TabularAgent):
        for name, table in agent.tables().items():
            arrays[f"table/{name}"] = table
    else:
        for name, net in agent.networks().items():
            arrays[f"net/{name}"] = np.frombuffer(dump_mlp(net), dtype=np.uint8)
        for name, opt in agent.optimizers().items():
            arrays[f"opt/{name}/step"] = np.array(opt.step)
            for i, (m, v) in enumerate(zip(opt.m, opt.v)):
                arrays[f"opt/{name}/m{i}"] = m
                arrays[f"opt/{name}/v{i}"] = v
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        out = {k: data[k] for k in data.files}
    version = int(out["version"])
    if version != AGENT_CHECKPOINT_VERSION:
        raise ValueError(f"unsupported agent checkpoint version {version}")
    return out


def restore_agent(agent, data: dict) -> None:
    """Load parameters, optimizer state and counters from ``read_checkpoint`` output."""
    counters = json.loads(str(data["counters"]))
    agent.learner_steps = int(counters.get("learner_steps", 0))
    if isinstance(agent, TabularAgent):
        for name, table in agent.tables().items():
            table[...] = data[f"table/{name}"]
        return
    for name, net in agent.networks().items():
        loaded = load_mlp(data[f"net/{name}"].tobytes())
        if loaded.layer_sizes != net.layer_sizes:
            raise ShapeError(f"checkpoint network {name} has sizes {loaded.layer_sizes}")
        for dst, src in zip(net.parameters(), loaded.parameters()):
            dst[...] = src
    for name, opt in agent.optimizers().items():
        opt.step = int(data[f"opt/{name}/step"])
        i, m, v = 0, [], []
        while f"opt/{name}/m{i}" in data:
            m.append(np.array(data[f"opt/{name}/m{i}"]))
            v.append(np.array(data[f"opt/{name}/v{i}"]))
            i += 1
        opt.m, opt.v = m, v
