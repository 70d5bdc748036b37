"""Shared domain types: factored actions, transitions, replay, exploration, RNG."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np


class ContractViolation(IndexError):
    """An index or argument falls outside the declared domain."""


class EmptyBufferError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    """A non-finite value reached a learner or optimizer."""


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Return the package's random stream for ``seed``.

    Every stochastic component draws from a ``numpy.random.Generator`` backed by
    PCG64. PCG64 output for a given seed is fixed by numpy's stream-compatibility
    policy and is identical across platforms.
    """
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ContractViolation(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class FactoredActionSpace:
    """A joint action space split as first sub-action x second sub-action.

    Joint indices are row-major with the first sub-action as the major axis.
    """

    n_first: int
    n_second: int

    def __post_init__(self):
        if int(self.n_first) < 1 or int(self.n_second) < 1:
            raise ContractViolation(
                f"sub-space sizes must be positive, got ({self.n_first}, {self.n_second})"
            )

    @property
    def n_joint(self) -> int:
        return self.n_first * self.n_second

    @property
    def n_factored(self) -> int:
        """Total output heads needed when each sub-action gets its own network."""
        return self.n_first + self.n_second

    def check(self, a_first: int, a_second: int) -> None:
        if not (0 <= a_first < self.n_first and 0 <= a_second < self.n_second):
            raise ContractViolation(
                f"sub-actions ({a_first}, {a_second}) outside "
                f"[0, {self.n_first}) x [0, {self.n_second})"
            )

    def join(self, a_first: int, a_second: int) -> int:
        self.check(a_first, a_second)
        return int(a_first) * self.n_second + int(a_second)

    def split(self, joint: int) -> tuple[int, int]:
        if not 0 <= joint < self.n_joint:
            raise ContractViolation(f"joint index {joint} outside [0, {self.n_joint})")
        return divmod(int(joint), self.n_second)


def join_action(space: FactoredActionSpace, a_first: int, a_second: int) -> int:
    return space.join(a_first, a_second)


def split_action(space: FactoredActionSpace, joint: int) -> tuple[int, int]:
    return space.split(joint)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    a_first: int
    a_second: int
    reward: float
    next_state: np.ndarray
    terminal: bool = False

    def __post_init__(self):
        state = np.asarray(self.state, dtype=float)
        next_state = np.asarray(self.next_state, dtype=float)
        if state.shape != next_state.shape:
            raise ShapeError(f"state {state.shape} and next_state {next_state.shape} differ")
        object.__setattr__(self, "state", state)
        object.__setattr__(self, "next_state", next_state)

    def check(self, space: FactoredActionSpace) -> None:
        space.check(self.a_first, self.a_second)


class Batch(NamedTuple):
    """Column-stacked transitions; the array form learners consume."""

    states: np.ndarray
    a_first: np.ndarray
    a_second: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self):
        return len(self.rewards)

    @classmethod
    def from_transitions(cls, transitions) -> "Batch":
        transitions = list(transitions)
        return cls(
            np.stack([t.state for t in transitions]),
            np.array([t.a_first for t in transitions], dtype=np.int64),
            np.array([t.a_second for t in transitions], dtype=np.int64),
            np.array([t.reward for t in transitions], dtype=float),
            np.stack([t.next_state for t in transitions]),
            np.array([t.terminal for t in transitions], dtype=bool),
        )

    def transitions(self) -> list[Transition]:
        return [
            Transition(s, int(a1), int(a2), float(r), sp, bool(d))
            for s, a1, a2, r, sp, d in zip(*self)
        ]


class ReplayBuffer:
    """Fixed-capacity FIFO store of transitions with uniform sampling.

    Storage is a set of preallocated ring arrays sized on the first push.
    Sampling is uniform with replacement.
    """

    def __init__(self, capacity: int):
        if int(capacity) < 1:
            raise ContractViolation(f"capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.insert_count = 0
        self._arrays: Optional[Batch] = None

    def __len__(self) -> int:
        return min(self.insert_count, self.capacity)

    def _allocate(self, dim: int) -> None:
        c = self.capacity
        self._arrays = Batch(
            np.zeros((c, dim)),
            np.zeros(c, dtype=np.int64),
            np.zeros(c, dtype=np.int64),
            np.zeros(c),
            np.zeros((c, dim)),
            np.zeros(c, dtype=bool),
        )

    def push(self, t: Transition) -> None:
        if self._arrays is None:
            self._allocate(t.state.size)
        elif t.state.size != self._arrays.states.shape[1]:
            raise ShapeError(
                f"transition state dim {t.state.size} != buffer dim {self._arrays.states.shape[1]}"
            )
        i = self.insert_count % self.capacity
        arr = self._arrays
        arr.states[i] = t.state.ravel()
        arr.a_first[i] = t.a_first
        arr.a_second[i] = t.a_second
        arr.rewards[i] = t.reward
        arr.next_states[i] = t.next_state.ravel()
        arr.terminals[i] = t.terminal
        self.insert_count += 1

    def _order(self) -> np.ndarray:
        n = len(self)
        if self.insert_count <= self.capacity:
            return np.arange(n)
        return (np.arange(n) + self.insert_count) % self.capacity

    def contents(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        if self._arrays is None:
            return []
        return self._take(self._order()).transitions()

    def _take(self, idx: np.ndarray) -> Batch:
        return Batch(*(a[idx] for a in self._arrays))

    def sample_batch(self, n: int, rng: np.random.Generator) -> Batch:
        if len(self) == 0:
            raise EmptyBufferError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, len(self), size=int(n))
        return self._take(idx)

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        return self.sample_batch(n, rng).transitions()


def buffer_push(buffer: ReplayBuffer, t: Transition) -> None:
    buffer.push(t)


def buffer_sample(buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> list[Transition]:
    return buffer.sample(n, rng)


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear interpolation from ``start`` to ``end`` over ``decay_steps``, then flat."""

    start: float = 1.0
    end: float = 0.1
    decay_steps: int = 10_000

    def __post_init__(self):
        for name in ("start", "end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractViolation(f"{name} must lie in [0, 1], got {v}")
        if int(self.decay_steps) < 1:
            raise ContractViolation(f"decay_steps must be positive, got {self.decay_steps}")

    def __call__(self, step: int) -> float:
        if step >= self.decay_steps:
            return float(self.end)
        frac = max(step, 0) / self.decay_steps
        return float(self.start + frac * (self.end - self.start))


def epsilon_at(schedule: EpsilonSchedule, step: int) -> float:
    return schedule(step)

