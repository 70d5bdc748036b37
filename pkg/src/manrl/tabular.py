"""Table-based multi-action learning, joint-action baselines and exact solvers.

States are integer indices. A ``Transition`` consumed here carries the state
index in ``state[0]`` and the next state index in ``next_state[0]``; use
:func:`index_transition` to build one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np

from manrl.core import (
    ContractViolation,
    FactoredActionSpace,
    NumericError,
    Transition,
)


class ModelError(ValueError):
    """An explicit MDP whose kernel is not row-stochastic or is malformed."""


class DivergenceError(ValueError):
    pass


def index_transition(s: int, a_first: int, a_second: int, reward: float, s_next: int,
                     terminal: bool = False) -> Transition:
    return Transition(np.array([s], dtype=float), a_first, a_second, reward,
                      np.array([s_next], dtype=float), terminal)


def _indices(t: Transition) -> tuple[int, int]:
    return int(t.state[0]), int(t.next_state[0])


def _check_reward(r: float) -> float:
    r = float(r)
    if not np.isfinite(r):
        raise NumericError(f"non-finite reward {r}")
    return r


def _argmax(row: np.ndarray) -> int:
    # np.argmax returns the first maximum: lowest-index tie-break.
    return int(np.argmax(row))


@dataclass
class TabularMAN:
    """Pair of tables ``q_first[s, a1]`` and ``q_second[s, a1, a2]``."""

    n_states: int
    space: FactoredActionSpace
    alpha: float = 0.1
    gamma: float = 0.9
    q_first: np.ndarray = field(default=None, repr=False)
    q_second: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractViolation(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractViolation(f"gamma must lie in [0, 1], got {self.gamma}")
        n1, n2 = self.space.n_first, self.space.n_second
        if self.q_first is None:
            self.q_first = np.zeros((self.n_states, n1))
        if self.q_second is None:
            self.q_second = np.zeros((self.n_states, n1, n2))
        if self.q_first.shape != (self.n_states, n1) or self.q_second.shape != (self.n_states, n1, n2):
            raise ContractViolation("table shapes do not match the state count and action space")

    def _unpack(self, t: Transition) -> tuple[int, int, int, int, float]:
        s, sp = _indices(t)
        if not (0 <= s < self.n_states and 0 <= sp < self.n_states):
            raise ContractViolation(f"state index outside [0, {self.n_states})")
        self.space.check(t.a_first, t.a_second)
        return s, t.a_first, t.a_second, sp, _check_reward(t.reward)

    def target_second(self, t: Transition) -> float:
        """``r + gamma * max_b Q1(s', b)``; just ``r`` at a terminal."""
        s, a1, a2, sp, r = self._unpack(t)
        if t.terminal:
            return r
        return r + self.gamma * float(np.max(self.q_first[sp]))

    def target_first(self, t: Transition) -> float:
        """``r + gamma * max_c Q2(s', a1, c)`` with ``a1`` the stored sub-action."""
        s, a1, a2, sp, r = self._unpack(t)
        if t.terminal:
            return r
        return r + self.gamma * float(np.max(self.q_second[sp, a1]))

    def target_first_self(self, t: Transition) -> float:
        s, a1, a2, sp, r = self._unpack(t)
        if t.terminal:
            return r
        return r + self.gamma * float(self.q_first[sp, a1])

    def update_second(self, t: Transition) -> None:
        s, a1, a2, _, _ = self._unpack(t)
        y = self.target_second(t)
        q = self.q_second[s, a1, a2]
        self.q_second[s, a1, a2] = (1.0 - self.alpha) * q + self.alpha * y

    def update_first(self, t: Transition) -> None:
        s, a1, _, _, _ = self._unpack(t)
        y = self.target_first(t)
        q = self.q_first[s, a1]
        self.q_first[s, a1] = (1.0 - self.alpha) * q + self.alpha * y

    def update_first_self(self, t: Transition) -> None:
        """Ablation only: bootstrap ``Q1`` from ``Q1(s', a1)`` instead of ``Q2``."""
        s, a1, _, _, _ = self._unpack(t)
        y = self.target_first_self(t)
        q = self.q_first[s, a1]
        self.q_first[s, a1] = (1.0 - self.alpha) * q + self.alpha * y

    def update(self, t: Transition, first_rule: str = "cross") -> None:
        """Apply both updates from the pre-update tables."""
        if first_rule == "cross":
            y1 = self.target_first(t)
        elif first_rule == "self":
            y1 = self.target_first_self(t)
        else:
            raise ContractViolation(f"unknown first-table rule {first_rule!r}")
        y2 = self.target_second(t)
        s, a1, a2, _, _ = self._unpack(t)
        self.q_second[s, a1, a2] += self.alpha * (y2 - self.q_second[s, a1, a2])
        self.q_first[s, a1] += self.alpha * (y1 - self.q_first[s, a1])

    def greedy(self, s: int) -> tuple[int, int]:
        a1 = _argmax(self.q_first[s])
        return a1, _argmax(self.q_second[s, a1])

    def epsilon_greedy(self, s: int, eps: float, rng: np.random.Generator) -> tuple[int, int]:
        return epsilon_greedy_pair(self.space, lambda: self.greedy(s), eps, rng)

    def greedy_policy(self) -> np.ndarray:
        """Joint action index chosen greedily in every state."""
        return np.array([self.space.join(*self.greedy(s)) for s in range(self.n_states)])

    def coupling_residual(self, mask: Optional[np.ndarray] = None) -> float:
        """``max |Q1(s, a1) - max_c Q2(s, a1, c)|`` over ``(s, a1)`` (optionally masked)."""
        gap = np.abs(self.q_first - self.q_second.max(axis=2))
        if mask is not None:
            gap = gap[mask]
        return float(gap.max(initial=0.0))


def epsilon_greedy_pair(space: FactoredActionSpace, greedy, eps: float,
                        rng: np.random.Generator) -> tuple[int, int]:
    """One coin for exploration; when exploring both sub-actions are independent uniforms."""
    if not 0.0 <= eps <= 1.0:
        raise ContractViolation(f"eps must lie in [0, 1], got {eps}")
    if rng.random() < eps:
        return int(rng.integers(space.n_first)), int(rng.integers(space.n_second))
    return greedy()


def man_update_second(m: TabularMAN, t: Transition) -> None:
    m.update_second(t)


def man_update_first(m: TabularMAN, t: Transition) -> None:
    m.update_first(t)


def man_update_first_variant_eq3(m: TabularMAN, t: Transition) -> None:
    m.update_first_self(t)


def man_greedy(m: TabularMAN, s: int) -> tuple[int, int]:
    return m.greedy(s)


def man_epsilon_greedy(m: TabularMAN, s: int, eps: float, rng: np.random.Generator) -> tuple[int, int]:
    return m.epsilon_greedy(s, eps, rng)


@dataclass
class TabularJointQ:
    """Q-learning over the joint action index; ``double=True`` keeps two tables."""

    n_states: int
    space: FactoredActionSpace
    alpha: float = 0.1
    gamma: float = 0.9
    double: bool = False
    q: np.ndarray = field(default=None, repr=False)
    q_b: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.q is None:
            self.q = np.zeros((self.n_states, self.space.n_joint))
        if self.double and self.q_b is None:
            self.q_b = np.zeros_like(self.q)

    def values(self) -> np.ndarray:
        """Action values used for acting: the mean of both tables in double mode."""
        if self.double:
            return 0.5 * (self.q + self.q_b)
        return self.q

    def update(self, t: Transition, mode: str = "q_learning",
               rng: Optional[np.random.Generator] = None) -> None:
        s, sp = _indices(t)
        if not (0 <= s < self.n_states and 0 <= sp < self.n_states):
            raise ContractViolation(f"state index outside [0, {self.n_states})")
        a = self.space.join(t.a_first, t.a_second)
        r = _check_reward(t.reward)
        if mode == "q_learning":
            y = r if t.terminal else r + self.gamma * float(np.max(self.q[sp]))
            self.q[s, a] += self.alpha * (y - self.q[s, a])
        elif mode == "double_q":
            if self.q_b is None:
                self.q_b = self.q.copy()
            if rng is None:
                raise ContractViolation("double_q mode needs a random stream for the table coin-flip")
            upd, ev = (self.q, self.q_b) if rng.random() < 0.5 else (self.q_b, self.q)
            y = r if t.terminal else r + self.gamma * float(ev[sp, _argmax(upd[sp])])
            upd[s, a] += self.alpha * (y - upd[s, a])
        else:
            raise ContractViolation(f"unknown mode {mode!r}")

    def greedy(self, s: int) -> tuple[int, int]:
        return self.space.split(_argmax(self.values()[s]))

    def epsilon_greedy(self, s: int, eps: float, rng: np.random.Generator) -> tuple[int, int]:
        return epsilon_greedy_pair(self.space, lambda: self.greedy(s), eps, rng)

    def greedy_policy(self) -> np.ndarray:
        return np.argmax(self.values(), axis=1)


def joint_q_update(b: TabularJointQ, t: Transition, mode: str = "q_learning",
                   rng: Optional[np.random.Generator] = None) -> None:
    b.update(t, mode, rng)


# ---------------------------------------------------------------------------
# Explicit models and exact solutions


@dataclass
class ExplicitMDP:
    """Finite MDP with factored actions.

    ``P[s, a1, a2, s']`` is the kernel and ``R[s, a1, a2]`` the expected reward.
    """

    P: np.ndarray
    R: np.ndarray
    gamma: float = 0.9

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if self.P.ndim != 4 or self.P.shape[0] != self.P.shape[3]:
            raise ModelError(f"kernel must have shape (S, A1, A2, S), got {self.P.shape}")
        if self.R.shape != self.P.shape[:3]:
            raise ModelError(f"reward shape {self.R.shape} != {self.P.shape[:3]}")
        if np.any(self.P < 0) or not np.allclose(self.P.sum(axis=3), 1.0, rtol=0, atol=1e-9):
            raise ModelError("transition kernel rows must be non-negative and sum to 1 within 1e-9")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def space(self) -> FactoredActionSpace:
        return FactoredActionSpace(self.P.shape[1], self.P.shape[2])

    def joint_kernel(self) -> tuple[np.ndarray, np.ndarray]:
        S = self.n_states
        return self.P.reshape(S, -1, S), self.R.reshape(S, -1)


@dataclass
class ExactSolution:
    q_star: np.ndarray
    v_star: np.ndarray
    greedy_policy: np.ndarray
    residuals: list = field(default_factory=list)
    sweeps: int = 0


def bellman_residual(mdp: ExplicitMDP, q: np.ndarray, gamma: float) -> float:
    P, R = mdp.joint_kernel()
    tq = R + gamma * P @ q.max(axis=1)
    return float(np.max(np.abs(q - tq)))


def value_iteration(mdp: ExplicitMDP, gamma: Optional[float] = None, tol: float = 1e-10,
                    max_sweeps: int = 1_000_000) -> ExactSolution:
    """Iterate the Bellman optimality operator on joint-action values until the
    sup-norm residual ``max |Q - TQ|`` is at most ``tol``."""
    gamma = mdp.gamma if gamma is None else float(gamma)
    if not 0.0 <= gamma < 1.0:
        raise DivergenceError(f"value iteration needs gamma < 1 without a terminal guarantee, got {gamma}")
    P, R = mdp.joint_kernel()
    q = np.zeros_like(R)
    residuals = []
    for sweep in range(1, max_sweeps + 1):
        tq = R + gamma * P @ q.max(axis=1)
        res = float(np.max(np.abs(tq - q)))
        residuals.append(res)
        q = tq
        if res <= tol * (1.0 - gamma):
            break
    else:
        raise DivergenceError(f"no convergence within {max_sweeps} sweeps")
    # |Q_k - T Q_k| <= gamma * |Q_{k-1} - Q_k|; the stop rule above keeps that below tol.
    final = bellman_residual(mdp, q, gamma)
    residuals.append(final)
    return ExactSolution(q, q.max(axis=1), np.argmax(q, axis=1), residuals, sweep)


def policy_evaluation(mdp: ExplicitMDP, policy: np.ndarray, gamma: Optional[float] = None) -> np.ndarray:
    """Exact ``V^pi`` for a deterministic joint-action policy by a linear solve."""
    gamma = mdp.gamma if gamma is None else float(gamma)
    P, R = mdp.joint_kernel()
    idx = np.arange(mdp.n_states)
    policy = np.asarray(policy, dtype=np.int64)
    Ppi = P[idx, policy]
    rpi = R[idx, policy]
    return np.linalg.solve(np.eye(mdp.n_states) - gamma * Ppi, rpi)


def value_gap(mdp: ExplicitMDP, policy: np.ndarray, solution: ExactSolution) -> float:
    """``max_s (V*(s) - V^pi(s)) / max_s |V*(s)|``: policy suboptimality relative to the value scale."""
    v_pi = policy_evaluation(mdp, policy)
    scale = max(float(np.max(np.abs(solution.v_star))), 1e-12)
    return float(np.max(solution.v_star - v_pi)) / scale


# Text format: header ``S A1 A2 gamma``, then one ``s a1 a2 s' prob reward`` line
# per non-zero kernel entry. Reward is read as the probability-weighted mean over
# the lines of each (s, a1, a2).


def write_mdp_text(mdp: ExplicitMDP, path) -> None:
    S, A1, A2, _ = mdp.P.shape
    lines = [f"{S} {A1} {A2} {float(mdp.gamma)!r}"]
    for s, a1, a2, sp in zip(*np.nonzero(mdp.P)):
        lines.append(f"{s} {a1} {a2} {sp} {float(mdp.P[s, a1, a2, sp])!r} {float(mdp.R[s, a1, a2])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_mdp_text(path) -> ExplicitMDP:
    rows = [ln.split() for ln in Path(path).read_text().splitlines()
            if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows or len(rows[0]) != 4:
        raise ModelError("missing header line 'S A1 A2 gamma'")
    try:
        S, A1, A2 = (int(v) for v in rows[0][:3])
        gamma = float(rows[0][3])
    except ValueError as exc:
        raise ModelError(f"bad header: {' '.join(rows[0])}") from exc
    P = np.zeros((S, A1, A2, S))
    Rw = np.zeros((S, A1, A2))
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 6:
            raise ModelError(f"line {lineno}: expected 's a1 a2 s_next prob reward'")
        s, a1, a2, sp = (int(v) for v in row[:4])
        p, r = float(row[4]), float(row[5])
        if not (0 <= s < S and 0 <= sp < S and 0 <= a1 < A1 and 0 <= a2 < A2):
            raise ModelError(f"line {lineno}: index out of range")
        P[s, a1, a2, sp] += p
        Rw[s, a1, a2] += p * r
    mass = P.sum(axis=3)
    if not np.allclose(mass, 1.0, rtol=0, atol=1e-9):
        bad = np.argwhere(np.abs(mass - 1.0) > 1e-9)[0]
        raise ModelError(f"probabilities for (s, a1, a2) = {tuple(bad)} sum to {mass[tuple(bad)]}")
    R = np.divide(Rw, mass, out=np.zeros_like(Rw), where=mass > 0)
    return ExplicitMDP(P, R, gamma)


# ---------------------------------------------------------------------------
# Fast simulation-based training on explicit MDPs


@dataclass
class TabularRunResult:
    learner: object
    visits: np.ndarray  # (S, A1) visit counts of the first-stage pairs
    steps: int


def _draws(rng: np.random.Generator, steps: int) -> tuple[np.ndarray, ...]:
    # Fixed per-step draw layout: explore coin, two uniform sub-actions,
    # next-state uniform, restart uniform, double-Q coin.
    u = rng.random((6, steps))
    return tuple(u)


@numba.njit(cache=True)
def _man_kernel(cdf, R, gamma, alpha, eps, horizon, q1, q2, visits, start, elapsed,
                u_explore, u_a1, u_a2, u_next, u_restart, first_rule):
    S, A1, A2, _ = cdf.shape
    s = start
    t_in_episode = elapsed
    for t in range(u_explore.shape[0]):
        if u_explore[t] < eps:
            a1 = min(int(u_a1[t] * A1), A1 - 1)
            a2 = min(int(u_a2[t] * A2), A2 - 1)
        else:
            a1 = np.argmax(q1[s])
            a2 = np.argmax(q2[s, a1])
        sp = np.searchsorted(cdf[s, a1, a2], u_next[t], side="right")
        if sp >= S:
            sp = S - 1
        r = R[s, a1, a2]
        if first_rule == 0:
            y1 = r + gamma * np.max(q2[sp, a1])
        else:
            y1 = r + gamma * q1[sp, a1]
        y2 = r + gamma * np.max(q1[sp])
        q2[s, a1, a2] += alpha * (y2 - q2[s, a1, a2])
        q1[s, a1] += alpha * (y1 - q1[s, a1])
        visits[s, a1] += 1
        t_in_episode += 1
        if horizon > 0 and t_in_episode >= horizon:
            s = min(int(u_restart[t] * S), S - 1)
            t_in_episode = 0
        else:
            s = sp
    return s, t_in_episode


@numba.njit(cache=True)
def _joint_kernel(cdf, R, gamma, alpha, eps, horizon, qa, qb, double, visits, start, elapsed,
                  u_explore, u_a1, u_a2, u_next, u_restart, u_coin):
    S, A1, A2, _ = cdf.shape
    s = start
    t_in_episode = elapsed
    for t in range(u_explore.shape[0]):
        if u_explore[t] < eps:
            a1 = min(int(u_a1[t] * A1), A1 - 1)
            a2 = min(int(u_a2[t] * A2), A2 - 1)
        else:
            if double:
                a = np.argmax(0.5 * (qa[s] + qb[s]))
            else:
                a = np.argmax(qa[s])
            a1 = a // A2
            a2 = a % A2
        a = a1 * A2 + a2
        sp = np.searchsorted(cdf[s, a1, a2], u_next[t], side="right")
        if sp >= S:
            sp = S - 1
        r = R[s, a1, a2]
        if double:
            if u_coin[t] < 0.5:
                qa[s, a] += alpha * (r + gamma * qb[sp, np.argmax(qa[sp])] - qa[s, a])
            else:
                qb[s, a] += alpha * (r + gamma * qa[sp, np.argmax(qb[sp])] - qb[s, a])
        else:
            qa[s, a] += alpha * (r + gamma * np.max(qa[sp]) - qa[s, a])
        visits[s, a1] += 1
        t_in_episode += 1
        if horizon > 0 and t_in_episode >= horizon:
            s = min(int(u_restart[t] * S), S - 1)
            t_in_episode = 0
        else:
            s = sp
    return s, t_in_episode


def train_on_mdp(
    mdp: ExplicitMDP,
    kind: str,
    steps: int,
    rng: np.random.Generator,
    alpha: float = 0.1,
    eps: float = 0.2,
    horizon: int = 50,
    first_rule: str = "cross",
    chunk: int = 1 << 16,
) -> TabularRunResult:
    """Simulate ``steps`` interactions with a fixed-epsilon learner.

    ``kind`` is ``man``, ``q_learning`` or ``double_q``. Episodes start in a
    uniformly random state and are truncated (not terminated) after
    ``horizon`` steps so every state keeps being visited; ``horizon=0`` runs
    one continuing stream from state 0.
    """
    S = mdp.n_states
    space = mdp.space
    cdf = np.cumsum(mdp.P, axis=3)
    cdf[..., -1] = 1.0
    visits = np.zeros((S, space.n_first), dtype=np.int64)
    s = int(rng.integers(S)) if horizon > 0 else 0
    if kind == "man":
        learner = TabularMAN(S, space, alpha, mdp.gamma)
        rule = {"cross": 0, "self": 1}[first_rule]
    elif kind in ("q_learning", "double_q"):
        learner = TabularJointQ(S, space, alpha, mdp.gamma, double=kind == "double_q")
    else:
        raise ContractViolation(f"unknown tabular learner {kind!r}")
    done = k = 0
    while done < steps:
        n = min(chunk, steps - done)
        u_explore, u_a1, u_a2, u_next, u_restart, u_coin = _draws(rng, n)
        if kind == "man":
            s, k = _man_kernel(cdf, mdp.R, mdp.gamma, alpha, eps, horizon, learner.q_first,
                               learner.q_second, visits, s, k, u_explore, u_a1, u_a2, u_next,
                            u_restart, rule)
        else:
            qb = learner.q_b if learner.double else learner.q
            s, k = _joint_kernel(cdf, mdp.R, mdp.gamma, alpha, eps, horizon, learner.q, qb,
                                 learner.double, visits, s, k, u_explore, u_a1, u_a2, u_next,
                              u_restart, u_coin)
        done += n
    return TabularRunResult(learner, visits, steps)


def train_on_mdp_reference(mdp: ExplicitMDP, steps: int, rng: np.random.Generator,
                           alpha: float = 0.1, eps: float = 0.2, horizon: int = 50,
                           first_rule: str = "cross", chunk: int = 1 << 16) -> TabularRunResult:
    """Straight-line Python twin of :func:`train_on_mdp` for ``kind='man'``.

    Consumes the same random draws and applies ``TabularMAN.update``; used to
    check the compiled kernel.
    """
    S = mdp.n_states
    space = mdp.space
    cdf = np.cumsum(mdp.P, axis=3)
    cdf[..., -1] = 1.0
    m = TabularMAN(S, space, alpha, mdp.gamma)
    visits = np.zeros((S, space.n_first), dtype=np.int64)
    s = int(rng.integers(S)) if horizon > 0 else 0
    parts = [_draws(rng, min(chunk, steps - i)) for i in range(0, steps, chunk)]
    u_explore, u_a1, u_a2, u_next, u_restart, _ = (np.concatenate(c) for c in zip(*parts))
    k = 0
    for t in range(steps):
        if u_explore[t] < eps:
            a1 = min(int(u_a1[t] * space.n_first), space.n_first - 1)
            a2 = min(int(u_a2[t] * space.n_second), space.n_second - 1)
        else:
            a1, a2 = m.greedy(s)
        sp = min(int(np.searchsorted(cdf[s, a1, a2], u_next[t], side="right")), S - 1)
        m.update(index_transition(s, a1, a2, mdp.R[s, a1, a2], sp), first_rule)
        visits[s, a1] += 1
        k += 1
        if horizon > 0 and k >= horizon:
            s = min(int(u_restart[t] * S), S - 1)
            k = 0
        else:
            s = sp
    return TabularRunResult(m, visits, steps)
