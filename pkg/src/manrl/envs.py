"""Environments: discrete block stacking and random factored MDPs.

Every environment exposes ``obs_dim``, ``space`` (a FactoredActionSpace),
``horizon`` (episode cap), ``reset()`` and ``step(a_first, a_second)`` which
returns ``(next_obs, reward, terminal)``. Stepping a finished episode raises
:class:`EpisodeOverError` until the next reset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from manrl.core import ContractViolation, FactoredActionSpace
from manrl.tabular import ExplicitMDP, write_mdp_text

N_CELLS = 16
N_POSITIONS = 14

# (width in cells, height in units)
BLOCK_CATALOG: tuple[tuple[int, int], ...] = ((1, 1), (3, 1), (3, 2), (3, 3))


class EpisodeOverError(RuntimeError):
    pass


class Env(Protocol):
    obs_dim: int
    space: FactoredActionSpace
    horizon: int

    def reset(self) -> np.ndarray: ...

    def step(self, a_first: int, a_second: int) -> tuple[np.ndarray, float, bool]: ...


def bumpiness(heights) -> float:
    """Population variance of the column heights."""
    return float(np.var(np.asarray(heights, dtype=float)))


@dataclass
class HeightMap:
    heights: np.ndarray = field(default_factory=lambda: np.zeros(N_CELLS, dtype=np.int64))
    blocks_placed: int = 0
    holes: int = 0
    occupied: int = 0  # unit cells covered by blocks

    def copy(self) -> "HeightMap":
        return HeightMap(self.heights.copy(), self.blocks_placed, self.holes, self.occupied)

    @property
    def max_height(self) -> int:
        return int(self.heights.max())

    @property
    def bumpiness(self) -> float:
        return bumpiness(self.heights)


def footprint(block_type: int, position: int) -> tuple[int, int]:
    """Inclusive cell range covered by a block centred on cell ``position + 1``."""
    width = BLOCK_CATALOG[block_type][0]
    centre = position + 1
    half = width // 2
    return centre - half, centre + half


def place_block(hm: HeightMap, block_type: int, position: int) -> tuple[HeightMap, int]:
    """Drop a rigid block onto ``hm``; returns the new map and the holes it sealed."""
    if not 0 <= block_type < len(BLOCK_CATALOG):
        raise ContractViolation(f"block type {block_type} outside [0, {len(BLOCK_CATALOG)})")
    if not 0 <= position < N_POSITIONS:
        raise ContractViolation(f"position {position} outside [0, {N_POSITIONS})")
    width, height = BLOCK_CATALOG[block_type]
    lo, hi = footprint(block_type, position)
    out = hm.copy()
    cols = out.heights[lo:hi + 1]
    rest = int(cols.max())
    new_holes = int(np.sum(rest - cols))
    cols[...] = rest + height
    out.holes += new_holes
    out.occupied += width * height
    out.blocks_placed += 1
    return out, new_holes


@dataclass(frozen=True)
class RewardWeights:
    height: float = 1.0
    bumpiness: float = 0.5
    holes: float = 0.25


def stack_reward(before: HeightMap, after: HeightMap, weights: RewardWeights = RewardWeights()) -> float:
    d_height = after.max_height - before.max_height
    d_bump = after.bumpiness - before.bumpiness
    new_holes = after.holes - before.holes
    return -weights.height * d_height - weights.bumpiness * d_bump - weights.holes * new_holes


class BlockStacking:
    """Sixteen-column stacking area; sub-actions are (block type, position)."""

    obs_dim = N_CELLS

    def __init__(self, horizon: int = 20, height_cap: int = 24,
                 weights: RewardWeights = RewardWeights()):
        if horizon < 1 or height_cap < 1:
            raise ContractViolation("horizon and height_cap must be positive")
        self.space = FactoredActionSpace(len(BLOCK_CATALOG), N_POSITIONS)
        self.horizon = int(horizon)
        self.height_cap = int(height_cap)
        self.weights = weights
        self.map = HeightMap()
        self.done = False
        self.last_new_holes = 0

    def observe(self) -> np.ndarray:
        return self.map.heights.astype(float)

    def reset(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        self.map = HeightMap()
        self.done = False
        self.last_new_holes = 0
        return self.observe()

    def step(self, a_first: int, a_second: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise EpisodeOverError("episode finished; call reset()")
        before = self.map
        after, self.last_new_holes = place_block(before, int(a_first), int(a_second))
        reward = stack_reward(before, after, self.weights)
        self.map = after
        self.done = after.blocks_placed >= self.horizon or after.max_height > self.height_cap
        return self.observe(), reward, self.done


def stack_reset(env: BlockStacking) -> np.ndarray:
    return env.reset()


def stack_step(env: BlockStacking, a_first: int, a_second: int):
    return env.step(a_first, a_second)


# ---------------------------------------------------------------------------


@dataclass
class RandomFactoredMDP(ExplicitMDP):
    seed: int = 0
    sparsity: float = 0.0

    def export(self, path) -> None:
        write_mdp_text(self, path)


def mdp_generate(seed: int, S: int, n_first: int, n_second: int, sparsity: float = 0.5,
                 gamma: float = 0.9) -> RandomFactoredMDP:
    """Seeded random factored MDP.

    Each kernel row keeps every next state independently with probability
    ``1 - sparsity`` (at least one survives), with uniform weights normalised to
    one. Rewards are uniform on [-1, 1].
    """
    if S < 2 or n_first < 2 or n_second < 2:
        raise ContractViolation(f"degenerate sizes S={S}, n_first={n_first}, n_second={n_second}")
    if not 0.0 <= sparsity < 1.0:
        raise ContractViolation(f"sparsity must lie in [0, 1), got {sparsity}")
    rng = np.random.Generator(np.random.PCG64(seed))
    shape = (S, n_first, n_second, S)
    w = rng.random(shape)
    keep = rng.random(shape) >= sparsity
    forced = rng.integers(S, size=shape[:3])
    np.put_along_axis(keep, forced[..., None], True, axis=3)
    w = np.where(keep, w + 1e-3, 0.0)
    P = w / w.sum(axis=3, keepdims=True)
    R = rng.uniform(-1.0, 1.0, size=shape[:3])
    return RandomFactoredMDP(P, R, gamma, seed=seed, sparsity=sparsity)


def mdp_step(mdp: ExplicitMDP, s: int, a_first: int, a_second: int,
             rng: np.random.Generator) -> tuple[int, float, bool]:
    mdp.space.check(a_first, a_second)
    if not 0 <= s < mdp.n_states:
        raise ContractViolation(f"state {s} outside [0, {mdp.n_states})")
    row = np.cumsum(mdp.P[s, a_first, a_second])
    sp = min(int(np.searchsorted(row, rng.random(), side="right")), mdp.n_states - 1)
    # Zero-probability states are never selected: skip entries that did not add mass.
    while mdp.P[s, a_first, a_second, sp] == 0.0:
        sp -= 1
    return sp, float(mdp.R[s, a_first, a_second]), False


class MdpEnv:
    """Episodic wrapper over an explicit MDP with one-hot observations.

    Episodes start in a uniformly random state and are cut after ``horizon``
    steps; the cut is a truncation, so ``terminal`` is always false.
    """

    def __init__(self, mdp: ExplicitMDP, rng: np.random.Generator, horizon: int = 50):
        self.mdp = mdp
        self.rng = rng
        self.space = mdp.space
        self.obs_dim = mdp.n_states
        self.horizon = int(horizon)
        self.state = 0
        self.t = 0
        self.done = True

    def observe(self) -> np.ndarray:
        obs = np.zeros(self.obs_dim)
        obs[self.state] = 1.0
        return obs

    def reset(self) -> np.ndarray:
        self.state = int(self.rng.integers(self.mdp.n_states))
        self.t = 0
        self.done = False
        return self.observe()

    def step(self, a_first: int, a_second: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise EpisodeOverError("episode finished; call reset()")
        self.state, r, terminal = mdp_step(self.mdp, self.state, a_first, a_second, self.rng)
        self.t += 1
        self.done = terminal or self.t >= self.horizon
        return self.observe(), r, terminal


TRACE_HEADER = "# episode step a1 a2 reward max_height bumpiness holes"


class TraceWriter:
    """Plain-text per-step episode log, one whitespace-separated line per step."""

    def __init__(self, fh):
        self.fh = fh
        fh.write(TRACE_HEADER + "\n")

    def write(self, episode: int, step: int, a1: int, a2: int, reward: float,
              max_height: int, bump: float, holes: int) -> None:
        self.fh.write(f"{episode} {step} {a1} {a2} {float(reward)!r} {max_height} {float(bump)!r} {holes}\n")
