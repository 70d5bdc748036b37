"""Feedforward value networks with hand-written backprop.

Hidden layers use ReLU, the output layer is linear. Weights are stored as
``(fan_in, fan_out)`` matrices so a batch forward pass is ``x @ W + b``.
"""

from __future__ import annotations

import copy
import io
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from manrl.core import ContractViolation, NumericError, ShapeError

CHECKPOINT_MAGIC = b"MANRLNET"
CHECKPOINT_VERSION = 1


class MLP:
    def __init__(
        self,
        layer_sizes: Sequence[int],
        rng: Optional[np.random.Generator] = None,
        bias: bool = True,
    ):
        sizes = [int(n) for n in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"need at least input and output sizes, got {layer_sizes}")
        self.layer_sizes = sizes
        self.bias = bias
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "MLP":
        return copy.deepcopy(self)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in or x.ndim > 2:
            raise ShapeError(f"expected input of width {self.n_in}, got shape {x.shape}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Q-values for a single input vector or a batch of row vectors."""
        h = self._check_input(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w
            if self.bias:
                h = h + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    __call__ = forward

    def _forward_cache(self, x: np.ndarray) -> list[np.ndarray]:
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w
            if self.bias:
                h = h + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def mse_grad(
        self, inputs: np.ndarray, actions: np.ndarray, targets: np.ndarray
    ) -> tuple[float, list[np.ndarray]]:
        """Loss and gradients of ``mean_j (target_j - Q(x_j)[a_j])**2``.

        Targets are constants (semi-gradient). Only the selected output of each
        sample carries error back through the network.
        """
        x = self._check_input(inputs)
        if x.ndim == 1:
            x = x[None, :]
        actions = np.asarray(actions, dtype=np.int64).reshape(-1)
        targets = np.asarray(targets, dtype=float).reshape(-1)
        n = x.shape[0]
        if actions.shape[0] != n or targets.shape[0] != n:
            raise ShapeError(
                f"batch sizes disagree: inputs {n}, actions {actions.shape[0]}, targets {targets.shape[0]}"
            )
        if not np.all(np.isfinite(targets)):
            raise NumericError("non-finite regression targets")
        if np.any(actions < 0) or np.any(actions >= self.n_out):
            raise ContractViolation("action index outside the output layer")

        acts = self._forward_cache(x)
        rows = np.arange(n)
        err = acts[-1][rows, actions] - targets
        loss = float(np.mean(err**2))

        delta = np.zeros_like(acts[-1])
        delta[rows, actions] = 2.0 * err / n
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0) if self.bias else np.zeros_like(self.biases[i])
            if i > 0:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0)
        return loss, grads


def forward(net: MLP, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def grad_mse(net: MLP, inputs, action_indices, targets) -> list[np.ndarray]:
    return net.mse_grad(inputs, action_indices, targets)[1]


def mse_loss(net: MLP, inputs, action_indices, targets) -> float:
    q = np.atleast_2d(net.forward(inputs))
    a = np.asarray(action_indices, dtype=np.int64).reshape(-1)
    return float(np.mean((np.asarray(targets, dtype=float).reshape(-1) - q[np.arange(len(a)), a]) ** 2))


@dataclass
class OptimizerState:
    """SGD or bias-corrected Adam over a fixed list of parameter arrays."""

    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: Optional[float] = None
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractViolation(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ContractViolation(f"learning rate must be positive, got {self.lr}")

    def apply(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ShapeError(f"{len(grads)} gradients for {len(params)} parameters")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient")
        if self.max_grad_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / norm) for g in grads]

        self.step += 1
        if self.kind == "sgd":
            for p, g in zip(params, grads):
                p -= self.lr * g
            return

        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step
        c2 = 1.0 - b2**self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(opt: OptimizerState, net: MLP, grads: list[np.ndarray]) -> None:
    opt.apply(net.parameters(), grads)
    for p in net.parameters():
        if not np.all(np.isfinite(p)):
            raise NumericError("parameters became non-finite after an optimizer step")


class TargetPair:
    """An online network and its frozen copy used for bootstrap targets."""

    def __init__(self, online: MLP, target: Optional[MLP] = None):
        self.online = online
        self.target = online.copy() if target is None else target
        if self.target.layer_sizes != online.layer_sizes or self.target.bias != online.bias:
            raise ShapeError("online and target architectures differ")

    def sync_hard(self) -> None:
        for t, o in zip(self.target.parameters(), self.online.parameters()):
            t[...] = o

    def sync_soft(self, tau: float) -> None:
        if not 0.0 < tau <= 1.0:
            raise ContractViolation(f"tau must lie in (0, 1], got {tau}")
        if tau == 1.0:
            self.sync_hard()
            return
        for t, o in zip(self.target.parameters(), self.online.parameters()):
            t *= 1.0 - tau
            t += tau * o


def sync_hard(pair: TargetPair) -> None:
    pair.sync_hard()


def sync_soft(pair: TargetPair, tau: float) -> None:
    pair.sync_soft(tau)


# Checkpoint layout (little-endian):
#   8 bytes   magic "MANRLNET"
#   u32       format version
#   u32       bias flag (0/1)
#   u32       number of layer sizes L
#   L x u32   layer sizes
#   then for each layer: W as fan_in*fan_out float64 row-major, b as fan_out float64


def dump_mlp(net: MLP) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<III", CHECKPOINT_VERSION, int(net.bias), len(net.layer_sizes)))
    buf.write(struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes))
    for w, b in zip(net.weights, net.biases):
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return buf.getvalue()


def load_mlp(data: bytes) -> MLP:
    view = memoryview(data)
    if bytes(view[:8]) != CHECKPOINT_MAGIC:
        raise ValueError("not a network checkpoint (bad magic)")
    version, bias, n = struct.unpack_from("<III", view, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 20
    sizes = list(struct.unpack_from(f"<{n}I", view, off))
    off += 4 * n
    net = MLP(sizes, bias=bool(bias))
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        nw = fan_in * fan_out
        net.weights[i] = np.frombuffer(view, dtype="<f8", count=nw, offset=off).reshape(fan_in, fan_out).astype(float)
        off += 8 * nw
        net.biases[i] = np.frombuffer(view, dtype="<f8", count=fan_out, offset=off).astype(float)
        off += 8 * fan_out
    if off != len(data):
        raise ValueError("trailing bytes in network checkpoint")
    return net


def save_mlp(net: MLP, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_mlp(net))


def read_mlp(path) -> MLP:
    with open(path, "rb") as fh:
        return load_mlp(fh.read())


def finite_difference_grads(
    net: MLP, inputs, actions, targets, step: float = 1e-5
) -> list[np.ndarray]:
    """Central-difference gradients of the MSE loss, one parameter at a time."""
    out = []
    for p in net.parameters():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            hi = mse_loss(net, inputs, actions, targets)
            flat[k] = orig - step
            lo = mse_loss(net, inputs, actions, targets)
            flat[k] = orig
            gflat[k] = (hi - lo) / (2 * step)
        out.append(g)
    return out


@dataclass
class GradCheckResult:
    layer_sizes: list
    batch: int
    max_rel_error: float
    passed: bool


def gradcheck_suite(
    seed: int = 0,
    n_architectures: int = 20,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-7,
    step: float = 1e-5,
) -> list[GradCheckResult]:
    """Compare analytic and central-difference gradients on random small nets.

    An entry passes when ``|a - f| <= rel_tol * max(|a|, |f|)`` or
    ``|a - f| <= abs_floor`` for every parameter component.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    results = []
    for _ in range(n_architectures):
        depth = int(rng.integers(0, 4))
        sizes = [int(rng.integers(1, 9))]
        sizes += [int(rng.integers(1, 17)) for _ in range(depth)]
        sizes += [int(rng.integers(1, 7))]
        net = MLP(sizes, rng=rng)
        for b in net.biases:
            b[...] = rng.normal(scale=0.1, size=b.shape)
        batch = int(rng.integers(1, 9))
        x = rng.normal(size=(batch, sizes[0]))
        a = rng.integers(0, sizes[-1], size=batch)
        y = rng.normal(size=batch)
        _, analytic = net.mse_grad(x, a, y)
        numeric = finite_difference_grads(net, x, a, y, step=step)
        worst = 0.0
        ok = True
        for ga, gn in zip(analytic, numeric):
            diff = np.abs(ga - gn)
            scale = np.maximum(np.abs(ga), np.abs(gn))
            rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), 0.0)
            bad = (diff > abs_floor) & (diff > rel_tol * scale)
            ok = ok and not bool(np.any(bad))
            worst = max(worst, float(np.max(np.where(scale > abs_floor, rel, 0.0), initial=0.0)))
        results.append(GradCheckResult(sizes, batch, worst, ok))
    return results
