"""Compare tabular learners against value iteration on many random factored MDPs.

For each learner prints how many MDPs end with a greedy policy within 1% of
V*, and for MAN-style learners the coupling residual max |Q1 - max Q2| over
visited (state, first sub-action) pairs.
"""

import argparse

import numpy as np

from manrl.core import make_rng
from manrl.envs import mdp_generate
from manrl.tabular import train_on_mdp, value_gap, value_iteration

LEARNERS = {
    "man": dict(kind="man", first_rule="cross"),
    "man_self": dict(kind="man", first_rule="self"),
    "q_learning": dict(kind="q_learning"),
    "double_q": dict(kind="double_q"),
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--mdps", type=int, default=100)
    p.add_argument("--steps", type=int, default=200_000)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--eps", type=float, default=0.2)
    p.add_argument("--learners", default=",".join(LEARNERS))
    args = p.parse_args()

    sizes = make_rng(2024)
    shapes = []
    for _ in range(args.mdps):
        S = int(sizes.integers(2, 21))
        shapes.append((S, *(int(v) for v in sizes.integers(2, 5, size=2))))

    for name in args.learners.split(","):
        opts = LEARNERS[name]
        gaps, residuals = [], []
        for k, (S, n1, n2) in enumerate(shapes):
            mdp = mdp_generate(k, S, n1, n2, sparsity=0.5, gamma=0.9)
            sol = value_iteration(mdp)
            run = train_on_mdp(mdp, steps=args.steps, rng=make_rng(10_000 + k),
                               alpha=args.alpha, eps=args.eps, **opts)
            gaps.append(value_gap(mdp, run.learner.greedy_policy(), sol))
            if opts["kind"] == "man":
                residuals.append(run.learner.coupling_residual(run.visits > 0))
        gaps = np.array(gaps)
        line = f"{name:11} within 1%: {int(np.sum(gaps <= 0.01)):3d}/{len(gaps)}  median gap {np.median(gaps):.4f}"
        if residuals:
            line += f"  residual median {np.median(residuals):.3g} max {np.max(residuals):.3g}"
        print(line)


if __name__ == "__main__":
    main()
