"""Train MAN, DQN and DDQN on block stacking over several seeds and print the summary.

    python3 scripts/blockstack_compare.py --seeds 5 --episodes 3000 --out runs/blockstack
"""

import argparse

from manrl.harness import ExperimentConfig, compare


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--episodes", type=int, default=3000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="runs/blockstack")
    args = p.parse_args()

    cfg = ExperimentConfig(env="blockstack", episodes=args.episodes, checkpoint=False)
    joined, summary = compare(cfg, ["man", "dqn", "ddqn"], list(range(args.seeds)), args.out,
                              args.workers)
    for s in summary:
        finals = " ".join(f"{v:.3f}" for v in s.per_seed_final_return)
        print(f"{s.agent:5} median {s.median_final_return:8.3f}  bumpiness {s.mean_final_bumpiness:6.3f}"
              f"  max height {s.mean_final_max_height:5.2f}  per-seed [{finals}]")
    print(f"curves: {joined}")


if __name__ == "__main__":
    main()
