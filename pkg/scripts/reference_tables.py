"""Recompute mean and median normalized scores from the per-game table."""

from manrl.harness import ATARI_NORMALIZED, ATARI_SUMMARY, atari_column, summarize

print(f"{'game':18}{'DQN':>10}{'DDQN':>10}{'MAN':>10}")
for game, row in ATARI_NORMALIZED.items():
    print(f"{game:18}" + "".join(f"{v:10.2f}" for v in row))
print()
for agent in ("dqn", "ddqn", "man"):
    mean, median = summarize(atari_column(agent))
    want_mean, want_median = ATARI_SUMMARY[agent]
    print(f"{agent:5} mean {mean:8.3f} (reference {want_mean})  "
          f"median {median:7.3f} (reference {want_median})")
