"""Pairing skewed clients so each pair covers the label space.

Partitions a 5-class task over 20 clients with a Dirichlet(0.1) label mix,
samples ten of them and compares three pairings by their summed distance
from a uniform label distribution: none (singletons), random pairs and the
optimal pairing found by exhaustive search.
"""

import numpy as np

from s2fl.dataset import make_synthetic, partition_dirichlet
from s2fl.main_server import balance_distance, group_clients, singleton_grouping

data = make_synthetic(5, 20, 200, seed=1)
shards = partition_dirichlet(data, 20, alpha=0.1, seed=2)
rng = np.random.default_rng(3)
picked = sorted(rng.choice(20, size=10, replace=False).tolist())
hists = {c: shards[c].label_histogram for c in picked}

print("client  label counts")
for c in picked:
    print(f"{c:>6}  {hists[c].tolist()}")

alone = singleton_grouping(hists)
order = rng.permutation(picked).tolist()
random_total = sum(balance_distance([hists[a], hists[b]]) for a, b in zip(order[::2], order[1::2]))
best = group_clients(hists, 2)

print(f"\nsingletons    total Dist {alone.total:.3f}")
print(f"random pairs  total Dist {random_total:.3f}")
print(f"optimal pairs total Dist {best.total:.3f}")
for members, dist in zip(best.groups, best.distances):
    pooled = sum(hists[c] for c in members)
    print(f"  {members}  pooled {pooled.tolist()}  Dist {dist:.3f}")
