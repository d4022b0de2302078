"""Brute-force reference computations used to cross-check the fast paths.

Nothing here shares code with the routines it checks beyond the data types
and :func:`~s2fl.main_server.balance_distance` as the objective.
"""

from __future__ import annotations

from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .main_server import balance_distance, n_groups


def central_difference(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of ``f`` with respect to ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a| + |b|, tiny)`` in the Frobenius norm."""
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / max(denom, 1e-300))


def set_partitions(items: Sequence) -> Iterator[list[list]]:
    """Every partition of ``items`` into non-empty blocks."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for k in range(len(part)):
            yield part[:k] + [[first] + part[k]] + part[k + 1:]
        yield [[first]] + part


def brute_force_grouping(dists: Mapping[int, np.ndarray], g: int):
    """Minimum total balance distance over all partitions into ``ceil(x/g)``
    blocks of size <= g. Returns ``(total, groups)``."""
    ids = sorted(dists)
    n = len(np.asarray(dists[ids[0]]))
    want = n_groups(len(ids), g)
    best_total, best_groups = np.inf, None
    for part in set_partitions(ids):
        if len(part) != want or any(len(b) > g for b in part):
            continue
        total = sum(balance_distance([dists[c] for c in block], n) for block in part)
        if total < best_total:
            best_total, best_groups = total, sorted(sorted(b) for b in part)
    return float(best_total), best_groups


def aggregation_oracle(contributions: Mapping[int, Sequence[tuple[np.ndarray, float]]]) -> dict[int, np.ndarray]:
    """Per-layer weighted mean of an explicit contribution list.

    ``contributions[layer]`` lists ``(value, weight)`` pairs; the result is
    ``sum(w * v) / sum(w)`` for every layer.
    """
    out = {}
    for layer, items in contributions.items():
        num = sum(w * np.asarray(v, dtype=np.float64) for v, w in items)
        den = sum(w for _, w in items)
        out[layer] = num / den
    return out
