"""Main Server: label-balanced grouping of clients and per-group server training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .nn_core import ModelPortion, cross_entropy_loss, forward_portion, portion_gradients, sgd_step

EXACT_GROUPING_LIMIT = 10
COMBINE_RULES = ("mean", "sum")


def balance_distance(members: Sequence[np.ndarray], n: int | None = None) -> float:
    """L2 distance between the members' pooled label distribution and uniform."""
    counts = np.sum([np.asarray(m, dtype=np.float64) for m in members], axis=0)
    if n is None:
        n = len(counts)
    total = counts.sum()
    if not total > 0:
        raise DomainError("combined label counts are all zero")
    return math.sqrt(float(np.sum((counts / total - 1.0 / n) ** 2)))


@dataclass
class Grouping:
    groups: list[list[int]]
    distances: list[float]

    @property
    def total(self) -> float:
        return float(sum(self.distances))

    def membership(self) -> dict[int, int]:
        return {cid: gid for gid, members in enumerate(self.groups) for cid in members}


def n_groups(x: int, g: int) -> int:
    return -(-x // g)


def _check_args(dists: Mapping[int, np.ndarray], g: int) -> list[int]:
    if g < 1:
        raise ConfigError(f"group size must be >= 1, got {g}")
    if not dists:
        raise ConfigError("no participants to group")
    return sorted(dists)


def group_exhaustive(dists: Mapping[int, np.ndarray], g: int) -> Grouping:
    """Optimal partition into ``ceil(x/g)`` groups of size <= g.

    Dynamic programme over subsets: the lowest unassigned client always
    opens the next group, so each partition is visited once.
    """
    ids = _check_args(dists, g)
    x = len(ids)
    k_total = n_groups(x, g)
    hists = [np.asarray(dists[c]) for c in ids]
    n = len(hists[0])

    @lru_cache(maxsize=None)
    def dist_of(mask: int) -> float:
        return balance_distance([hists[i] for i in range(x) if mask >> i & 1], n)

    @lru_cache(maxsize=None)
    def best(mask: int, k: int):
        if mask == 0:
            return (0.0, ()) if k == 0 else (math.inf, ())
        remaining = bin(mask).count("1")
        if k == 0 or remaining > g * k or remaining < k:
            return (math.inf, ())
        low = (mask & -mask).bit_length() - 1
        others = [i for i in range(x) if mask >> i & 1 and i != low]
        result = (math.inf, ())
        for size in range(min(g, remaining)):
            for extra in combinations(others, size):
                group = 1 << low
                for i in extra:
                    group |= 1 << i
                rest_val, rest_groups = best(mask & ~group, k - 1)
                if rest_val == math.inf:
                    continue
                val = dist_of(group) + rest_val
                if val < result[0]:
                    result = (val, (group,) + rest_groups)
        return result

    _, masks = best((1 << x) - 1, k_total)
    groups = [[ids[i] for i in range(x) if m >> i & 1] for m in masks]
    return Grouping(groups, [dist_of(m) for m in masks])


def group_greedy(dists: Mapping[int, np.ndarray], g: int) -> Grouping:
    """Seed each group with the most skewed unassigned client, then add the
    client that brings the group closest to uniform until it holds ``g``.
    Ties go to the lowest client id."""
    ids = _check_args(dists, g)
    n = len(np.asarray(dists[ids[0]]))
    unassigned = list(ids)
    groups, distances = [], []
    for _ in range(n_groups(len(ids), g)):
        seed = max(unassigned, key=lambda c: (balance_distance([dists[c]], n), -c))
        group = [seed]
        unassigned.remove(seed)
        while len(group) < g and unassigned:
            pick = min(unassigned, key=lambda c: (balance_distance([dists[m] for m in group + [c]], n), c))
            group.append(pick)
            unassigned.remove(pick)
        groups.append(sorted(group))
        distances.append(balance_distance([dists[m] for m in group], n))
    return Grouping(groups, distances)


def group_clients(dists: Mapping[int, np.ndarray], g: int, exact_limit: int = EXACT_GROUPING_LIMIT) -> Grouping:
    if len(dists) <= exact_limit:
        return group_exhaustive(dists, g)
    return group_greedy(dists, g)


def singleton_grouping(dists: Mapping[int, np.ndarray]) -> Grouping:
    ids = sorted(dists)
    return Grouping([[c] for c in ids], [balance_distance([dists[c]]) for c in ids])


@dataclass
class FeaturePacket:
    client_id: int
    features: np.ndarray
    labels: np.ndarray
    entry_index: int

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ShapeError(f"client {self.client_id}: {len(self.features)} feature rows for {len(self.labels)} labels")


@dataclass
class GroupTrainState:
    group_id: int
    server_portion: ModelPortion
    member_entries: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        for cid, entry in self.member_entries.items():
            if entry < self.server_portion.entry_index:
                raise ShapeError(
                    f"client {cid} enters at layer {entry}, before the group portion starts "
                    f"at {self.server_portion.entry_index}"
                )


def train_group(
    state: GroupTrainState,
    packets: Sequence[FeaturePacket],
    lr: float,
    l2: float = 0.0,
    combine: str = "mean",
):
    """One SGD step of a group's server copy on the members' pooled features.

    With ``combine="mean"`` the combined loss is the sample-weighted mean of
    the member losses, i.e. the cross-entropy of the concatenated batch. With
    ``combine="sum"`` it is the plain sum of member losses, so each member
    gets back the gradient of its own loss and the server steps along the
    summed gradient. Packets are processed in client id order. Returns
    ``(state, {client_id: dfx}, loss)``.
    """
    if combine not in COMBINE_RULES:
        raise ConfigError(f"combine must be one of {COMBINE_RULES}, got {combine!r}")
    if not packets:
        raise ValueError(f"group {state.group_id} received no packets")
    packets = sorted(packets, key=lambda p: p.client_id)
    total = sum(len(p.labels) for p in packets)
    portion = state.server_portion
    acc = [None] * len(portion.layers)
    loss = 0.0
    dfx = {}
    for packet in packets:
        entry = state.member_entries.get(packet.client_id)
        if entry is None:
            raise ValueError(f"client {packet.client_id} is not a member of group {state.group_id}")
        if packet.entry_index != entry:
            raise ShapeError(f"client {packet.client_id} packet enters at {packet.entry_index}, member entry is {entry}")
        sub = portion.sub_portion(entry)
        out, cache = forward_portion(sub, packet.features)
        member_loss, grad = cross_entropy_loss(out, packet.labels)
        share = len(packet.labels) / total if combine == "mean" else 1.0
        loss += share * member_loss
        input_grad, grads = portion_gradients(sub, cache, grad * share)
        dfx[packet.client_id] = input_grad
        offset = entry - portion.entry_index
        for k, (dw, db) in enumerate(grads):
            slot = acc[offset + k]
            if slot is None:
                acc[offset + k] = [dw.copy(), db.copy()]
            else:
                slot[0] += dw
                slot[1] += db
    grads = [
        slot if slot is not None else (np.zeros_like(layer.weight), np.zeros_like(layer.bias))
        for slot, layer in zip(acc, portion.layers)
    ]
    sgd_step(portion.layers, grads, lr, l2)
    return state, dfx, loss
