"""Fed Server: client time table, split selection and layer-wise aggregation."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, CoverageError, ShapeError
from .nn_core import FullModel, Layer, ModelPortion


class ClientTimeTable:
    """Observed round time per ``(client_id, split_index)``.

    By default an update overwrites the cell. With ``ema`` set, the new value
    is ``ema * old + (1 - ema) * observed``.
    """

    def __init__(self, ema: float | None = None):
        if ema is not None and not 0.0 <= ema < 1.0:
            raise ConfigError("ema must lie in [0, 1)")
        self.ema = ema
        self.entries: dict[tuple[int, int], float] = {}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def __eq__(self, other):
        return isinstance(other, ClientTimeTable) and self.entries == other.entries

    def get(self, client_id: int, split_index: int) -> float | None:
        return self.entries.get((client_id, split_index))

    def record(self, client_id: int, split_index: int, seconds: float) -> "ClientTimeTable":
        if not seconds > 0:
            raise ValueError(f"observed time must be positive, got {seconds}")
        key = (client_id, int(split_index))
        old = self.entries.get(key)
        if self.ema is not None and old is not None:
            seconds = self.ema * old + (1.0 - self.ema) * seconds
        self.entries[key] = float(seconds)
        return self

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["client_id", "split_index", "seconds"])
            for (cid, split), seconds in sorted(self.entries.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
                writer.writerow([cid, split, repr(seconds)])

    @classmethod
    def from_csv(cls, path, ema: float | None = None) -> "ClientTimeTable":
        table = cls(ema)
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                cid = row["client_id"]
                cid = int(cid) if cid.lstrip("-").isdigit() else cid
                table.entries[(cid, int(row["split_index"]))] = float(row["seconds"])
        return table


def record_time(table: ClientTimeTable, client_id: int, split_index: int, seconds: float) -> ClientTimeTable:
    return table.record(client_id, split_index, seconds)


def warmup_split(round: int, K: int) -> int:
    """Candidate ordinal (1-based) shared by every device in warm-up round ``round``."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    if not 1 <= round <= K:
        raise ValueError(f"round {round} is past the {K}-round warm-up; use select_splits")
    return round


def select_splits(
    table: ClientTimeTable,
    participants: Sequence[int],
    candidates: Sequence[int] | int,
    estimate: Callable[[int, int], float] | None = None,
) -> dict[int, int]:
    """Assign each participant the split whose recorded time is nearest the median.

    The median runs over all ``len(participants) * K`` times (mean of the two
    middle values for an even count). Ties go to the larger split index.
    Missing cells are filled by ``estimate(client_id, split_index)``.
    """
    if isinstance(candidates, int):
        candidates = range(1, candidates + 1)
    candidates = sorted(candidates)
    times = {}
    for cid in participants:
        for s in candidates:
            t = table.get(cid, s)
            if t is None:
                if estimate is None:
                    raise KeyError(f"no recorded time for client {cid} at split {s}")
                t = float(estimate(cid, s))
            times[cid, s] = t
    median = float(np.median(list(times.values())))
    assignment = {}
    for cid in participants:
        # reversed: on equal distance the larger split wins
        assignment[cid] = min(reversed(candidates), key=lambda s: abs(times[cid, s] - median))
    return assignment


def weighted_layer_mean(values: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted mean, accumulated as offsets from the first value.

    Identical inputs come back bit-for-bit, as does a single input.
    """
    total = 0.0
    for w in weights:
        total += w
    if not total > 0:
        raise ValueError("accumulated weight must be positive")
    ref = values[0]
    acc = np.zeros_like(ref)
    for v, w in zip(values, weights):
        acc += w * (v - ref)
    return ref + acc / total


def aggregate(
    client_models: Sequence[tuple[int, ModelPortion, float]],
    server_models: Sequence[tuple[int, ModelPortion]] | Mapping[int, ModelPortion],
    membership: Mapping[int, int],
    full_template: FullModel,
) -> FullModel:
    """Rebuild the full model from client portions and group server copies.

    Every layer is the data-size weighted mean over all clients of either the
    client's own copy of that layer or, if the client does not hold it, the
    copy in its group's server model. A server copy is therefore counted once
    per member client.
    """
    servers = dict(server_models)
    n_layers = full_template.n_layers
    layers = []
    for index in range(1, n_layers + 1):
        tmpl = full_template.layers[index - 1]
        ws, bs, weights = [], [], []
        for cid, portion, size in client_models:
            if portion.contains(index):
                src = portion.layer(index)
            else:
                gid = membership.get(cid)
                server = servers.get(gid)
                if server is None or not server.contains(index):
                    raise CoverageError(f"layer {index} is covered neither by client {cid} nor its server model")
                src = server.layer(index)
            if src.weight.shape != tmpl.weight.shape:
                raise ShapeError(f"layer {index} from client {cid} has shape {src.weight.shape}, expected {tmpl.weight.shape}")
            ws.append(src.weight)
            bs.append(src.bias)
            weights.append(size)
        layers.append(Layer(weighted_layer_mean(ws, weights), weighted_layer_mean(bs, weights), tmpl.activation))
    return FullModel(layers, full_template.split_candidates)
