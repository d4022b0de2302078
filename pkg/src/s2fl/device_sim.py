"""Simulated device capability and per-round time/communication accounting.

One training round of a device costs

    T = (2*|Wc| + 2*p*q*b) / R  +  p*fc / Comp_c  +  p*fs / Comp_s

with ``|Wc|`` the client portion size in bytes, ``p`` the number of samples the
device pushed through the model this round, ``q`` the feature width at the
split, ``b`` bytes per real, ``R`` the device transfer rate, ``fc``/``fs``
the per-sample forward+backward FLOPs of the client/server portions, and
``Comp_c``/``Comp_s`` the device/server FLOPS.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn_core import BYTES_PER_REAL, ModelPortion

# Device quality levels: (FLOPS, transfer rate in bytes/s).
QUALITY_FLOPS = {"low": 5e9, "mid": 1e10, "high": 2e10}
QUALITY_RATE = {"low": 1e6, "mid": 2e6, "high": 5e6}
SERVER_FLOPS = 5e10
SERVER_RATE = 1e7

# High:Mid:Low mixes for the composition presets.
PRESET_MIX = {
    "conf1": {"high": 5, "mid": 3, "low": 2},
    "conf2": {"high": 2, "mid": 3, "low": 5},
}
FLEET_PRESETS = ("paper-uniform", "conf1", "conf2")


@dataclass(frozen=True)
class DeviceProfile:
    client_id: int
    flops: float
    transfer_rate: float
    shard: object = None

    def __post_init__(self):
        if self.flops <= 0 or self.transfer_rate <= 0:
            raise ConfigError(f"device {self.client_id}: flops and transfer_rate must be positive")


@dataclass(frozen=True)
class ServerProfile:
    flops: float = SERVER_FLOPS
    transfer_rate: float = SERVER_RATE

    def __post_init__(self):
        if self.flops <= 0:
            raise ConfigError("server flops must be positive")


@dataclass(frozen=True)
class RoundTiming:
    client_id: int
    split_index: int
    comm_seconds: float
    client_compute_seconds: float
    server_compute_seconds: float
    total_seconds: float
    bytes: int


def round_time(
    wc_bytes: int,
    p: int,
    q: int,
    device: DeviceProfile,
    fc: float,
    fs: float,
    server: ServerProfile,
    bytes_per_real: int = BYTES_PER_REAL,
    split_index: int = 0,
) -> RoundTiming:
    """Per-device round timing; ``fc``/``fs`` are per-sample FLOPs.

    Zero ``q`` and ``fs`` describe a device that trains the whole model and
    exchanges no features.
    """
    if min(wc_bytes, p, q, fc, fs) < 0:
        raise ValueError("round_time inputs must be non-negative")
    n_bytes = 2 * wc_bytes + 2 * p * q * bytes_per_real
    comm = n_bytes / device.transfer_rate
    client = p * fc / device.flops
    srv = p * fs / server.flops
    return RoundTiming(
        client_id=device.client_id,
        split_index=split_index,
        comm_seconds=comm,
        client_compute_seconds=client,
        server_compute_seconds=srv,
        total_seconds=comm + client + srv,
        bytes=int(n_bytes),
    )


def portion_round_time(
    client: ModelPortion,
    server_portion: ModelPortion,
    p: int,
    device: DeviceProfile,
    server: ServerProfile,
    input_dim: int,
    split_index: int = 0,
) -> RoundTiming:
    """Round timing for a device training ``client`` against ``server_portion``.

    When the server portion is empty (whole-model training) no features move.
    """
    if server_portion.layers:
        q = client.layers[-1].out_dim if client.layers else input_dim
    else:
        q = 0
    return round_time(
        client.param_bytes,
        p,
        q,
        device,
        client.flops_per_sample,
        server_portion.flops_per_sample,
        server,
        split_index=split_index,
    )


def make_fleet(kinds, seed: int) -> list[DeviceProfile]:
    """Build devices from ``[(flops, rate, count), ...]``.

    Profiles are expanded in list order, then dealt to client ids
    ``0..n-1`` through a seeded permutation.
    """
    profiles = []
    for flops, rate, count in kinds:
        if count < 0:
            raise ConfigError(f"negative device count {count}")
        profiles.extend([(float(flops), float(rate))] * int(count))
    if not profiles:
        raise ConfigError("fleet is empty")
    order = np.random.default_rng(seed).permutation(len(profiles))
    return [DeviceProfile(cid, *profiles[j]) for cid, j in enumerate(order)]


def _apportion(n: int, weights: dict[str, int]) -> list[str]:
    """Largest-remainder split of ``n`` slots over the weighted qualities."""
    total = sum(weights.values())
    exact = {k: n * w / total for k, w in weights.items()}
    counts = {k: int(v) for k, v in exact.items()}
    leftover = n - sum(counts.values())
    by_remainder = sorted(weights, key=lambda k: (-(exact[k] - counts[k]), -weights[k]))
    for k in by_remainder[:leftover]:
        counts[k] += 1
    return [k for k in weights for _ in range(counts[k])]


def preset_kinds(name: str, n_devices: int, seed: int):
    """Device kinds ``[(flops, rate, count), ...]`` for a named preset."""
    if n_devices < 1:
        raise ConfigError("fleet needs at least one device")
    levels = ("low", "mid", "high")
    if name == "paper-uniform":
        combos = [(f, r) for f in levels for r in levels]
        pairs = [combos[i % len(combos)] for i in range(n_devices)]
    elif name in PRESET_MIX:
        mix = PRESET_MIX[name]
        flops_q = _apportion(n_devices, mix)
        rate_q = _apportion(n_devices, mix)
        # FLOPS and rate quality are drawn independently
        rate_q = [rate_q[j] for j in np.random.default_rng(seed).permutation(n_devices)]
        pairs = list(zip(flops_q, rate_q))
    else:
        raise ConfigError(f"unknown fleet preset {name!r}; choose from {FLEET_PRESETS}")
    counts = Counter(pairs)
    return [
        (QUALITY_FLOPS[f], QUALITY_RATE[r], counts[(f, r)])
        for f in levels
        for r in levels
        if counts[(f, r)]
    ]


def preset_fleet(name: str, n_devices: int, seed: int) -> list[DeviceProfile]:
    return make_fleet(preset_kinds(name, n_devices, seed), seed)
