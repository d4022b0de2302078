"""Round loop for S2FL and its baselines (vanilla SFL, FedAvg).

Random streams
--------------
Every draw comes from ``numpy.random.default_rng([seed, stream, ...])``:

====================  ===========================
stream key            use
====================  ===========================
``[seed, 0]``         synthetic data
``[seed, 1]``         train/test split
``[seed, 2]``         client partition
``[seed, 3]``         fleet layout
``[seed, 4]``         model init
``[seed, 5, t]``      participants of round t
``[seed, 6, t, c]``   batches of client c, round t
====================  ===========================

Participants and batches depend only on the seed, round and client, never on
the mode, so runs of different modes with one seed are paired round by round.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .dataset import ClientShard, LabeledDataset, make_synthetic, partition_dirichlet, partition_iid, train_test_split
from .device_sim import (
    FLEET_PRESETS,
    SERVER_FLOPS,
    SERVER_RATE,
    DeviceProfile,
    ServerProfile,
    portion_round_time,
    preset_fleet,
)
from .errors import ConfigError, S2FLError
from .fed_server import ClientTimeTable, aggregate, select_splits, warmup_split, weighted_layer_mean
from .main_server import (
    EXACT_GROUPING_LIMIT,
    FeaturePacket,
    GroupTrainState,
    Grouping,
    group_clients,
    singleton_grouping,
    train_group,
)
from .nn_core import (
    BYTES_PER_REAL,
    FullModel,
    Layer,
    ModelPortion,
    backward_portion,
    build_model,
    cross_entropy_loss,
    forward_portion,
    init_layer,
    split_at,
)

MODES = ("s2fl", "sfl_vanilla", "fedavg")


@dataclass
class RunConfig:
    mode: str = "s2fl"
    rounds: int = 100
    clients: int = 100
    sample_size: int = 10
    lr: float = 0.01
    batch_size: int = 128
    local_steps: int = 1
    group_size: int = 2
    hidden: tuple = (64, 64, 64)
    split_candidates: tuple = (1, 2, 3)
    alpha: Optional[float] = 0.5  # None -> IID partition
    n_classes: int = 10
    dim: int = 20
    samples_per_class: int = 500
    separation: float = 3.0
    seed: int = 0
    fleet: str = "paper-uniform"
    adaptive_split: bool = True
    data_balance: bool = True
    time_ema: Optional[float] = None
    server_flops: float = SERVER_FLOPS
    server_rate: float = SERVER_RATE
    exact_grouping_limit: int = EXACT_GROUPING_LIMIT
    group_loss: str = "mean"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.split_candidates = tuple(int(s) for s in self.split_candidates)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode: unknown mode {self.mode!r}; choose from {MODES}")
        for name in ("rounds", "clients", "sample_size", "batch_size", "local_steps", "group_size",
                     "n_classes", "dim", "samples_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.sample_size > self.clients:
            raise ConfigError(f"sample_size: {self.sample_size} exceeds clients={self.clients}")
        if self.lr < 0:
            raise ConfigError("lr: must be non-negative")
        if self.alpha is not None and not self.alpha > 0:
            raise ConfigError("alpha: must be positive (or iid)")
        if self.fleet not in FLEET_PRESETS:
            raise ConfigError(f"fleet: unknown preset {self.fleet!r}; choose from {FLEET_PRESETS}")
        n_layers = len(self.hidden) + 1
        cands = self.split_candidates
        if self.mode != "fedavg" or cands:
            if not cands:
                raise ConfigError("split_candidates: at least one candidate is required")
            if any(b <= a for a, b in zip(cands, cands[1:])) or cands[0] < 1 or cands[-1] > n_layers - 1:
                raise ConfigError(
                    f"split_candidates: {cands} must increase strictly within [1, {n_layers - 1}]"
                )

    @property
    def K(self) -> int:
        return len(self.split_candidates)

    @property
    def dims(self) -> list[int]:
        return [self.dim, *self.hidden, self.n_classes]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class RoundMetrics:
    round: int
    test_accuracy: float
    global_loss: float
    simulated_seconds: float
    bytes: int
    split_assignment: dict = field(default_factory=dict)
    grouping: list = field(default_factory=list)  # [(members, dist), ...]


@dataclass
class World:
    """Everything a run derives from its config before round 1."""

    train: LabeledDataset
    test: LabeledDataset
    shards: list[ClientShard]
    fleet: list[DeviceProfile]
    server: ServerProfile
    model: FullModel


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def build_world(config: RunConfig) -> World:
    seed = config.seed
    full = make_synthetic(config.n_classes, config.dim, config.samples_per_class,
                          derive_seed(seed, 0), config.separation)
    train, test = train_test_split(full, derive_seed(seed, 1))
    if config.alpha is None:
        shards = partition_iid(train, config.clients, derive_seed(seed, 2))
    else:
        shards = partition_dirichlet(train, config.clients, config.alpha, derive_seed(seed, 2))
    fleet = preset_fleet(config.fleet, config.clients, derive_seed(seed, 3))
    fleet = [dataclasses.replace(dev, shard=shards[dev.client_id]) for dev in fleet]
    server = ServerProfile(config.server_flops, config.server_rate)
    model = build_model(config.dims, config.split_candidates, stream(seed, 4))
    return World(train, test, shards, fleet, server, model)


def sample_participants(config: RunConfig, round: int) -> list[int]:
    picked = stream(config.seed, 5, round).choice(config.clients, size=config.sample_size, replace=False)
    return sorted(int(c) for c in picked)


def client_batches(config: RunConfig, round: int, shard: ClientShard) -> list[np.ndarray]:
    """Sample indices for each of the client's local steps this round."""
    rng = stream(config.seed, 6, round, shard.client_id)
    size = min(config.batch_size, len(shard))
    return [rng.choice(shard.indices, size=size, replace=False) for _ in range(config.local_steps)]


def evaluate(model: FullModel, test: LabeledDataset):
    """Accuracy (argmax, ties to the lowest class) and mean cross-entropy."""
    if len(test) == 0:
        raise ValueError("empty test set")
    logits, _ = forward_portion(model.as_portion(), test.samples)
    loss, _ = cross_entropy_loss(logits, test.labels)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == test.labels))
    return accuracy, loss


class Simulation:
    """Stateful driver; :func:`run` is the usual entry point."""

    def __init__(self, config: RunConfig, world: World | None = None):
        self.config = config
        self.world = world if world is not None else build_world(config)
        self.model = self.world.model.copy()
        self.table = ClientTimeTable(config.time_ema)
        self.seconds = 0.0
        self.bytes = 0
        self.history: list[RoundMetrics] = []
        self.timings: list[dict] = []  # per round: client_id -> RoundTiming

    # --- helpers -------------------------------------------------------
    def _samples_per_round(self, cid: int) -> int:
        return self.config.local_steps * min(self.config.batch_size, len(self.world.shards[cid]))

    def estimate_time(self, cid: int, split: int) -> float:
        client, server = split_at(self.model, split)
        return portion_round_time(client, server, self._samples_per_round(cid), self.world.fleet[cid],
                                  self.world.server, self.config.dim, split).total_seconds

    def choose_splits(self, round: int, participants: list[int]) -> dict[int, int]:
        cfg = self.config
        cands = cfg.split_candidates
        if cfg.mode == "s2fl" and cfg.adaptive_split:
            if round <= cfg.K:
                s = cands[warmup_split(round, cfg.K) - 1]
                return {cid: s for cid in participants}
            return select_splits(self.table, participants, cands, self.estimate_time)
        return {cid: cands[-1] for cid in participants}

    def _timings(self, splits: dict[int, int], participants: list[int]):
        timings = {}
        for cid in participants:
            s = splits.get(cid, self.model.n_layers)
            client, server = split_at(self.model, s)
            timings[cid] = portion_round_time(client, server, self._samples_per_round(cid),
                                              self.world.fleet[cid], self.world.server, self.config.dim, s)
        return timings

    # --- round bodies --------------------------------------------------
    def _round_split(self, round: int, participants: list[int], splits: dict[int, int]):
        cfg, world = self.config, self.world
        hists = {cid: world.shards[cid].label_histogram for cid in participants}
        if cfg.mode == "s2fl" and cfg.data_balance:
            grouping = group_clients(hists, cfg.group_size, cfg.exact_grouping_limit)
        else:
            grouping = singleton_grouping(hists)
        membership = grouping.membership()

        clients = {cid: split_at(self.model, splits[cid])[0] for cid in participants}
        states = {}
        for gid, members in enumerate(grouping.groups):
            s_min = min(splits[c] for c in members)
            server = split_at(self.model, s_min)[1]
            states[gid] = GroupTrainState(gid, server, {c: splits[c] + 1 for c in members})

        batches = {cid: client_batches(cfg, round, world.shards[cid]) for cid in participants}
        for step in range(cfg.local_steps):
            caches, packets = {}, {gid: [] for gid in states}
            for cid in participants:
                idx = batches[cid][step]
                fx, caches[cid] = forward_portion(clients[cid], world.train.samples[idx])
                packets[membership[cid]].append(
                    FeaturePacket(cid, fx, world.train.labels[idx], splits[cid] + 1))
            dfx = {}
            for gid, state in states.items():
                _, grads, _ = train_group(state, packets[gid], cfg.lr, combine=cfg.group_loss)
                dfx.update(grads)
            for cid in participants:
                backward_portion(clients[cid], caches[cid], dfx[cid], cfg.lr)

        self.model = aggregate(
            [(cid, clients[cid], len(world.shards[cid])) for cid in participants],
            [(gid, st.server_portion) for gid, st in states.items()],
            membership,
            self.model,
        )
        return grouping

    def _round_vanilla(self, round: int, participants: list[int], splits: dict[int, int]):
        """Classic split training: one private server copy per client, portions
        averaged separately."""
        cfg, world = self.config, self.world
        s = cfg.split_candidates[-1]
        pairs = {cid: split_at(self.model, s) for cid in participants}
        batches = {cid: client_batches(cfg, round, world.shards[cid]) for cid in participants}
        for cid in participants:
            client, server = pairs[cid]
            for step in range(cfg.local_steps):
                idx = batches[cid][step]
                fx, client_cache = forward_portion(client, world.train.samples[idx])
                logits, server_cache = forward_portion(server, fx)
                _, grad = cross_entropy_loss(logits, world.train.labels[idx])
                dfx = backward_portion(server, server_cache, grad, cfg.lr)
                backward_portion(client, client_cache, dfx, cfg.lr)
        weights = [len(world.shards[cid]) for cid in participants]
        layers = []
        for index in range(1, self.model.n_layers + 1):
            side = 0 if index <= s else 1
            src = [pairs[cid][side].layer(index) for cid in participants]
            layers.append(Layer(weighted_layer_mean([l.weight for l in src], weights),
                                weighted_layer_mean([l.bias for l in src], weights),
                                self.model.layers[index - 1].activation))
        self.model = FullModel(layers, self.model.split_candidates)
        hists = {cid: world.shards[cid].label_histogram for cid in participants}
        return singleton_grouping(hists)

    def _round_fedavg(self, round: int, participants: list[int]):
        cfg, world = self.config, self.world
        locals_ = {}
        for cid in participants:
            local = self.model.copy()
            portion = local.as_portion()
            for idx in client_batches(cfg, round, world.shards[cid]):
                logits, cache = forward_portion(portion, world.train.samples[idx])
                _, grad = cross_entropy_loss(logits, world.train.labels[idx])
                backward_portion(portion, cache, grad, cfg.lr)
            locals_[cid] = local
        weights = [len(world.shards[cid]) for cid in participants]
        layers = []
        for k, tmpl in enumerate(self.model.layers):
            layers.append(Layer(weighted_layer_mean([locals_[c].layers[k].weight for c in participants], weights),
                                weighted_layer_mean([locals_[c].layers[k].bias for c in participants], weights),
                                tmpl.activation))
        self.model = FullModel(layers, self.model.split_candidates)

    # --- driver --------------------------------------------------------
    def step(self) -> RoundMetrics:
        cfg = self.config
        round = len(self.history) + 1
        participants = sample_participants(cfg, round)
        grouping: Grouping | None = None
        try:
            if cfg.mode == "fedavg":
                splits = {}
                timings = self._timings(splits, participants)
                self._round_fedavg(round, participants)
                label_bytes = 0
            else:
                splits = self.choose_splits(round, participants)
                # timings use the dispatched (pre-training) model sizes
                timings = self._timings(splits, participants)
                if cfg.mode == "sfl_vanilla":
                    grouping = self._round_vanilla(round, participants, splits)
                else:
                    grouping = self._round_split(round, participants, splits)
                label_bytes = sum(BYTES_PER_REAL * self._samples_per_round(c) for c in participants)
        except S2FLError as exc:
            raise type(exc)(f"round {round}: {exc}") from exc

        if cfg.mode == "s2fl" and cfg.adaptive_split:
            for cid, timing in timings.items():
                self.table.record(cid, splits[cid], timing.total_seconds)
        self.timings.append(timings)
        self.seconds += max(t.total_seconds for t in timings.values())
        self.bytes += sum(t.bytes for t in timings.values()) + label_bytes
        accuracy, loss = evaluate(self.model, self.world.test)
        metrics = RoundMetrics(
            round=round,
            test_accuracy=accuracy,
            global_loss=loss,
            simulated_seconds=self.seconds,
            bytes=self.bytes,
            split_assignment=dict(splits),
            grouping=[] if grouping is None else list(zip(grouping.groups, grouping.distances)),
        )
        self.history.append(metrics)
        return metrics


def run(config: RunConfig, world: World | None = None) -> list[RoundMetrics]:
    sim = Simulation(config, world)
    for _ in range(config.rounds):
        sim.step()
    return sim.history


# --- strongly convex sanity check ---------------------------------------


@dataclass
class ConvexReport:
    mu: float
    smoothness: float
    r: float
    f_star: float
    gaps: list[float]  # gaps[t] after round t; gaps[0] is the initial model
    envelope_c: float
    fit_window: int
    envelope_holds: bool


def _flatten(layer: Layer) -> np.ndarray:
    return np.concatenate([layer.weight.ravel(), layer.bias])


def _unflatten(theta: np.ndarray, out_dim: int, in_dim: int) -> Layer:
    w = theta[: out_dim * in_dim].reshape(out_dim, in_dim)
    return Layer(w.copy(), theta[out_dim * in_dim:].copy(), "softmax_output")


def regularized_objective(layer: Layer, data: LabeledDataset, mu: float) -> float:
    logits, _ = forward_portion(ModelPortion([layer], 1, 1), data.samples)
    loss, _ = cross_entropy_loss(logits, data.labels)
    return loss + 0.5 * mu * float(np.sum(layer.weight ** 2) + np.sum(layer.bias ** 2))


def solve_optimum(data: LabeledDataset, mu: float, init: Layer) -> float:
    """Minimum of the regularised softmax objective (L-BFGS, tight tolerance)."""
    out_dim, in_dim = init.weight.shape

    def fun(theta):
        layer = _unflatten(theta, out_dim, in_dim)
        logits, cache = forward_portion(ModelPortion([layer], 1, 1), data.samples)
        loss, grad = cross_entropy_loss(logits, data.labels)
        dw = grad.T @ data.samples
        db = grad.sum(axis=0)
        return loss + 0.5 * mu * theta @ theta, np.concatenate([dw.ravel(), db]) + mu * theta

    res = minimize(fun, _flatten(init), jac=True, method="L-BFGS-B",
                   options={"gtol": 1e-12, "ftol": 1e-16, "maxiter": 10000})
    return float(res.fun)


def run_convex_sanity(config: RunConfig, mu: float = 0.1, fit_window: int = 50) -> ConvexReport:
    """S2FL grouping/aggregation on an L2-regularised softmax regression.

    The model is a single linear layer held entirely by the server side, so
    clients upload raw inputs. Learning rate ``2 / (mu * (t + r))`` with
    ``r = max(8 L / mu, E) - 1`` and ``t`` counting SGD steps from 1. The
    envelope ``C / (t + r)`` is fitted on rounds ``1..fit_window-1`` and
    checked on the remaining rounds.
    """
    world = build_world(config)
    train = world.train
    layer = init_layer(config.dim, config.n_classes, "softmax_output", stream(config.seed, 4))
    model = FullModel([layer], ())
    # softmax cross-entropy Hessian is bounded by 1/2 * ||[x, 1]||^2
    smoothness = mu + 0.5 * float(np.max(np.sum(train.samples ** 2, axis=1) + 1.0))
    r = max(8.0 * smoothness / mu, config.local_steps) - 1.0
    f_star = solve_optimum(train, mu, layer)
    gaps = [regularized_objective(model.layers[0], train, mu) - f_star]
    t = 0
    for round in range(1, config.rounds + 1):
        participants = sample_participants(config, round)
        hists = {cid: world.shards[cid].label_histogram for cid in participants}
        if config.data_balance:
            grouping = group_clients(hists, config.group_size, config.exact_grouping_limit)
        else:
            grouping = singleton_grouping(hists)
        membership = grouping.membership()
        states = {gid: GroupTrainState(gid, ModelPortion([model.layers[0].copy()], 1, 1), {c: 1 for c in members})
                  for gid, members in enumerate(grouping.groups)}
        batches = {cid: client_batches(config, round, world.shards[cid]) for cid in participants}
        for step in range(config.local_steps):
            t += 1
            lr = 2.0 / (mu * (t + r))
            for gid, members in enumerate(grouping.groups):
                packets = [FeaturePacket(c, train.samples[batches[c][step]], train.labels[batches[c][step]], 1)
                           for c in members]
                train_group(states[gid], packets, lr, l2=mu)
        empty = ModelPortion([], 1, 0)
        model = aggregate(
            [(cid, empty, len(world.shards[cid])) for cid in participants],
            [(gid, st.server_portion) for gid, st in states.items()],
            membership,
            model,
        )
        gaps.append(regularized_objective(model.layers[0], train, mu) - f_star)

    steps = np.arange(len(gaps)) * config.local_steps
    fit = slice(1, min(fit_window, len(gaps)))
    envelope_c = float(np.max(np.array(gaps[fit]) * (steps[fit] + r)))
    later = np.array(gaps[fit_window:])
    holds = bool(np.all(later <= envelope_c / (steps[fit_window:] + r)))
    return ConvexReport(mu, smoothness, r, f_star, gaps, envelope_c, fit_window, holds)
