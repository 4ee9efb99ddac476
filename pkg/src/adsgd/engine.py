"""Asynchronous decentralized SGD over a random wireless graph, plus synchronous baselines.

One iteration: devices that finished their gradient apply it (stale or not),
the realized graph fixes the Metropolis-Hastings matrix, the slot-level
communication phase delivers noisy neighborhood averages, and every device
takes the damped consensus step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .channel import ChannelRealization, PowerConfig, build_schedule, communication_phase, draw_channels, DEFAULT_INVERSION_FLOOR
from .compute import (
    DeviceState,
    GradientOracle,
    LossTask,
    StragglerModel,
    equalized_learning_rates,
    launch_computation,
    local_update,
    sample_compute_time,
    sample_straggle,
)
from .mixing import metropolis_hastings
from .topology import BaseTopology, ConnectivityGraph, LinkFailureModel, build_base, is_connected, realize_graph

SCHEDULERS = ("async", "sync", "sync-barrier")
INIT_MODES = ("zeros", "random", "random-shared")

CSV_FIELDS = ("t", "wall_clock_s", "consensus_dist", "grad_norm_sq", "loss", "acc", "stragglers", "connected")


@dataclass(frozen=True)
class ChannelConfig:
    noise_std: float = 0.0
    power: PowerConfig = field(default_factory=PowerConfig)
    schedule_mode: str = "sequential"
    inversion_floor: float = DEFAULT_INVERSION_FLOOR
    slot_time: float = 0.0  # seconds per communication slot


@dataclass(frozen=True)
class RunConfig:
    """Iteration count, consensus/learning-rate schedules and scheduler.

    ``zeta`` and ``eta`` accept ``"theorem"``: ``zeta = T^(-3/8)`` and the
    equalized per-device rates for the straggler model's ``rho``.
    With ``wall_budget`` set, the run stops after the first round whose
    simulated wall clock reaches the budget (``iterations`` is then a cap).
    """

    iterations: int
    zeta: float | str = 0.5
    eta: float | Sequence[float] | str = 0.05
    scheduler: str = "async"
    t_max: float | None = None
    round_period: float = 1.0
    init: str = "zeros"
    init_scale: float = 1.0
    seed: int = 0
    keep_trace: bool = False
    wall_budget: float | None = None

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {self.scheduler!r}; expected one of {SCHEDULERS}")
        if self.init not in INIT_MODES:
            raise ValueError(f"unknown init {self.init!r}")
        if self.zeta != "theorem" and not (0.0 < float(self.zeta) <= 1.0):
            raise ValueError(f"zeta must lie in (0, 1], got {self.zeta}")
        if self.scheduler == "sync-barrier" and self.t_max is None:
            raise ValueError("sync-barrier needs t_max")
        if self.round_period <= 0:
            raise ValueError("round_period must be positive")
        if self.wall_budget is not None and self.wall_budget <= 0:
            raise ValueError("wall_budget must be positive")

    def resolved_zeta(self) -> float:
        if self.zeta == "theorem":
            return 1.0 / max(self.iterations, 1) ** 0.375
        return float(self.zeta)


@dataclass(frozen=True)
class MetricsRecord:
    t: int
    wall_clock_s: float
    consensus_dist: float
    grad_norm_sq: float
    loss: float
    acc: float
    stragglers: int
    connected: bool

    def as_row(self) -> list:
        return [getattr(self, k) for k in CSV_FIELDS]


@dataclass
class RunTrace:
    """Per-iteration arrays; index ``t`` matches ``MetricsRecord.t``."""

    models: np.ndarray  # (T+1, m, d)
    eval_points: np.ndarray  # (T+1, m, d) point where each device's current gradient was evaluated
    staleness: np.ndarray  # (T+1, m)
    noise_var: np.ndarray  # (T, m) per-coordinate consensus noise variance
    applied: np.ndarray  # (T, m) bool, gradient applied in iteration t


@dataclass
class RunResult:
    records: list[MetricsRecord]
    states: list[DeviceState]
    etas: np.ndarray
    zeta: float
    trace: RunTrace | None = None

    @property
    def models(self) -> np.ndarray:
        return np.stack([s.theta for s in self.states])

    @property
    def mean_model(self) -> np.ndarray:
        return self.models.mean(axis=0)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def average_grad_norm_sq(self) -> float:
        """``(1/T) sum_{t=1..T} ||grad f(theta_bar^t)||^2`` from the recorded trace."""
        vals = self.column("grad_norm_sq")[1:]
        return float(vals.mean()) if len(vals) else float("nan")


def _resolve_etas(config: RunConfig, straggler: StragglerModel, task: LossTask) -> np.ndarray:
    m = task.m
    if config.eta == "theorem":
        etas = equalized_learning_rates(straggler.rho, task.smoothness, max(config.iterations, 1))
        cap = 1.0 / math.sqrt(4.0 * task.smoothness)
        if np.any(etas > cap * (1 + 1e-12)):
            raise ValueError("theorem schedule produced a rate above 1/sqrt(4L)")
        return etas
    etas = np.broadcast_to(np.asarray(config.eta, dtype=float), (m,)).copy()
    if np.any(etas < 0):
        raise ValueError("learning rates must be nonnegative")
    return etas


def _initial_models(config: RunConfig, m: int, d: int, rng) -> np.ndarray:
    if config.init == "zeros":
        return np.zeros((m, d))
    if config.init == "random":
        return config.init_scale * rng.standard_normal((m, d))
    return np.tile(config.init_scale * rng.standard_normal(d), (m, 1))


def _metrics(t, wall, models, task: LossTask, stragglers, connected) -> MetricsRecord:
    mean = models.mean(axis=0)
    dev = models - mean
    g = task.grad(mean)
    acc = task.accuracy(models) if task.has_test_set else None
    return MetricsRecord(
        t=t,
        wall_clock_s=float(wall),
        consensus_dist=float(np.sum(dev * dev)),
        grad_norm_sq=float(g @ g),
        loss=float(task.loss(mean)),
        acc=float("nan") if acc is None else float(acc),
        stragglers=int(stragglers),
        connected=bool(connected),
    )


def run(
    config: RunConfig,
    task: LossTask | GradientOracle,
    topology: BaseTopology | ConnectivityGraph,
    failure: LinkFailureModel | None = None,
    channel_cfg: ChannelConfig | None = None,
    straggler_model: StragglerModel | None = None,
) -> RunResult:
    """Simulate ``config.iterations`` rounds and return per-round metrics.

    ``scheduler`` selects the protocol:

    * ``async`` - stragglers keep their model this round and apply the
      unfinished gradient in the round it completes. Rounds have fixed length
      (``t_max`` if given, else ``round_period``). With a Bernoulli straggler
      model each device misses a round with probability ``rho_i``.
    * ``sync`` - every device computes a fresh gradient; a round lasts as
      long as the slowest device.
    * ``sync-barrier`` - devices slower than ``t_max`` are dropped for the
      round and their computation discarded.
    """
    oracle = task if isinstance(task, GradientOracle) else GradientOracle(task)
    task = oracle.task
    failure = failure or LinkFailureModel()
    channel_cfg = channel_cfg or ChannelConfig()
    m, d = task.m, task.dimension
    base = build_base(topology) if isinstance(topology, BaseTopology) else topology
    if base.node_count != m:
        raise ValueError(f"topology has {base.node_count} nodes but the task has {m} devices")
    straggler = straggler_model or StragglerModel(rho=(0.0,) * m)
    if len(straggler.rho) != m:
        raise ValueError(f"straggler model has {len(straggler.rho)} entries for {m} devices")

    etas = _resolve_etas(config, straggler, task)
    zeta = config.resolved_zeta()
    T = config.iterations
    sched = config.scheduler
    bernoulli_async = sched == "async" and straggler.mode == "bernoulli"
    period = config.t_max if (sched == "async" and config.t_max is not None and not bernoulli_async) else config.round_period

    seeds = np.random.SeedSequence(config.seed).spawn(6)
    graph_rng, chan_rng, noise_rng, grad_rng, time_rng, init_rng = (np.random.default_rng(s) for s in seeds)

    theta0 = _initial_models(config, m, d, init_rng)
    states = [launch_computation(DeviceState(theta0[i].copy()), oracle, i, 0, grad_rng) for i in range(m)]
    remaining = np.array([sample_compute_time(straggler, time_rng) for _ in range(m)])

    keep = config.keep_trace
    if keep:
        tr_models = np.empty((T + 1, m, d))
        tr_eval = np.empty((T + 1, m, d))
        tr_tau = np.zeros((T + 1, m), dtype=np.int64)
        tr_noise = np.zeros((T, m))
        tr_applied = np.zeros((T, m), dtype=bool)
        tr_models[0] = theta0
        tr_eval[0] = np.stack([s.pending.eval_point for s in states])

    wall = 0.0
    records = [_metrics(0, wall, theta0, task, 0, is_connected(base))]

    for t in range(T):
        if sched == "sync":
            finished = np.ones(m, dtype=bool)
            dt = float(remaining.max())
        elif sched == "sync-barrier":
            finished = remaining <= config.t_max
            dt = float(min(remaining.max(), config.t_max))
        elif bernoulli_async:
            finished = np.array([not sample_straggle(straggler, i, t, time_rng)[0] for i in range(m)])
            dt = config.round_period
        else:
            finished = remaining <= period
            remaining = np.where(finished, remaining, remaining - period)
            dt = period

        if keep:
            tr_tau[t] = [t - s.pending.issue_iteration for s in states]
            tr_applied[t] = finished

        states = [local_update(s, not finished[i], None, etas[i], t) for i, s in enumerate(states)]
        half = np.stack([s.theta for s in states])

        g = realize_graph(base, failure, graph_rng)
        w = metropolis_hastings(g)
        schedule = build_schedule(g, channel_cfg.schedule_mode)
        chan = draw_channels(g, schedule, chan_rng, channel_cfg.noise_std)
        phase = communication_phase(half, w, schedule, chan, channel_cfg.power, noise_rng, channel_cfg.inversion_floor)
        new = (1.0 - zeta) * half + zeta * phase.aggregates

        wall += dt + channel_cfg.slot_time * schedule.slot_count
        relaunch = finished if sched != "sync-barrier" else np.ones(m, dtype=bool)
        for i in range(m):
            states[i] = replace(states[i], theta=new[i])
            if relaunch[i]:
                states[i] = launch_computation(states[i], oracle, i, t + 1, grad_rng)
                if sched == "async" and not bernoulli_async:
                    remaining[i] = sample_compute_time(straggler, time_rng)
        if sched != "async" or bernoulli_async:
            remaining = np.array([sample_compute_time(straggler, time_rng) for _ in range(m)])

        records.append(_metrics(t + 1, wall, new, task, int(np.sum(~finished)), is_connected(g)))
        if keep:
            tr_models[t + 1] = new
            tr_eval[t + 1] = np.stack([s.pending.eval_point for s in states])
            tr_noise[t] = phase.noise_var
        if config.wall_budget is not None and wall >= config.wall_budget:
            break

    done = len(records) - 1
    trace = None
    if keep:
        trace = RunTrace(tr_models[: done + 1], tr_eval[: done + 1], tr_tau[: done + 1], tr_noise[:done], tr_applied[:done])
    return RunResult(records, states, etas, zeta, trace)


def run_baseline_sync(config: RunConfig, task, topology, failure=None, channel_cfg=None, straggler_model=None) -> RunResult:
    """Synchronous DSGD: wait for every device each round."""
    return run(replace(config, scheduler="sync"), task, topology, failure, channel_cfg, straggler_model)


def run_baseline_barrier(config: RunConfig, task, topology, failure=None, channel_cfg=None, straggler_model=None) -> RunResult:
    """Synchronous DSGD with delay barrier ``t_max``: late computations are discarded."""
    t_min = straggler_model.t_min if straggler_model is not None else StragglerModel(rho=(0.0,)).t_min
    if config.t_max is None or config.t_max <= t_min:
        raise ValueError(f"t_max must exceed t_min={t_min}, otherwise every device is always discarded")
    return run(replace(config, scheduler="sync-barrier"), task, topology, failure, channel_cfg, straggler_model)
