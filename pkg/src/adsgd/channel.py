"""Slot-level simulation of the gossip communication phase.

Each slot pair is an AirComp slot, where a star center receives the
superposition of its neighbors' channel-inverted signals, followed by a broadcast
slot where the same device transmits its own model to every neighbor. Channel
coefficients are complex scalars, reciprocal within a slot and redrawn per slot.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np

from .mixing import MixingMatrix
from .topology import ConnectivityGraph

ALIGNMENT_MODES = ("fixed-gamma", "power-constrained")
SCHEDULE_MODES = ("sequential", "coloring")
DEFAULT_INVERSION_FLOOR = 1e-3
_POWER_EPS = 1e-12


@dataclass(frozen=True)
class PowerConfig:
    max_power: float = 1.0
    alignment_mode: str = "fixed-gamma"
    gamma: float = 1.0
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.alignment_mode not in ALIGNMENT_MODES:
            raise ValueError(f"unknown alignment_mode {self.alignment_mode!r}")
        if self.max_power <= 0:
            raise ValueError("max_power must be positive")
        if self.alignment_mode == "fixed-gamma" and (self.gamma <= 0 or self.alpha <= 0):
            raise ValueError("gamma and alpha must be positive in fixed-gamma mode")


@dataclass(frozen=True)
class SlotSchedule:
    """Ordered slot pairs as ``(star centers, broadcast transmitters)``.

    Pair ``k`` occupies AirComp slot ``2k`` and broadcast slot ``2k + 1``.
    """

    pairs: tuple[tuple[frozenset[int], frozenset[int]], ...]
    mode: str = "sequential"
    _center_pair: dict[int, int] = field(init=False, repr=False, compare=False)
    _transmit_pair: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        centers: dict[int, int] = {}
        transmit: dict[int, int] = {}
        for k, (air, bc) in enumerate(self.pairs):
            for i in air:
                if i in centers:
                    raise ValueError(f"device {i} is star center in more than one slot")
                centers[i] = k
            for i in bc:
                transmit[i] = k
        object.__setattr__(self, "_center_pair", centers)
        object.__setattr__(self, "_transmit_pair", transmit)

    @property
    def slot_count(self) -> int:
        return 2 * len(self.pairs)

    def aircomp_slot(self, device: int) -> int:
        return 2 * self._center_pair[device]

    def broadcast_slot(self, device: int) -> int:
        return 2 * self._transmit_pair[device] + 1

    def validate(self, g: ConnectivityGraph) -> None:
        """Every device is a star center exactly once; same-slot centers have disjoint closed neighborhoods."""
        if sorted(self._center_pair) != list(range(g.node_count)):
            raise ValueError("every device must be star center exactly once per phase")
        for air, _ in self.pairs:
            covered: set[int] = set()
            for i in air:
                closed = {i, *g.neighbors(i)}
                if covered & closed:
                    raise ValueError(f"star centers in one slot collide at {sorted(covered & closed)}")
                covered |= closed


@dataclass(frozen=True)
class ChannelRealization:
    graph: ConnectivityGraph
    coeffs: np.ndarray  # (slot_count, E) complex, column order = graph.edge_array
    noise_std: float = 0.0

    @property
    def slot_count(self) -> int:
        return self.coeffs.shape[0]

    @cached_property
    def edge_index(self) -> dict[tuple[int, int], int]:
        return {(int(i), int(j)): k for k, (i, j) in enumerate(self.graph.edge_array)}

    def gain(self, slot: int, i: int, j: int) -> complex:
        k = self.edge_index[(min(i, j), max(i, j))]
        return complex(self.coeffs[slot, k])

    @property
    def gains(self) -> dict[tuple[int, tuple[int, int]], complex]:
        """Map ``(slot, (i, j)) -> h`` listing both orientations of every link."""
        out: dict[tuple[int, tuple[int, int]], complex] = {}
        for (i, j), k in self.edge_index.items():
            for s in range(self.slot_count):
                out[(s, (i, j))] = out[(s, (j, i))] = complex(self.coeffs[s, k])
        return out


def build_schedule(g: ConnectivityGraph, mode: str = "sequential") -> SlotSchedule:
    if mode not in SCHEDULE_MODES:
        raise ValueError(f"unknown schedule mode {mode!r}")
    if mode == "sequential":
        pairs = tuple((frozenset({i}), frozenset({i})) for i in range(g.node_count))
        return SlotSchedule(pairs, mode)
    groups: list[set[int]] = []
    covered: list[set[int]] = []
    for i in range(g.node_count):
        closed = {i, *g.neighbors(i)}
        for grp, cov in zip(groups, covered):
            if not (cov & closed):
                grp.add(i)
                cov |= closed
                break
        else:
            groups.append({i})
            covered.append(set(closed))
    pairs = tuple((frozenset(grp), frozenset(grp)) for grp in groups)
    return SlotSchedule(pairs, mode)


def draw_channels(g: ConnectivityGraph, schedule: SlotSchedule, seed, noise_std: float = 0.0) -> ChannelRealization:
    """Independent CN(0, 1) coefficient per (slot, link)."""
    rng = np.random.default_rng(seed)
    shape = (schedule.slot_count, len(g.edge_array))
    coeffs = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)
    return ChannelRealization(g, coeffs, float(noise_std))


def alignment_coefficient(
    star: int, neighbor_models: Mapping[int, np.ndarray], w_row, chan: ChannelRealization, power: PowerConfig, slot: int
) -> float:
    """Power alignment factor for one AirComp slot.

    In power-constrained mode this is the largest value for which every
    neighbor's channel-inverted signal stays within ``max_power`` per coordinate.
    """
    if power.alignment_mode == "fixed-gamma":
        return power.gamma
    ratios = []
    for j, theta in neighbor_models.items():
        h2 = abs(chan.gain(slot, star, j)) ** 2
        peak = (w_row[j] * np.max(np.abs(theta))) ** 2 if len(theta) else 0.0
        ratios.append(power.max_power * h2 / max(peak, _POWER_EPS))
    return min(ratios) if ratios else power.max_power


def broadcast_scaling(model: np.ndarray, power: PowerConfig) -> float:
    if power.alignment_mode == "fixed-gamma":
        return power.alpha
    peak = float(np.max(np.abs(model)) ** 2) if len(model) else 0.0
    return power.max_power / max(peak, _POWER_EPS)


def _faded(chan: ChannelRealization, slot: int, star: int, others, floor: float) -> set[int]:
    return {j for j in others if abs(chan.gain(slot, star, j)) < floor}


def aircomp_slot(
    star: int,
    neighbor_models: Mapping[int, np.ndarray],
    w_row,
    chan: ChannelRealization,
    power: PowerConfig,
    slot: int,
    rng=None,
    inversion_floor: float = DEFAULT_INVERSION_FLOOR,
    gamma: float | None = None,
) -> np.ndarray:
    """Star-center estimate ``sum_j w_ij theta_j + z / sqrt(gamma)``.

    Neighbors whose link is below ``inversion_floor`` in this slot cannot invert
    their channel and stay silent. A center with no active neighbor receives
    nothing and returns zeros.
    """
    active = {j: th for j, th in neighbor_models.items() if abs(chan.gain(slot, star, j)) >= inversion_floor}
    if not neighbor_models:
        raise ValueError("aircomp_slot needs at least one neighbor model")
    d = len(next(iter(neighbor_models.values())))
    if not active:
        return np.zeros(d)
    if gamma is None:
        gamma = alignment_coefficient(star, active, w_row, chan, power, slot)
    if gamma <= 0:
        raise ValueError(f"power alignment coefficient must be positive, got {gamma}")
    sqrt_g = math.sqrt(gamma)
    y = np.zeros(d, dtype=complex)
    for j, theta in active.items():
        h = chan.gain(slot, star, j)
        x = sqrt_g * w_row[j] * np.asarray(theta) / h
        y += h * x
    if chan.noise_std > 0:
        y = y + chan.noise_std * np.random.default_rng(rng).standard_normal(d)
    return (y / sqrt_g).real


def broadcast_slot(
    transmitter: int,
    model: np.ndarray,
    receivers,
    w_col,
    chan: ChannelRealization,
    power: PowerConfig,
    slot: int,
    rng=None,
    inversion_floor: float = DEFAULT_INVERSION_FLOOR,
) -> dict[int, np.ndarray | None]:
    """Per-receiver estimate ``w_ji (theta_i + z_j / (sqrt(alpha) h_ji))``.

    Receivers coherently remove the channel phase, so only ``|h|`` scales the
    noise. A receiver below the inversion floor gets ``None`` (estimate missing).
    """
    model = np.asarray(model, dtype=float)
    alpha = broadcast_scaling(model, power)
    if alpha <= 0:
        raise ValueError("broadcast power scaling must be positive")
    gen = np.random.default_rng(rng) if chan.noise_std > 0 else None
    x = math.sqrt(alpha) * model
    out: dict[int, np.ndarray | None] = {}
    for j in receivers:
        h = chan.gain(slot, j, transmitter)
        if abs(h) < inversion_floor:
            out[j] = None
            continue
        y = h * x
        if gen is not None:
            y = y + (h / abs(h)) * chan.noise_std * gen.standard_normal(len(model))
        out[j] = (w_col[j] * y / (math.sqrt(alpha) * h)).real
    return out


@dataclass
class PhasePlan:
    """Which links carry which part of the aggregate in one communication phase."""

    mixing: MixingMatrix  # after symmetric repair of lost links
    aircomp_members: dict[int, tuple[int, ...]]
    recovered: dict[int, tuple[int, ...]]  # neighbors recovered from their broadcast slot
    dropped: frozenset[tuple[int, int]]


def plan_phase(
    schedule: SlotSchedule, chan: ChannelRealization, w: MixingMatrix, inversion_floor: float = DEFAULT_INVERSION_FLOOR
) -> PhasePlan:
    """Resolve deep fades before transmission.

    A neighbor faded in the center's AirComp slot is recovered from its own
    broadcast slot; if that link is faded too, the edge is dropped and its
    weight returned to both diagonals, keeping the matrix doubly stochastic.
    """
    g = w.source_graph
    faded: dict[int, set[int]] = {}
    dropped: set[tuple[int, int]] = set()
    for i in range(g.node_count):
        nbrs = g.neighbors(i)
        if not nbrs:
            faded[i] = set()
            continue
        faded[i] = _faded(chan, schedule.aircomp_slot(i), i, nbrs, inversion_floor)
        for j in faded[i]:
            if abs(chan.gain(schedule.broadcast_slot(j), i, j)) < inversion_floor:
                dropped.add((min(i, j), max(i, j)))
    weights = w.weights
    if dropped:
        weights = weights.copy()
        for i, j in dropped:
            wij = weights[i, j]
            weights[i, j] = weights[j, i] = 0.0
            weights[i, i] += wij
            weights[j, j] += wij
    members: dict[int, tuple[int, ...]] = {}
    recovered: dict[int, tuple[int, ...]] = {}
    for i in range(g.node_count):
        live = [j for j in g.neighbors(i) if (min(i, j), max(i, j)) not in dropped]
        members[i] = tuple(j for j in live if j not in faded[i])
        recovered[i] = tuple(j for j in live if j in faded[i])
    return PhasePlan(MixingMatrix(weights, g), members, recovered, frozenset(dropped))


def _gammas_alphas(plan: PhasePlan, schedule, chan, power, models):
    m = plan.mixing.m
    w = plan.mixing.weights
    gammas = np.full(m, np.nan)
    alphas = np.full(m, np.nan)
    for i in range(m):
        if power.alignment_mode == "fixed-gamma":
            gammas[i] = power.gamma
            alphas[i] = power.alpha
            continue
        if models is None:
            raise ValueError("power-constrained alignment needs the transmitted models")
        if plan.aircomp_members[i]:
            gammas[i] = alignment_coefficient(
                i, {j: models[j] for j in plan.aircomp_members[i]}, w[i], chan, power, schedule.aircomp_slot(i)
            )
        alphas[i] = broadcast_scaling(models[i], power)
    return gammas, alphas


def _noise_variances(plan: PhasePlan, schedule, chan, gammas, alphas) -> np.ndarray:
    s2 = chan.noise_std**2
    w = plan.mixing.weights
    out = np.zeros(plan.mixing.m)
    if s2 == 0:
        return out
    for i in range(plan.mixing.m):
        if plan.aircomp_members[i]:
            out[i] += s2 / gammas[i]
        for j in plan.recovered[i]:
            h2 = abs(chan.gain(schedule.broadcast_slot(j), i, j)) ** 2
            out[i] += w[i, j] ** 2 * s2 / (alphas[j] * h2)
    return out


def effective_consensus_noise_variance(
    device: int,
    schedule: SlotSchedule,
    chan: ChannelRealization,
    power: PowerConfig,
    w: MixingMatrix,
    models=None,
    inversion_floor: float = DEFAULT_INVERSION_FLOOR,
) -> float:
    """Per-coordinate variance of the total estimation noise at ``device``.

    AirComp contributes ``sigma^2 / gamma``; every neighbor recovered through a
    broadcast slot adds ``w_ij^2 sigma^2 / (alpha_j |h|^2)``.
    """
    plan = plan_phase(schedule, chan, w, inversion_floor)
    gammas, alphas = _gammas_alphas(plan, schedule, chan, power, models)
    return float(_noise_variances(plan, schedule, chan, gammas, alphas)[device])


@dataclass
class PhaseResult:
    aggregates: np.ndarray  # row i = sum_j w_ij theta_j + noise, self term included
    noise: np.ndarray
    noise_var: np.ndarray
    plan: PhasePlan

    @property
    def mixing(self) -> MixingMatrix:
        return self.plan.mixing


def communication_phase(
    models: np.ndarray,
    w: MixingMatrix,
    schedule: SlotSchedule,
    chan: ChannelRealization,
    power: PowerConfig,
    rng=None,
    inversion_floor: float = DEFAULT_INVERSION_FLOOR,
) -> PhaseResult:
    """Run every slot pair once and return each device's consensus input."""
    models = np.asarray(models, dtype=float)
    rng = np.random.default_rng(rng)
    plan = plan_phase(schedule, chan, w, inversion_floor)
    gammas, alphas = _gammas_alphas(plan, schedule, chan, power, models)
    wts = plan.mixing.weights
    agg = np.diag(wts)[:, None] * models

    for air, bc in schedule.pairs:
        for i in sorted(air):
            members = plan.aircomp_members[i]
            if members:
                agg[i] += aircomp_slot(
                    i, {j: models[j] for j in members}, wts[i], chan, power,
                    schedule.aircomp_slot(i), rng, inversion_floor, gamma=gammas[i],
                )
        for j in sorted(bc):
            listeners = [i for i in w.source_graph.neighbors(j) if j in plan.recovered[i]]
            if not listeners:
                continue
            got = broadcast_slot(j, models[j], listeners, wts[:, j], chan, power, schedule.broadcast_slot(j), rng, inversion_floor)
            for i, est in got.items():
                agg[i] += est  # never None: plan_phase dropped faded broadcast links

    noise = agg - wts @ models
    return PhaseResult(agg, noise, _noise_variances(plan, schedule, chan, gammas, alphas), plan)
