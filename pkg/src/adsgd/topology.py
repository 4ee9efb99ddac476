"""Base topologies and per-iteration random connectivity graphs."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

TOPOLOGY_KINDS = ("complete-mesh", "ring", "torus-2d")
FAILURE_KINDS = ("always-on", "gain-threshold", "delay-tolerance")


@dataclass(frozen=True)
class ConnectivityGraph:
    """Undirected graph over ``node_count`` devices.

    Edges are stored as unordered pairs normalised to ``(i, j)`` with ``i < j``.
    """

    node_count: int
    edges: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if self.node_count < 1:
            raise ValueError(f"node_count must be positive, got {self.node_count}")
        normalised = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop on node {i}")
            if not (0 <= i < self.node_count and 0 <= j < self.node_count):
                raise ValueError(f"edge ({i}, {j}) out of range for {self.node_count} nodes")
            normalised.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(normalised))

    @cached_property
    def edge_array(self) -> np.ndarray:
        """Edges as a sorted ``(E, 2)`` integer array; row order is the canonical edge order."""
        if not self.edges:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array(sorted(self.edges), dtype=np.int64)

    @cached_property
    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.node_count, dtype=np.int64)
        ea = self.edge_array
        np.add.at(deg, ea[:, 0], 1)
        np.add.at(deg, ea[:, 1], 1)
        return deg

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        nbrs: list[list[int]] = [[] for _ in range(self.node_count)]
        for i, j in self.edge_array:
            nbrs[i].append(int(j))
            nbrs[j].append(int(i))
        return tuple(tuple(sorted(n)) for n in nbrs)

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self.adjacency[i]

    def subgraph(self, keep: np.ndarray) -> ConnectivityGraph:
        """Graph on the same nodes keeping the edges flagged in ``keep`` (canonical order)."""
        kept = self.edge_array[np.asarray(keep, dtype=bool)]
        return ConnectivityGraph(self.node_count, frozenset(map(tuple, kept.tolist())))

    def __len__(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class BaseTopology:
    kind: str
    node_count: int

    def __post_init__(self) -> None:
        if self.kind not in TOPOLOGY_KINDS:
            raise ValueError(f"unknown topology kind {self.kind!r}; expected one of {TOPOLOGY_KINDS}")


@dataclass(frozen=True)
class LinkFailureModel:
    """Per-iteration, per-edge link failure process.

    Only the parameters of the selected ``kind`` are consulted.
    """

    kind: str = "always-on"
    h_min: float = 0.0
    delay_tolerance: float = 1.0
    link_time_rate: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in FAILURE_KINDS:
            raise ValueError(f"unknown failure kind {self.kind!r}; expected one of {FAILURE_KINDS}")
        if self.kind == "gain-threshold" and self.h_min < 0:
            raise ValueError("h_min must be nonnegative")
        if self.kind == "delay-tolerance":
            if self.delay_tolerance < 0:
                raise ValueError("delay_tolerance must be nonnegative")
            if self.link_time_rate <= 0:
                raise ValueError("link_time_rate must be positive")

    def keep_probability(self) -> float:
        """Marginal probability that a single base edge survives."""
        if self.kind == "always-on":
            return 1.0
        if self.kind == "gain-threshold":
            return math.exp(-self.h_min**2)
        return 1.0 - math.exp(-self.link_time_rate * self.delay_tolerance)


def build_base(topology: BaseTopology) -> ConnectivityGraph:
    m = topology.node_count
    if m < 2:
        raise ValueError(f"{topology.kind} needs node_count >= 2, got {m}")
    edges: set[tuple[int, int]] = set()
    if topology.kind == "complete-mesh":
        edges = {(i, j) for i in range(m) for j in range(i + 1, m)}
    elif topology.kind == "ring":
        edges = {(min(i, (i + 1) % m), max(i, (i + 1) % m)) for i in range(m)}
    else:
        side = math.isqrt(m)
        if side * side != m:
            raise ValueError(f"torus-2d needs a perfect-square node_count (e.g. 9 = 3x3), got {m}")
        for r in range(side):
            for c in range(side):
                u = r * side + c
                for v in (((r + 1) % side) * side + c, r * side + (c + 1) % side):
                    if u != v:
                        edges.add((min(u, v), max(u, v)))
    return ConnectivityGraph(m, frozenset(edges))


def rayleigh_gains(rng: np.random.Generator, size) -> np.ndarray:
    """Magnitudes of unit-power circularly-symmetric complex Gaussian draws (E|h|^2 = 1)."""
    h = (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / math.sqrt(2.0)
    return np.abs(h)


def realize_graph(base: ConnectivityGraph, failure: LinkFailureModel, rng_seed) -> ConnectivityGraph:
    """Draw one connectivity graph: each base edge survives independently.

    ``rng_seed`` may be an int, a ``SeedSequence`` or a ``Generator``.
    """
    if failure.kind == "always-on":
        return base
    rng = np.random.default_rng(rng_seed)
    n_edges = len(base.edge_array)
    if failure.kind == "gain-threshold":
        keep = rayleigh_gains(rng, n_edges) >= failure.h_min
    else:
        times = rng.exponential(1.0 / failure.link_time_rate, n_edges)
        keep = times <= failure.delay_tolerance
    return base.subgraph(keep)


def is_connected(g: ConnectivityGraph) -> bool:
    m = g.node_count
    if m == 1:
        return True
    if len(g.edges) < m - 1:
        return False
    seen = {0}
    queue = deque([0])
    adj = g.adjacency
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == m


def estimate_connectivity_probability(
    base: ConnectivityGraph, failure: LinkFailureModel, num_samples: int, seed
) -> float:
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if failure.kind == "always-on":
        return float(is_connected(base))
    rng = np.random.default_rng(seed)
    hits = sum(is_connected(realize_graph(base, failure, rng)) for _ in range(num_samples))
    return hits / num_samples
