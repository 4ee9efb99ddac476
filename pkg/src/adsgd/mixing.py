"""Metropolis-Hastings mixing matrices, spectral gaps and expected consensus rates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .topology import ConnectivityGraph, LinkFailureModel, build_base, is_connected, realize_graph, BaseTopology

# Below this a spectral gap is indistinguishable from a disconnected graph's exact zero.
GAP_FLOOR = 1e-12


@dataclass(frozen=True)
class MixingMatrix:
    weights: np.ndarray
    source_graph: ConnectivityGraph

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    def check(self, atol: float = 1e-12) -> None:
        """Raise ``ValueError`` unless the matrix is symmetric, doubly stochastic and supported on the graph."""
        w = self.weights
        if not np.allclose(w, w.T, rtol=0.0, atol=atol):
            raise ValueError("mixing matrix is not symmetric")
        if np.max(np.abs(w.sum(axis=1) - 1.0)) > atol or np.max(np.abs(w.sum(axis=0) - 1.0)) > atol:
            raise ValueError("mixing matrix is not doubly stochastic")
        if np.min(w) < -atol:
            raise ValueError("mixing matrix has negative entries")
        support = np.eye(self.m, dtype=bool)
        ea = self.source_graph.edge_array
        support[ea[:, 0], ea[:, 1]] = True
        support[ea[:, 1], ea[:, 0]] = True
        if np.any(np.abs(w[~support]) > 0):
            raise ValueError("mixing matrix has weight on a non-edge")


@dataclass(frozen=True)
class ConsensusRateEstimate:
    p_hat: float
    num_samples: int
    q_hat: float
    delta_hat: float
    p_stderr: float = 0.0


def metropolis_hastings(g: ConnectivityGraph) -> MixingMatrix:
    m = g.node_count
    w = np.zeros((m, m))
    ea = g.edge_array
    if len(ea):
        deg = g.degrees
        u, v = ea[:, 0], ea[:, 1]
        vals = 1.0 / (1.0 + np.maximum(deg[u], deg[v]))
        w[u, v] = vals
        w[v, u] = vals
    w[np.diag_indices(m)] = 1.0 - w.sum(axis=1)
    return MixingMatrix(w, g)


def _eigvalsh(a: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.eigvalsh(a)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - symmetric solvers converge
        raise RuntimeError(f"symmetric eigensolver failed on a {a.shape} matrix: {exc}") from exc


def spectral_gap(w: MixingMatrix | np.ndarray) -> float:
    """One minus the second-largest eigenvalue modulus."""
    a = w.weights if isinstance(w, MixingMatrix) else np.asarray(w)
    if a.shape[0] == 1:
        return 1.0
    lam = _eigvalsh(a)  # ascending; lam[-1] == 1 for a stochastic matrix
    slem = max(abs(lam[-2]), abs(lam[0]))
    gap = 1.0 - slem
    if gap < GAP_FLOOR:
        return 0.0
    return min(gap, 1.0)


def sample_spectral_gaps(base: BaseTopology | ConnectivityGraph, failure: LinkFailureModel, num_samples: int, seed) -> np.ndarray:
    """Spectral gap of the MH matrix for ``num_samples`` independent realizations.

    Sample ``k`` uses its own stream derived from ``(seed, k)``, so sweeps over a
    failure parameter see coupled draws at matched seeds.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    g0 = build_base(base) if isinstance(base, BaseTopology) else base
    if failure.kind == "always-on":
        return np.full(num_samples, spectral_gap(metropolis_hastings(g0)))
    streams = np.random.SeedSequence(seed).spawn(num_samples)
    return np.array([spectral_gap(metropolis_hastings(realize_graph(g0, failure, s))) for s in streams])


def average_spectral_gap(base: BaseTopology | ConnectivityGraph, failure: LinkFailureModel, num_samples: int, seed) -> float:
    return float(np.mean(sample_spectral_gaps(base, failure, num_samples, seed)))


def _centering(m: int) -> np.ndarray:
    return np.eye(m) - np.full((m, m), 1.0 / m)


def _worst_direction(second_moment: np.ndarray) -> tuple[float, np.ndarray]:
    """Largest eigenpair of E[W^T W] restricted to the zero-mean subspace."""
    m = second_moment.shape[0]
    c = _centering(m)
    lam, vec = np.linalg.eigh(c @ second_moment @ c)
    return float(lam[-1]), vec[:, -1]


def estimate_consensus_rate(
    base: BaseTopology | ConnectivityGraph,
    failure: LinkFailureModel,
    num_samples: int,
    probe_count: int = 16,
    seed=0,
    dimension: int = 4,
) -> ConsensusRateEstimate:
    """Monte-Carlo estimate of the expected consensus rate of random MH matrices.

    The contraction ratio for probe ``X`` is ``E||W X - Xbar||_F^2 / ||X - Xbar||_F^2``.
    Random zero-mean probes are complemented by the top eigenvector of the
    centred ``E[W^T W]``, which attains the worst case. ``delta_hat`` repeats the
    computation using only the connected realizations.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    g0 = build_base(base) if isinstance(base, BaseTopology) else base
    m = g0.node_count
    rng = np.random.default_rng(seed)
    c = _centering(m)

    probes = []
    for _ in range(probe_count):
        x = c @ rng.standard_normal((m, dimension))
        if np.linalg.norm(x) > 1e-12:
            probes.append(x)

    sq_all = np.zeros((m, m))
    sq_conn = np.zeros((m, m))
    n_conn = 0
    mats = []
    for _ in range(num_samples):
        g = realize_graph(g0, failure, rng)
        w = metropolis_hastings(g).weights
        wtw = w.T @ w
        sq_all += wtw
        if is_connected(g):
            sq_conn += wtw
            n_conn += 1
        mats.append(w)
    sq_all /= num_samples

    _, v = _worst_direction(sq_all)
    v = c @ v
    if np.linalg.norm(v) > 1e-12:
        v = v / np.linalg.norm(v)
        probes.append(v[:, None])
    if not probes:
        raise ValueError("all consensus probes are constant across devices; need non-constant probes")

    def ratio(x: np.ndarray) -> float:
        return float(np.trace(x.T @ sq_all @ x) / np.sum(x * x))

    worst = max(ratio(x) for x in probes)
    p_hat = min(max(1.0 - worst, 0.0), 1.0)

    # per-sample contraction along the worst direction gives the Monte-Carlo error
    per_sample = np.array([np.sum((w @ v) ** 2) for w in mats])
    p_stderr = float(per_sample.std(ddof=1) / np.sqrt(num_samples)) if num_samples > 1 else 0.0

    q_hat = n_conn / num_samples
    if n_conn:
        lam_c, _ = _worst_direction(sq_conn / n_conn)
        delta_hat = min(max(1.0 - lam_c, 0.0), 1.0)
    else:
        delta_hat = 0.0
    return ConsensusRateEstimate(p_hat=p_hat, num_samples=num_samples, q_hat=q_hat, delta_hat=delta_hat, p_stderr=p_stderr)
