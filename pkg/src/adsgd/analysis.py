"""Consensus and stationarity bounds evaluated against simulated traces."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .compute import GradientOracle, LossTask, measure_oracle_constants
from .engine import RunResult, RunTrace

MIN_SEEDS = 30


class BoundError(ValueError):
    """Inputs for which a bound is undefined or vacuous."""


class InsufficientSignalError(ValueError):
    pass


class StatisticsError(ValueError):
    pass


@dataclass
class BoundInputs:
    p: float
    zeta: float
    eta: float
    m: int
    G2: float
    sigma2: float
    sigma2_w: Sequence[float]
    L: float
    gamma: float = 0.0
    rho: Sequence[float] = field(default_factory=tuple)
    T: int = 1
    f0: float = 0.0
    f_star: float = 0.0

    @property
    def gamma_prime(self) -> float:
        return 1.0 - self.gamma

    @property
    def rho_min(self) -> float:
        """``min_j (1 - rho_j)``; 1 when no straggle probabilities are given."""
        return float(np.min(1.0 - np.asarray(self.rho, dtype=float))) if len(self.rho) else 1.0

    def as_dict(self) -> dict:
        out = asdict(self)
        out["sigma2_w"] = [float(v) for v in self.sigma2_w]
        out["rho"] = [float(v) for v in self.rho]
        return out


def lemma_consensus_bound(inputs: BoundInputs) -> float:
    """``eta^2 12 m G^2 / (p zeta)^2 + zeta (2 / p) sum_i sigma_{w,i}^2``."""
    p, zeta = inputs.p, inputs.zeta
    if not p > 0:
        raise BoundError(f"consensus bound undefined for p = {p}")
    if not 0 < zeta <= 1:
        raise BoundError(f"zeta must lie in (0, 1], got {zeta}")
    drift = inputs.eta**2 * 12.0 * inputs.m * inputs.G2 / (p * zeta) ** 2
    noise = zeta * (2.0 / p) * float(np.sum(inputs.sigma2_w))
    return drift + noise


def theorem_terms(inputs: BoundInputs) -> dict[str, float]:
    """The four summands of the stationarity bound, keyed by what drives them."""
    if inputs.gamma >= 1:
        raise BoundError(f"staleness constant gamma = {inputs.gamma} >= 1 makes the bound vacuous")
    if not inputs.p > 0:
        raise BoundError(f"bound undefined for p = {inputs.p}")
    if inputs.T < 1:
        raise BoundError("T must be >= 1")
    if len(inputs.rho) and np.max(inputs.rho) >= 1:
        raise BoundError("straggle probabilities must be < 1")
    L, T, p, m = inputs.L, float(inputs.T), inputs.p, inputs.m
    gp, rmin, gamma = inputs.gamma_prime, inputs.rho_min, inputs.gamma
    sw = float(np.sum(inputs.sigma2_w))
    return {
        "optimality_gap": 8.0 * math.sqrt(L) * (inputs.f0 - inputs.f_star) / (gp * rmin * math.sqrt(T)),
        "gradient_magnitude": 3.0 * inputs.G2 * L / (T**0.25 * p**2 * gp),
        "gradient_variance": math.sqrt(L / (4.0 * T)) * inputs.sigma2 / (m * gp * rmin),
        "channel_noise": sw / (m * gp) * (2.0 * L**2 * gamma / (p * T**0.375) + 4.0 * L * math.sqrt(L) / (m * T**0.25 * rmin)),
    }


def theorem_bound(inputs: BoundInputs) -> float:
    return float(sum(theorem_terms(inputs).values()))


@dataclass
class StalenessEstimate:
    gamma: float
    skipped: tuple[int, ...]
    ratios: np.ndarray

    def __float__(self) -> float:
        return self.gamma


def _as_traces(trace) -> list[RunTrace]:
    items = trace if isinstance(trace, (list, tuple)) else [trace]
    out = []
    for it in items:
        tr = it.trace if isinstance(it, RunResult) else it
        if tr is None:
            raise ValueError("run was not recorded with keep_trace=True")
        out.append(tr)
    return out


def staleness_moments(trace: RunTrace | RunResult, task: LossTask) -> np.ndarray:
    """Per-iteration ``(LHS, ||grad f(mean)||^2, mean_i ||theta_i - mean||^2)`` for one trace, shape ``(3, T+1)``.

    Sum these over runs and pass the total to :func:`fit_staleness_gamma`; this
    avoids holding every trace in memory for long runs.
    """
    tr = _as_traces(trace)[0]
    models = tr.models
    means = models.mean(axis=1)
    out = np.empty((3, len(models)))
    for t in range(len(models)):
        g_bar = task.grad(means[t])
        diff = g_bar - task.local_grads(tr.eval_points[t]).mean(axis=0)
        out[0, t] = diff @ diff
        out[1, t] = g_bar @ g_bar
        out[2, t] = np.mean(np.sum((models[t] - means[t]) ** 2, axis=1))
    return out


def fit_staleness_gamma(moment_sum: np.ndarray, count: int, L: float, skip_below: float = 1e-12) -> StalenessEstimate:
    lhs, den, cons = np.asarray(moment_sum, dtype=float) / count
    ok = den >= skip_below
    skipped = tuple(int(t) for t in np.flatnonzero(~ok))
    if not ok.any():
        raise InsufficientSignalError("every iteration has a vanishing gradient norm; gamma cannot be fitted")
    ratios = np.full(len(den), np.nan)
    ratios[ok] = (lhs[ok] - L**2 * cons[ok]) / den[ok]
    return StalenessEstimate(max(0.0, float(np.nanmax(ratios))), skipped, ratios)


def estimate_staleness_gamma(trace, task: LossTask, skip_below: float = 1e-12) -> StalenessEstimate:
    """Smallest ``gamma`` satisfying the staleness inequality along the trace.

    For each iteration the expectations are averaged over the given traces
    (pass several seeds for a Monte-Carlo expectation):
    ``gamma_t = (E||grad f(mean) - mean_i grad f_i(stale_i)||^2 - L^2 E[cons]) / E||grad f(mean)||^2``.
    The estimate is ``max(0, max_t gamma_t)``; iterations whose denominator is
    below ``skip_below`` are reported as skipped.
    """
    traces = _as_traces(trace)
    n_t = min(len(tr.models) for tr in traces)
    total = sum(staleness_moments(tr, task)[:, :n_t] for tr in traces)
    return fit_staleness_gamma(total, len(traces), task.smoothness, skip_below)


@dataclass
class Lemma2Report:
    holds: bool
    margin: float
    empirical_mean: float
    stderr: float
    bound: float
    num_seeds: int

    def as_dict(self) -> dict:
        return asdict(self)


def final_consensus_distances(results: Sequence[RunResult | float]) -> np.ndarray:
    return np.array([r.records[-1].consensus_dist if isinstance(r, RunResult) else float(r) for r in results])


def verify_lemma2_on_trace(results: Sequence[RunResult | float], inputs: BoundInputs, min_seeds: int = MIN_SEEDS) -> Lemma2Report:
    """Compare the seed-mean final consensus distance with the consensus bound.

    Holds iff ``mean <= bound + 3 * stderr``; ``margin`` is that slack left over.
    """
    vals = final_consensus_distances(results)
    if len(vals) < min_seeds:
        raise StatisticsError(f"need at least {min_seeds} seeds, got {len(vals)}")
    bound = lemma_consensus_bound(inputs)
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(len(vals)))
    margin = bound + 3.0 * se - mean
    return Lemma2Report(bool(margin >= 0), float(margin), mean, se, float(bound), len(vals))


def consensus_noise_constants(results: Sequence[RunResult]) -> np.ndarray:
    """``sigma_{w,i}^2 = max_t E||n_i^t||^2`` with the expectation averaged over runs."""
    traces = _as_traces(list(results))
    d = traces[0].models.shape[2]
    per_t = np.mean([tr.noise_var for tr in traces], axis=0)  # (T, m)
    if per_t.size == 0:
        return np.zeros(traces[0].models.shape[1])
    return d * per_t.max(axis=0)


def visited_probe_points(results: Sequence[RunResult], count: int = 8) -> list[np.ndarray]:
    """Evenly spaced per-device iterates ``(m, d)`` taken from recorded traces."""
    points = []
    for tr in _as_traces(list(results)):
        idx = np.unique(np.linspace(0, len(tr.models) - 1, count).astype(int))
        points.extend(tr.models[i] for i in idx)
    return points


def measure_oracle_on_trace(oracle: GradientOracle, results: Sequence[RunResult], num_samples: int = 2000, seed=0, count: int = 8):
    return measure_oracle_constants(oracle, visited_probe_points(results, count), num_samples, seed)
