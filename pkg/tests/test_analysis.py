from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adsgd.analysis import (
    BoundError,
    BoundInputs,
    InsufficientSignalError,
    StatisticsError,
    consensus_noise_constants,
    estimate_staleness_gamma,
    lemma_consensus_bound,
    measure_oracle_on_trace,
    theorem_bound,
    theorem_terms,
    verify_lemma2_on_trace,
)
from adsgd.compute import GradientOracle, QuadraticTask, make_task
from adsgd.engine import ChannelConfig, RunConfig, RunTrace, run
from adsgd.mixing import estimate_consensus_rate
from adsgd.topology import BaseTopology, LinkFailureModel


def inputs(**kw) -> BoundInputs:
    base = dict(p=0.5, zeta=0.5, eta=0.1, m=4, G2=1.0, sigma2=1.0, sigma2_w=[0.1] * 4, L=1.0, gamma=0.2,
                rho=[0.1, 0.2, 0.3, 0.4], T=100, f0=2.0, f_star=0.5)
    base.update(kw)
    return BoundInputs(**base)


def test_consensus_bound_examples():
    assert lemma_consensus_bound(inputs(eta=0.0, sigma2_w=[0.0] * 4)) == 0.0
    one = BoundInputs(p=1.0, zeta=1.0, eta=0.1, m=1, G2=1.0, sigma2=0.0, sigma2_w=[0.0], L=1.0)
    assert lemma_consensus_bound(one) == pytest.approx(0.12)
    no_noise = inputs(sigma2_w=[0.0] * 4)
    assert lemma_consensus_bound(replace(no_noise, eta=0.2)) == pytest.approx(4 * lemma_consensus_bound(no_noise))


def test_consensus_bound_hand_value():
    # 0.1^2 * 12 * 4 * 1 / 0.25^2 + 0.5 * 4 * 0.4
    assert lemma_consensus_bound(inputs()) == pytest.approx(0.01 * 48 / 0.0625 + 0.8)


def test_consensus_bound_undefined():
    with pytest.raises(BoundError):
        lemma_consensus_bound(inputs(p=0.0))


def test_stationarity_bound_hand_value():
    i = inputs()
    gp, rmin = 0.8, 0.6
    expected = (
        8 * 1 * 1.5 / (gp * rmin * 10)
        + 3 * 1 * 1 / (100**0.25 * 0.25 * gp)
        + math.sqrt(1 / 400) * 1 / (4 * gp * rmin)
        + 0.4 / (4 * gp) * (2 * 0.2 / (0.5 * 100**0.375) + 4 / (4 * 100**0.25 * rmin))
    )
    assert theorem_bound(i) == pytest.approx(expected, rel=1e-12)


def test_stationarity_bound_examples():
    zero = inputs(sigma2=0.0, sigma2_w=[0.0] * 4, G2=0.0, f0=0.5)
    assert theorem_bound(zero) == 0.0
    a, b = theorem_terms(inputs(T=16)), theorem_terms(inputs(T=256))
    assert b["optimality_gap"] / a["optimality_gap"] == pytest.approx(0.25)
    assert b["gradient_magnitude"] / a["gradient_magnitude"] == pytest.approx(0.5)
    quiet = inputs(sigma2_w=[0.0] * 4, gamma=0.0)
    assert theorem_bound(replace(quiet, gamma=0.5)) == pytest.approx(2 * theorem_bound(quiet))


def test_stationarity_bound_vacuous():
    with pytest.raises(BoundError):
        theorem_bound(inputs(gamma=1.0))


@settings(max_examples=100, deadline=None)
@given(
    field=st.sampled_from(["G2", "sigma2", "sigma2_w", "L", "gamma", "f0"]),
    factor=st.floats(1.0, 10.0),
    p=st.floats(0.05, 1.0),
    T=st.integers(1, 5000),
)
def test_bounds_monotone(field, factor, p, T):
    lo = inputs(p=p, T=T)
    if field == "sigma2_w":
        hi = replace(lo, sigma2_w=[v * factor for v in lo.sigma2_w])
    elif field == "gamma":
        hi = replace(lo, gamma=min(0.99, lo.gamma * factor))
    elif field == "f0":
        hi = replace(lo, f0=lo.f_star + (lo.f0 - lo.f_star) * factor)
    else:
        hi = replace(lo, **{field: getattr(lo, field) * factor})
    assert theorem_bound(hi) >= theorem_bound(lo) * (1 - 1e-12)
    assert lemma_consensus_bound(hi) >= lemma_consensus_bound(lo) * (1 - 1e-12)


def _trace(models, evals) -> RunTrace:
    models, evals = np.asarray(models, float), np.asarray(evals, float)
    n, m = models.shape[:2]
    return RunTrace(models, evals, np.zeros((n, m), int), np.zeros((n - 1, m)), np.ones((n - 1, m), bool))


def test_staleness_zero_when_synchronous():
    task = make_task("quadratic", 3, 2, seed=0)
    same = np.tile(np.array([1.0, -1.0]), (3, 1))
    assert estimate_staleness_gamma(_trace([same], [same]), task).gamma == pytest.approx(0.0, abs=1e-20)


def test_staleness_fresh_gradients_within_slack():
    task = make_task("quadratic", 4, 3, seed=2)
    rng = np.random.default_rng(0)
    models = rng.standard_normal((20, 4, 3))
    est = estimate_staleness_gamma(_trace(models, models), task)
    assert est.gamma <= 1e-8
    assert np.nanmax(est.ratios) <= 1e-8


def test_staleness_hand_example():
    # f_1 = x^2/2, f_2 = 3x^2/2; both models at 1, device 2's gradient taken at 0.5
    task = QuadraticTask(np.array([[[1.0]], [[3.0]]]), np.zeros((2, 1)))
    est = estimate_staleness_gamma(_trace([[[1.0], [1.0]]], [[[1.0], [0.5]]]), task)
    assert est.gamma == pytest.approx((2.0 - 1.25) ** 2 / 4.0)


def test_staleness_all_skipped():
    task = QuadraticTask(np.array([[[1.0]], [[1.0]]]), np.zeros((2, 1)))
    with pytest.raises(InsufficientSignalError):
        estimate_staleness_gamma(_trace([[[0.0], [0.0]]], [[[0.0], [0.0]]]), task)


def test_consensus_check_needs_seeds():
    with pytest.raises(StatisticsError):
        verify_lemma2_on_trace([0.0] * 29, inputs())


def test_consensus_check_trivial_holds():
    rep = verify_lemma2_on_trace([0.0] * 30, inputs(eta=0.0, sigma2_w=[0.0] * 4))
    assert rep.holds and rep.margin == 0.0 and rep.bound == 0.0


@pytest.fixture(scope="module")
def ring9_runs():
    task = make_task("quadratic", 9, 4, seed=0)
    oracle = GradientOracle(task, noise_std=0.1, noise_kind="sphere")
    cfg = dict(zeta=0.5, eta=0.01, keep_trace=True)
    runs = [run(RunConfig(300, seed=s, **cfg), oracle, BaseTopology("ring", 9), None, ChannelConfig(noise_std=0.01)) for s in range(30)]
    return task, oracle, runs


def test_consensus_bound_on_ring9(ring9_runs):
    task, oracle, runs = ring9_runs
    p = estimate_consensus_rate(BaseTopology("ring", 9), LinkFailureModel(), 10, seed=0).p_hat
    sigma2, G2 = measure_oracle_on_trace(oracle, runs[:3], 500)
    sw = consensus_noise_constants(runs)
    assert sigma2 == pytest.approx(oracle.sigma2, rel=1e-9)
    # d * sigma_w^2 / gamma from AirComp (gamma = 1); links recovered by broadcast can only add to it
    assert sw.min() == pytest.approx(4 * 0.01**2, rel=1e-12)
    assert np.all(sw >= 4 * 0.01**2 * (1 - 1e-12))
    bi = BoundInputs(p=p, zeta=0.5, eta=0.01, m=9, G2=G2, sigma2=sigma2, sigma2_w=sw, L=task.smoothness)
    rep = verify_lemma2_on_trace(runs, bi)
    assert rep.holds and rep.margin > 0
    assert verify_lemma2_on_trace(runs, replace(bi, G2=10 * G2)).holds
