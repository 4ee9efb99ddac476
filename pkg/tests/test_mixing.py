from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adsgd.mixing import (
    average_spectral_gap,
    estimate_consensus_rate,
    metropolis_hastings,
    sample_spectral_gaps,
    spectral_gap,
)
from adsgd.topology import BaseTopology, ConnectivityGraph, LinkFailureModel, build_base, realize_graph

from conftest import circulant_ring_mh, slem_gap


def test_triangle_uniform():
    w = metropolis_hastings(build_base(BaseTopology("ring", 3)))
    np.testing.assert_allclose(w.weights, np.full((3, 3), 1 / 3), atol=1e-15)


def test_four_ring_weights():
    w = metropolis_hastings(build_base(BaseTopology("ring", 4))).weights
    np.testing.assert_allclose(w, circulant_ring_mh(4), atol=1e-15)


def test_empty_graph_identity():
    np.testing.assert_array_equal(metropolis_hastings(ConnectivityGraph(3, [])).weights, np.eye(3))


def test_irregular_graph_hand_weights():
    # star on 4 nodes: centre degree 3, leaves degree 1 -> w = 1/4 on every edge
    w = metropolis_hastings(ConnectivityGraph(4, [(0, 1), (0, 2), (0, 3)])).weights
    expected = np.array([[0.25, 0.25, 0.25, 0.25], [0.25, 0.75, 0, 0], [0.25, 0, 0.75, 0], [0.25, 0, 0, 0.75]])
    np.testing.assert_allclose(w, expected, atol=1e-15)


def test_spectral_gap_examples():
    assert spectral_gap(np.full((5, 5), 0.2)) == pytest.approx(1.0, abs=1e-12)
    assert spectral_gap(np.eye(4)) == pytest.approx(0.0, abs=1e-12)
    w4 = metropolis_hastings(build_base(BaseTopology("ring", 4)))
    assert spectral_gap(w4) == pytest.approx(2 / 3, abs=1e-12)
    assert spectral_gap(w4) == pytest.approx(slem_gap(circulant_ring_mh(4)), abs=1e-12)


def test_average_gap_trivial_cases():
    mesh = build_base(BaseTopology("complete-mesh", 9))
    assert average_spectral_gap(mesh, LinkFailureModel(), 20, 0) == pytest.approx(1.0, abs=1e-12)
    assert average_spectral_gap(mesh, LinkFailureModel("delay-tolerance", delay_tolerance=0.0), 20, 0) == 0.0


def test_average_gap_static_ring(ring9):
    assert average_spectral_gap(ring9, LinkFailureModel(), 10, 0) == pytest.approx(slem_gap(circulant_ring_mh(9)), abs=1e-12)


def test_gap_samples_deterministic(ring9):
    f = LinkFailureModel("delay-tolerance", delay_tolerance=1.0)
    np.testing.assert_array_equal(sample_spectral_gaps(ring9, f, 50, 7), sample_spectral_gaps(ring9, f, 50, 7))


def test_consensus_rate_trivial_cases(ring9):
    mesh = build_base(BaseTopology("complete-mesh", 9))
    assert estimate_consensus_rate(mesh, LinkFailureModel(), 20, seed=0).p_hat == pytest.approx(1.0, abs=1e-12)
    assert estimate_consensus_rate(ring9, LinkFailureModel("delay-tolerance", delay_tolerance=0.0), 20, seed=0).p_hat == pytest.approx(0.0, abs=1e-12)


def test_consensus_rate_static_ring(ring9):
    w = circulant_ring_mh(9)
    oracle = 1 - (1 - slem_gap(w)) ** 2
    est = estimate_consensus_rate(ring9, LinkFailureModel(), 10, seed=0)
    assert est.p_hat == pytest.approx(oracle, abs=1e-10)
    assert est.q_hat == 1.0


def test_consensus_rate_degenerate_probe():
    with pytest.raises(ValueError):
        estimate_consensus_rate(ConnectivityGraph(1, []), LinkFailureModel(), 5, seed=0)


def test_rate_product_relation_holds_exactly_on_estimator(ring9):
    for h in (0.3, 0.6, 1.0):
        est = estimate_consensus_rate(ring9, LinkFailureModel("gain-threshold", h_min=h), 500, seed=1)
        assert 0 <= est.p_hat <= 1 and 0 <= est.q_hat <= 1 and 0 <= est.delta_hat <= 1
        assert est.p_hat >= est.q_hat * est.delta_hat - 1e-12


@settings(max_examples=60, deadline=None)
@given(
    kind=st.sampled_from(["ring", "complete-mesh", "torus-2d"]),
    seed=st.integers(0, 2**31),
    tol=st.floats(0.0, 4.0),
)
def test_mh_invariants_and_nonexpansive(kind, seed, tol):
    base = build_base(BaseTopology(kind, 9))
    g = realize_graph(base, LinkFailureModel("delay-tolerance", delay_tolerance=tol), seed)
    w = metropolis_hastings(g).weights
    assert np.allclose(w, w.T, atol=1e-12)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(w >= 0)
    adj = np.eye(9, dtype=bool)
    for i, j in g.edge_array:
        adj[i, j] = adj[j, i] = True
    assert np.all(w[~adj] == 0)
    x = np.random.default_rng(seed).standard_normal((9, 3))
    dev = x - x.mean(axis=0)
    out = w @ x
    assert np.sum((out - out.mean(axis=0)) ** 2) <= np.sum(dev**2) + 1e-12
