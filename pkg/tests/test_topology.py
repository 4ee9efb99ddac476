from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adsgd.topology import (
    BaseTopology,
    ConnectivityGraph,
    LinkFailureModel,
    build_base,
    estimate_connectivity_probability,
    is_connected,
    realize_graph,
)


def test_three_ring_is_triangle():
    g = build_base(BaseTopology("ring", 3))
    assert {tuple(e) for e in g.edge_array.tolist()} == {(0, 1), (1, 2), (0, 2)}


def test_complete_mesh_edge_count():
    assert len(build_base(BaseTopology("complete-mesh", 4)).edge_array) == 6


def test_torus_3x3():
    g = build_base(BaseTopology("torus-2d", 9))
    assert len(g.edge_array) == 18
    assert np.all(g.degrees == 4)
    # node 4 sits in the middle of the 3x3 grid: up 1, down 7, left 3, right 5
    assert set(g.neighbors(4)) == {1, 3, 5, 7}
    # node 0 wraps to 2 (left) and 6 (up)
    assert set(g.neighbors(0)) == {1, 2, 3, 6}


@pytest.mark.parametrize("kind,m,deg", [("ring", 9, 2), ("complete-mesh", 7, 6), ("torus-2d", 16, 4)])
def test_base_degrees(kind, m, deg):
    assert np.all(build_base(BaseTopology(kind, m)).degrees == deg)


def test_torus_needs_perfect_square():
    with pytest.raises(ValueError, match="perfect-square"):
        build_base(BaseTopology("torus-2d", 8))


def test_too_few_nodes():
    with pytest.raises(ValueError):
        build_base(BaseTopology("ring", 1))


def test_graph_rejects_self_loops_and_out_of_range():
    with pytest.raises(ValueError):
        ConnectivityGraph(3, [(1, 1)])
    with pytest.raises(ValueError):
        ConnectivityGraph(3, [(0, 3)])


def test_always_on_returns_base(ring9):
    assert realize_graph(ring9, LinkFailureModel(), 5) == ring9


def test_zero_tolerance_drops_everything(ring9):
    g = realize_graph(ring9, LinkFailureModel("delay-tolerance", delay_tolerance=0.0), 3)
    assert len(g.edge_array) == 0


def test_surviving_fraction_delay_tolerance(ring9):
    failure = LinkFailureModel("delay-tolerance", delay_tolerance=1.0, link_time_rate=1.0)
    kept = [len(realize_graph(ring9, failure, s).edge_array) for s in range(10_000)]
    assert abs(np.mean(kept) / 9 - (1 - math.exp(-1))) < 0.01


def test_gain_threshold_keep_probability():
    # |h|^2 ~ Exp(1) for CN(0,1) gains, so P(|h| >= h) = exp(-h^2)
    assert LinkFailureModel("gain-threshold", h_min=1.0).keep_probability() == pytest.approx(math.exp(-1.0))


def test_is_connected_examples(ring9):
    assert is_connected(build_base(BaseTopology("complete-mesh", 5)))
    assert not is_connected(ConnectivityGraph(2, []))
    edges = [tuple(e) for e in ring9.edge_array.tolist()]
    assert is_connected(ConnectivityGraph(9, [e for e in edges if e != (0, 1)]))
    assert not is_connected(ConnectivityGraph(9, [e for e in edges if e not in {(0, 1), (4, 5)}]))


def test_connectivity_probability_trivial_cases(ring9):
    assert estimate_connectivity_probability(ring9, LinkFailureModel(), 50, 0) == 1.0
    assert estimate_connectivity_probability(ring9, LinkFailureModel("delay-tolerance", delay_tolerance=0.0), 50, 0) == 0.0


def test_connectivity_probability_two_seed_agreement():
    mesh = build_base(BaseTopology("complete-mesh", 9))
    median = math.sqrt(math.log(2.0))  # median of a unit-power Rayleigh magnitude
    failure = LinkFailureModel("gain-threshold", h_min=median)
    n = 4000
    a = estimate_connectivity_probability(mesh, failure, n, 1)
    b = estimate_connectivity_probability(mesh, failure, n, 2)
    se = math.sqrt(a * (1 - a) / n + b * (1 - b) / n)
    assert abs(a - b) <= 3 * max(se, 1e-3)


@settings(max_examples=40, deadline=None)
@given(
    kind=st.sampled_from(["ring", "complete-mesh", "torus-2d"]),
    failure=st.sampled_from(["gain-threshold", "delay-tolerance"]),
    seed=st.integers(0, 2**31),
    param=st.floats(0.0, 3.0),
)
def test_realized_edges_subset_and_reproducible(kind, failure, seed, param):
    base = build_base(BaseTopology(kind, 9))
    model = LinkFailureModel(failure, h_min=param, delay_tolerance=param)
    g = realize_graph(base, model, seed)
    base_edges = {tuple(e) for e in base.edge_array.tolist()}
    assert {tuple(e) for e in g.edge_array.tolist()} <= base_edges
    assert realize_graph(base, model, seed) == g
