"""Yen against exhaustive enumeration of grammar-valid simple paths."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from urtcg.network import k_shortest_paths

from conftest import oracle_top_k, random_network


def _compare(net, weights, k, detour):
    for od in net.od_pairs():
        got = [p.nodes for p in k_shortest_paths(net, od, k, weights, detour)]
        want = [p[1] for p in oracle_top_k(net, od, weights, k, detour)]
        assert got == want, od


def test_hundred_small_graphs_match_brute_force():
    rng = np.random.default_rng(20240601)
    checked = 0
    while checked < 100:
        net = random_network(rng, int(rng.integers(2, 4)), 1)
        assert len(net.nodes) <= 12
        _compare(net, rng.uniform(0.0, 3.0, len(net.links)), 3, 1.5)
        checked += 1


@pytest.mark.parametrize("integer_dist", [False, True])
def test_larger_multiline_graphs_match_brute_force(integer_dist):
    # integer distances make equal-cost ties common, exercising the node-sequence tie-break
    rng = np.random.default_rng(7 + integer_dist)
    for _ in range(25):
        net = random_network(rng, int(rng.integers(3, 7)), int(rng.integers(2, 4)), integer_dist)
        _compare(net, net.prior_weights(), 5, 2.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 6), detour=st.floats(1.0, 3.0))
def test_yen_matches_oracle_property(seed, k, detour):
    rng = np.random.default_rng(seed)
    net = random_network(rng, int(rng.integers(2, 6)), int(rng.integers(1, 3)))
    _compare(net, rng.uniform(0.0, 2.0, len(net.links)), k, detour)
