import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from urtcg.network import (ENTRY_CODE_OFFSET, ENTRY_EXIT_LINE, TRANSFER_LINE, Direction, LinkKind, LinkRow,
                           NetworkError, NodeKind, PriorSpeeds, Station, expand_station, k_shortest_paths,
                           link_table_csv, load_link_table, load_network, network_from_json, network_to_json,
                           read_link_table, save_network, to_link_rows, validate_network, write_link_table)
from urtcg.synth import fig3_link_rows, fig8_link_rows

from conftest import random_link_rows


# ---------------------------------------------------------------- expansion


def test_general_station_expands_to_four_nodes():
    nodes, links = expand_station(Station(7, "S7", (1,)), 0, 0, entry_distance=500.0, transfer_distances={},
                                  speeds=PriorSpeeds())
    assert Counter(n.kind for n in nodes) == {NodeKind.GATE: 1, NodeKind.PLATFORM: 1, NodeKind.TRAIN_GATE: 2}
    assert Counter(a.kind for a in links) == {LinkKind.ENTRY: 1, LinkKind.EXIT: 1, LinkKind.BOARD: 2,
                                              LinkKind.ALIGHT: 2}


def test_two_line_transfer_station_expands_to_seven_nodes():
    nodes, links = expand_station(Station(2, "S2", (1, 2)), 0, 0, entry_distance=900.0,
                                  transfer_distances={(2, 1, 2): 600.0}, speeds=PriorSpeeds())
    assert len(nodes) == 7
    kinds = Counter(a.kind for a in links)
    assert kinds[LinkKind.TRANSFER] == 2          # one walk each way between the two platforms
    assert kinds[LinkKind.ENTRY] == 2 and kinds[LinkKind.EXIT] == 2


def test_station_without_lines_is_rejected():
    with pytest.raises(NetworkError):
        expand_station(Station(1, "S1", ()), 0, 0, entry_distance=None, transfer_distances={}, speeds=PriorSpeeds())


def test_fig3_shape(fig3):
    # 4 general stations * 4 nodes + 1 transfer station * 7 nodes
    assert len(fig3.nodes) == 23
    assert len(fig3.links) == 38
    assert validate_network(fig3) == []
    assert fig3.station(2).is_transfer
    assert len(fig3.od_pairs()) == 20


def test_fig8_shape_and_aliases(fig8):
    assert len(fig8.stations) == 14
    assert sum(s.is_transfer for s in fig8.stations) == 6
    assert len(fig8.nodes) == 8 * 4 + 6 * 7
    assert len(fig8.links) == 160
    assert validate_network(fig8) == []
    for alias, sid in {104: 4, 102: 2, 109: 9, 103: 3, 110: 10, 106: 6}.items():
        assert fig8.canonical_station(alias) == sid
    assert fig8.station(4).code_on(2) == 104


def test_vehicle_prior_uses_train_speed(fig3):
    # 2000 m at 30 km/h (500 m/min) -> 4 minutes
    veh = [a for a in fig3.links if a.kind is LinkKind.VEHICLE and a.distance_m == 2000]
    assert veh and all(a.prior_time_min == pytest.approx(4.0) for a in veh)
    assert PriorSpeeds().m_per_min(30) == pytest.approx(500.0)
    assert 2606 / PriorSpeeds.m_per_min(30) == pytest.approx(5.212)


def test_board_and_alight_priors(fig3):
    assert {a.prior_time_min for a in fig3.links_of_kind(LinkKind.BOARD)} == {2.0}
    assert {a.prior_time_min for a in fig3.links_of_kind(LinkKind.ALIGHT)} == {0.0}


def test_terminal_train_gates_have_no_dead_board_links(fig3):
    # a train leaving station 3 on line 1 can only go Down, so no Up board link at 3
    for a in fig3.links_of_kind(LinkKind.BOARD):
        assert any(fig3.links[o].kind is LinkKind.VEHICLE for o in fig3.out_links(a.head))


# ---------------------------------------------------------------- link table


def test_link_table_round_trip_is_byte_identical(tmp_path, fig8):
    p = tmp_path / "net.csv"
    write_link_table(fig8, p)
    again = read_link_table(p)
    assert again == fig8
    assert link_table_csv(again) == p.read_text()


def test_snapshot_round_trip(tmp_path, fig8):
    p = tmp_path / "net.json"
    save_network(fig8, p)
    assert load_network(p) == fig8
    assert network_from_json(network_to_json(fig8)) == fig8


def test_read_link_table_rejects_wrong_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(NetworkError):
        read_link_table(p)


@pytest.mark.parametrize("mutate, message", [
    (lambda rows: [], "no links"),
    (lambda rows: rows + [rows[0]], "duplicate"),
    (lambda rows: [r if i else LinkRow(*(list(vars(r).values())[:6] + [0.0])) for i, r in enumerate(rows)],
     "non-positive"),
    (lambda rows: rows + [LinkRow(ENTRY_CODE_OFFSET + 99, 99, 2, ENTRY_EXIT_LINE, "X", "X", 500.0)], "unknown"),
])
def test_link_table_errors(mutate, message):
    with pytest.raises(NetworkError, match=message):
        load_link_table(mutate(fig3_link_rows()))


def test_missing_entry_distance_falls_back_to_default_walk():
    rows = [r for r in fig3_link_rows() if not (r.line == ENTRY_EXIT_LINE and r.destination_station == 5)]
    net = load_link_table(rows)
    entry5 = [a for a in net.links_of_kind(LinkKind.ENTRY) if net.nodes[a.tail].station_id == 5]
    assert entry5[0].prior_time_min == PriorSpeeds().default_walk_min


def test_validate_flags_asymmetric_direction():
    rows = [r for r in fig3_link_rows() if not (r.line == 2 and r.direction == 1 and r.origin_station == 5)]
    codes = {i.code for i in validate_network(load_link_table(rows))}
    assert "asymmetric-direction" in codes


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(1, 3))
def test_random_link_tables_round_trip(seed, n_st, n_lines):
    net = load_link_table(random_link_rows(np.random.default_rng(seed), n_st, n_lines))
    assert load_link_table(to_link_rows(net)) == net
    for s in net.stations:
        expected = 4 if len(s.lines) == 1 else 3 * len(s.lines) + 1
        assert sum(n.station_id == s.station_id for n in net.nodes) == expected


# ---------------------------------------------------------------- paths


def test_fig3_same_line_path_by_hand(fig3):
    # entry 700 m + board 2 + 2000 m + 1500 m + exit 600 m, all distances at 500 m/min
    (p,) = k_shortest_paths(fig3, (1, 3), k=3)
    assert p.prior_cost_min == pytest.approx(1.4 + 2.0 + 4.0 + 3.0 + 0.0 + 1.2)
    assert [fig3.links[i].kind for i in p.links] == [LinkKind.ENTRY, LinkKind.BOARD, LinkKind.VEHICLE,
                                                    LinkKind.VEHICLE, LinkKind.ALIGHT, LinkKind.EXIT]
    assert len(p.wait_events) == 1


def test_fig3_transfer_path_by_hand(fig3):
    (p,) = k_shortest_paths(fig3, (1, 4), k=3)
    assert p.prior_cost_min == pytest.approx(1.4 + 2 + 4 + 1.2 + 2 + 3.6 + 1.6)
    assert len(p.wait_events) == 2
    assert [fig3.links[i].kind for i in p.links].count(LinkKind.TRANSFER) == 1


def test_wait_events_equal_one_plus_transfers(fig8):
    for od in fig8.od_pairs()[::7]:
        for p in k_shortest_paths(fig8, od, k=3):
            n_tr = sum(fig8.links[i].kind is LinkKind.TRANSFER for i in p.links)
            assert len(p.wait_events) == 1 + n_tr
            assert len(set(p.nodes)) == len(p.nodes)


def test_ring_line_gives_two_directions(fig8):
    paths = k_shortest_paths(fig8, (8, 10), k=3, detour_factor=10.0)
    dirs = {fig8.links[p.links[2]].direction for p in paths}
    assert dirs == {Direction.UP, Direction.DOWN}


def test_paths_sorted_and_within_detour(fig8):
    for od in [(1, 14), (7, 11), (5, 8)]:
        paths = k_shortest_paths(fig8, od, k=3)
        costs = [p.prior_cost_min for p in paths]
        assert costs == sorted(costs)
        assert costs[-1] <= 1.5 * costs[0] + 1e-9


def test_unreachable_od_warns_and_returns_empty():
    rows = fig3_link_rows() + [
        LinkRow(8, 9, 0, 3, "S8", "S9", 1000.0), LinkRow(9, 8, 1, 3, "S9", "S8", 1000.0)]
    net = load_link_table(rows)
    with pytest.warns(UserWarning):
        assert k_shortest_paths(net, (1, 9)) == []


def test_k_must_be_positive(fig3):
    with pytest.raises(ValueError):
        k_shortest_paths(fig3, (1, 3), k=0)


def test_negative_weights_rejected(fig3):
    w = fig3.prior_weights()
    w[0] = -1
    with pytest.raises(ValueError):
        k_shortest_paths(fig3, (1, 3), weights=w)


def test_path_search_is_deterministic(fig8):
    a = [k_shortest_paths(fig8, od, 3) for od in fig8.od_pairs()[:40]]
    b = [k_shortest_paths(fig8, od, 3) for od in fig8.od_pairs()[:40]]
    assert a == b
    assert all(math.isfinite(p.prior_cost_min) for ps in a for p in ps)


def test_fig8_link_rows_contain_transfer_aliases():
    tr = [r for r in fig8_link_rows() if r.line == TRANSFER_LINE]
    assert len(tr) == 6
