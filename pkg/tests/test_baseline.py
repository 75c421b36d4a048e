import itertools

import numpy as np
import pytest

from celerlab.baseline import (
    LandmarkConfig,
    PathCache,
    PathRoute,
    _splice,
    bfs_path,
    paths_to_decision,
    route_landmark,
    route_shortest_path,
)
from celerlab.netmodel import Topology, build_state, check_decision_feasible, generate_random_topology, triangle
from celerlab.traffic import Payment

A, B, C = 0, 1, 2


def pay(s, d, size, pid=0):
    return Payment(pid, s, d, size, 0)


def ccw_triangle():
    # after one slot of direct 100-token payments A->B, B->C, C->A
    return build_state(triangle(200), {(A, B): 0.0, (B, C): 0.0, (C, A): 0.0})


def test_direct_route_when_capacity_suffices():
    r = route_shortest_path(pay(A, B, 100), build_state(triangle(200)))
    assert r.nodes == (A, B) and r.hops == 1


def test_counter_clockwise_cycle_takes_long_way():
    assert route_shortest_path(pay(A, B, 100), ccw_triangle()).nodes == (A, C, B)


def test_depleted_links_give_no_route():
    s = build_state(triangle(200))
    assert route_shortest_path(pay(A, B, 101), s) is None
    assert route_landmark(pay(A, B, 101), s, LandmarkConfig(1)) is None


def test_down_node_blocks_route():
    s = ccw_triangle()
    assert route_shortest_path(pay(A, B, 100), s, active=frozenset({A, B})) is None


def test_landmark_on_only_path_matches_shortest():
    line = Topology(3, ((0, 1, 10.0), (1, 2, 10.0)))
    s = build_state(line)
    cfg = LandmarkConfig(1)
    assert cfg.landmarks(line) == [1]
    assert route_landmark(pay(0, 2, 3), s, cfg).nodes == route_shortest_path(pay(0, 2, 3), s).nodes == (0, 1, 2)


def test_star_routes_through_hub():
    star = Topology(5, tuple((0, leaf, 10.0) for leaf in range(1, 5)))
    s = build_state(star)
    for src, dst in itertools.permutations(range(1, 5), 2):
        assert route_landmark(pay(src, dst, 2), s, LandmarkConfig(1)).nodes == (src, 0, dst)


def test_landmark_never_shorter_than_shortest_path():
    topo = generate_random_topology(8, 10, 16, (10, 30))
    s = build_state(topo)
    cfg = LandmarkConfig(2)
    for src, dst in itertools.permutations(range(10), 2):
        lm = route_landmark(pay(src, dst, 4), s, cfg)
        sp = route_shortest_path(pay(src, dst, 4), s)
        assert (lm is None) == (sp is None)
        if lm is not None:
            assert lm.hops >= sp.hops
            assert len(set(lm.nodes)) == len(lm.nodes)
            assert all(v in topo.adjacency[u] for u, v in zip(lm.nodes, lm.nodes[1:]))


def test_landmark_ranking_by_degree_then_id():
    topo = Topology(4, ((0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)))
    assert LandmarkConfig(2).landmarks(topo) == [1, 2]
    with pytest.raises(ValueError):
        LandmarkConfig(5).landmarks(topo)


def test_splice_removes_loops():
    assert _splice((0, 1, 2), (2, 3)) == (0, 1, 2, 3)
    assert _splice((0, 1, 2), (2, 1, 4)) == (0, 1, 4)
    assert _splice((0, 1), (1, 0, 5)) == (0, 5)


@pytest.mark.parametrize("seed", range(8))
def test_path_cache_matches_reference_bfs(seed):
    rng = np.random.default_rng(seed)
    topo = generate_random_topology(seed, 25, 60, (1, 20))
    split = {(a, b): float(rng.uniform(0, dep)) for a, b, dep in topo.channels}
    s = build_state(topo, split)
    active = frozenset(v for v in range(25) if rng.uniform() > 0.15)
    for act in (None, active):
        cache = PathCache(s, act)
        for size in (1, 3, 7):
            for src, dst in itertools.permutations(range(0, 25, 3), 2):
                assert cache.path(src, dst, size) == bfs_path(s, src, dst, size, act)


def test_paths_to_decision_examples():
    topo = Topology(4, ((0, 1, 10.0), (2, 3, 10.0)))
    s = build_state(topo)
    d, admitted, dropped = paths_to_decision([], s)
    assert len(d) == 0 and admitted == dropped == []
    routes = [PathRoute(1, (0, 1), 3.0), PathRoute(2, (2, 3), 4.0)]
    d, admitted, dropped = paths_to_decision(routes, s)
    assert d.entries == {(0, 1, 1): 3.0, (2, 3, 3): 4.0} and admitted == [1, 2]
    routes = [PathRoute(7, (0, 1), 4.0), PathRoute(3, (0, 1), 3.0)]
    d, admitted, dropped = paths_to_decision(routes, s)
    assert admitted == [3] and dropped == [7]
    assert check_decision_feasible(s, d, enforce_backlog=False) is None
