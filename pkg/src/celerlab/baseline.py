"""Path-based comparison routers.

Both routers see the whole network (global knowledge) and only use directed
links whose balance covers the full payment. ``route_shortest_path`` is the
balance-aware minimum-hop router; ``route_landmark`` forces the route through
a high-degree landmark.
"""

from __future__ import annotations

import functools
from collections import deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order

from celerlab.netmodel import NetworkState, RoutingDecision, Topology
from celerlab.traffic import Payment


@dataclass(frozen=True)
class PathRoute:
    payment_id: int
    nodes: tuple[int, ...]
    amount: float

    @property
    def hops(self) -> int:
        return len(self.nodes) - 1


@dataclass(frozen=True)
class LandmarkConfig:
    landmark_count: int = 3

    def landmarks(self, topology: Topology) -> list[int]:
        """The highest-degree nodes, smaller id first among equals."""
        if not 1 <= self.landmark_count <= topology.node_count:
            raise ValueError(f"landmark_count must be in 1..{topology.node_count}")
        return list(_ranked_by_degree(topology)[: self.landmark_count])


@functools.lru_cache(maxsize=32)
def _ranked_by_degree(topology: Topology) -> tuple[int, ...]:
    return tuple(sorted(range(topology.node_count), key=lambda v: (-topology.degree(v), v)))


def bfs_tree(
    state: NetworkState, source: int, min_capacity: float, active: frozenset[int] | None = None
) -> dict[int, int]:
    """Parent map of a minimum-hop tree over links with ``c_ij >= min_capacity``.

    Neighbours are expanded in increasing id order, so the first-discovered
    parent is deterministic.
    """
    topo = state.topology
    caps = state.capacities.tolist()
    index = topo.link_index
    if active is not None and source not in active:
        return {}
    parent = {source: source}
    frontier = deque([source])
    while frontier:
        u = frontier.popleft()
        for v in topo.neighbors[u]:
            if v in parent or (active is not None and v not in active):
                continue
            if caps[index[u, v]] >= min_capacity:
                parent[v] = u
                frontier.append(v)
    return parent


def _trace(parent: dict[int, int], target: int) -> tuple[int, ...] | None:
    if target not in parent:
        return None
    path = [target]
    while parent[path[-1]] != path[-1]:
        path.append(parent[path[-1]])
    return tuple(reversed(path))


def bfs_path(
    state: NetworkState, source: int, target: int, min_capacity: float, active: frozenset[int] | None = None
) -> tuple[int, ...] | None:
    """Pure-Python minimum-hop path; the reference ``PathCache`` is checked against."""
    return _trace(bfs_tree(state, source, min_capacity, active), target)


class PathCache:
    """Per-slot memo of minimum-hop trees keyed by (source, size threshold).

    Trees come from scipy's breadth-first search over a CSR graph with sorted
    column indices, which discovers parents in the same order as ``bfs_tree``.
    """

    def __init__(self, state: NetworkState, active: frozenset[int] | None = None):
        self.state = state
        self.active = active
        self._graphs: dict[float, csr_matrix] = {}
        self._trees: dict[tuple[int, float], list[int] | None] = {}

    def _graph(self, size: float) -> csr_matrix:
        graph = self._graphs.get(size)
        if graph is None:
            topo = self.state.topology
            src, dst = topo.link_endpoints()
            mask = self.state.capacities >= size
            if self.active is not None:
                up = np.zeros(topo.node_count, dtype=bool)
                up[list(self.active)] = True
                mask &= up[src] & up[dst]
            n = topo.node_count
            graph = csr_matrix((np.ones(int(mask.sum())), (src[mask], dst[mask])), shape=(n, n))
            graph.sort_indices()
            self._graphs[size] = graph
        return graph

    def path(self, source: int, target: int, size: float) -> tuple[int, ...] | None:
        key = (source, float(size))
        if key not in self._trees:
            if self.active is not None and source not in self.active:
                self._trees[key] = None
            else:
                _, pred = breadth_first_order(self._graph(key[1]), source, directed=True, return_predecessors=True)
                self._trees[key] = pred.tolist()
        pred = self._trees[key]
        if pred is None:
            return None
        if target == source:
            return (source,)
        if pred[target] < 0:
            return None
        path = [target]
        while path[-1] != source:
            path.append(pred[path[-1]])
        return tuple(reversed(path))


def route_shortest_path(
    payment: Payment,
    state: NetworkState,
    active: frozenset[int] | None = None,
    cache: PathCache | None = None,
) -> PathRoute | None:
    if cache is None:
        cache = PathCache(state, active)
    nodes = cache.path(payment.source, payment.destination, payment.size)
    if nodes is None or len(nodes) < 2:
        return None
    return PathRoute(payment.id, nodes, float(payment.size))


def _splice(first: Sequence[int], second: Sequence[int]) -> tuple[int, ...]:
    # join at the shared landmark, then cut any loop so no node repeats
    joined = list(first) + list(second[1:])
    out: list[int] = []
    pos: dict[int, int] = {}
    for v in joined:
        if v in pos:
            cut = pos[v]
            for dropped in out[cut + 1 :]:
                del pos[dropped]
            out = out[: cut + 1]
        else:
            pos[v] = len(out)
            out.append(v)
    return tuple(out)


def route_landmark(
    payment: Payment,
    state: NetworkState,
    config: LandmarkConfig,
    active: frozenset[int] | None = None,
    cache: PathCache | None = None,
) -> PathRoute | None:
    return route_via_landmarks(payment, state, config.landmarks(state.topology), active, cache)


def route_via_landmarks(
    payment: Payment,
    state: NetworkState,
    landmarks: Sequence[int],
    active: frozenset[int] | None = None,
    cache: PathCache | None = None,
) -> PathRoute | None:
    """First landmark (in the given order) that reaches both ends; plain shortest path otherwise."""
    if cache is None:
        cache = PathCache(state, active)
    s, d, size = payment.source, payment.destination, payment.size
    for lm in landmarks:
        if active is not None and lm not in active:
            continue
        head = cache.path(s, lm, size)
        if head is None:
            continue
        tail = cache.path(lm, d, size)
        if tail is None:
            continue
        nodes = _splice(head, tail)
        if len(nodes) >= 2:
            return PathRoute(payment.id, nodes, float(size))
    return route_shortest_path(payment, state, active, cache)


def paths_to_decision(
    routes: Iterable[PathRoute], state: NetworkState
) -> tuple[RoutingDecision, list[int], list[int]]:
    """Admit routes greedily by payment id against remaining link capacity.

    Returns ``(decision, admitted_ids, dropped_ids)``. Each hop carries the
    payment's destination as its commodity.
    """
    remaining = state.capacities.copy()
    index = state.topology.link_index
    decision = RoutingDecision(slot=state.slot)
    admitted: list[int] = []
    dropped: list[int] = []
    for route in sorted(routes, key=lambda r: r.payment_id):
        hops = [index[(u, v)] for u, v in zip(route.nodes, route.nodes[1:])]
        if all(remaining[h] >= route.amount for h in hops):
            k = route.nodes[-1]
            for (u, v), h in zip(zip(route.nodes, route.nodes[1:]), hops):
                remaining[h] -= route.amount
                decision.add(u, v, k, route.amount)
            admitted.append(route.payment_id)
        else:
            dropped.append(route.payment_id)
    return decision, admitted, dropped
