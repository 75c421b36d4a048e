"""Distributed Balanced Routing: CPI weights and the per-link send rule.

Two send rules are supported. With ``backlog_cap`` (the default) a node never
relays more of a commodity than it holds (queue plus fresh arrivals), so tokens
are conserved. Links are visited in descending order of the value they could
reach alone, and each one fills its capacity from its positive-weight
commodities, heaviest first, drawing on the node's shared remaining backlog.
Without the cap a link carries its full capacity of the best commodity whenever
that weight is positive; the queue clamp then mints the excess as rebalancing
tokens."""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from celerlab.netmodel import NetworkState, RoutingDecision


@dataclass(frozen=True)
class DbrParams:
    beta: float = 1.0
    backlog_cap: bool = True

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")


def cpi_weight(q_i: float, q_j: float, delta_ij: float, beta: float) -> float:
    return q_i - q_j + beta * delta_ij


def link_weights(state: NetworkState, beta: float) -> np.ndarray:
    """``W[link, k]`` for every directed link and commodity; ``k == i`` is ``-inf``."""
    src, dst = state.topology.link_endpoints()
    q = state.queues
    w = q[src] - q[dst] + beta * state.imbalances[:, None]
    w[np.arange(len(src)), src] = -np.inf
    return w


def _active_links(state: NetworkState, active: Iterable[int] | None) -> np.ndarray:
    src, dst = state.topology.link_endpoints()
    if active is None:
        return np.ones(len(src), dtype=bool)
    up = np.zeros(state.topology.node_count, dtype=bool)
    up[list(active)] = True
    return up[src] & up[dst]


def _by_weight(weights: np.ndarray) -> list[int]:
    """Positive-weight commodities, heaviest first (ties to the smaller id)."""
    ks = np.nonzero(weights > 0)[0]
    return ks[np.argsort(-weights[ks], kind="stable")].tolist()


def _fill_value(weights: np.ndarray, backlog: np.ndarray, cap: float) -> float:
    """Best weight one link earns alone: fill capacity heaviest commodity first."""
    value, room = 0.0, float(cap)
    for k in _by_weight(weights):
        amount = min(room, float(backlog[k]))
        value += amount * weights[k]
        room -= amount
        if room <= 0:
            break
    return value


def decide_slot(
    state: NetworkState,
    arrivals: np.ndarray,
    params: DbrParams,
    active: Iterable[int] | None = None,
) -> RoutingDecision:
    topo = state.topology
    src, dst = topo.link_endpoints()
    w = link_weights(state, params.beta)
    best = np.argmax(w, axis=1)  # first maximum -> smallest commodity id
    best_w = w[np.arange(len(src)), best]
    live = _active_links(state, active) & (best_w > 0) & (state.capacities > 0)
    decision = RoutingDecision(slot=state.slot)
    # link order (i, j) ascending so shared backlog is consumed deterministically
    live_idx = np.nonzero(live)[0]
    order = live_idx[np.lexsort((dst[live_idx], src[live_idx]))].tolist()
    if params.backlog_cap:
        backlog = state.queues + arrivals
        order = sorted(order, key=lambda idx: -_fill_value(w[idx], backlog[src[idx]], state.capacities[idx]))
        for idx in order:
            i, j = int(src[idx]), int(dst[idx])
            room = float(state.capacities[idx])
            for k in _by_weight(w[idx]):
                if room <= 0:
                    break
                amount = min(room, float(backlog[i, k]))
                if amount > 0:
                    backlog[i, k] -= amount
                    room -= amount
                    decision.add(i, j, k, amount)
    else:
        for idx in order:
            decision.add(int(src[idx]), int(dst[idx]), int(best[idx]), float(state.capacities[idx]))
    return decision


def message_count(state: NetworkState, active: Iterable[int] | None = None) -> int:
    """Queue-length messages exchanged per slot: two per active directed link and commodity."""
    return int(2 * _active_links(state, active).sum() * state.topology.node_count)


def maxweight_objective(decision: RoutingDecision, state: NetworkState, params: DbrParams) -> float:
    q = state.queues
    total = 0.0
    for (i, j, k), amt in decision.entries.items():
        total += amt * cpi_weight(q[i, k], q[j, k], state.imbalance(i, j), params.beta)
    return total


class InstanceTooLarge(ValueError):
    pass


def exact_maxweight_small(
    state: NetworkState,
    arrivals: np.ndarray,
    params: DbrParams,
    grid: float = 1.0,
    active: Iterable[int] | None = None,
) -> RoutingDecision:
    """Brute-force MaxWeight over decisions quantized to ``grid``.

    Feasible decisions respect each direction's capacity (which implies the
    joint per-channel deposit bound) and, under ``backlog_cap``, each node's
    per-commodity backlog. Entries with non-positive weight are left at zero;
    they can never raise the objective. Search is depth-first with a
    capacity-times-best-weight bound, so the optimum is exact on the grid.
    """
    topo = state.topology
    backlog = state.queues + arrivals
    commodities = {int(k) for k in np.nonzero(backlog.sum(axis=0) > 0)[0]}
    if topo.node_count > 4 or topo.channel_count > 4 or (params.backlog_cap and len(commodities) > 3):
        raise InstanceTooLarge("exact MaxWeight is limited to 4 nodes, 4 channels, 3 commodities")

    def units(x: float) -> int:
        u = x / grid
        r = round(u)
        if abs(u - r) > 1e-9 * max(1.0, abs(u)):
            raise ValueError(f"grid {grid} does not divide {x}")
        return int(r)

    src, dst = topo.link_endpoints()
    w = link_weights(state, params.beta)
    live = _active_links(state, active)
    cap_units = [units(c) if live[idx] else 0 for idx, c in enumerate(state.capacities)]
    n = topo.node_count
    back_units = {(i, k): units(backlog[i, k]) for i in range(n) for k in range(n)} if params.backlog_cap else None

    variables = [
        (idx, k, float(w[idx, k]))
        for idx in range(topo.link_count)
        for k in range(n)
        if cap_units[idx] > 0 and w[idx, k] > 0
    ]
    variables.sort(key=lambda v: (-v[2], v[0], v[1]))

    link_cap = list(cap_units)
    best_value = [0.0]
    best_assign: list[list[int]] = [[0] * len(variables)]
    assign = [0] * len(variables)

    def bound(pos: int) -> float:
        # variables are sorted by weight, so the first remaining one per link is its best
        seen: set[int] = set()
        total = 0.0
        for idx, _, weight in variables[pos:]:
            if idx not in seen:
                seen.add(idx)
                total += link_cap[idx] * weight
        return total * grid

    def dfs(pos: int, value: float) -> None:
        if value > best_value[0] + 1e-12:
            best_value[0] = value
            best_assign[0] = list(assign)
        if pos == len(variables) or value + bound(pos) <= best_value[0] + 1e-12:
            return
        idx, k, weight = variables[pos]
        i = int(src[idx])
        top = link_cap[idx]
        if back_units is not None:
            top = min(top, back_units[(i, k)])
        for amount in range(top, -1, -1):
            assign[pos] = amount
            link_cap[idx] -= amount
            if back_units is not None:
                back_units[(i, k)] -= amount
            dfs(pos + 1, value + amount * grid * weight)
            link_cap[idx] += amount
            if back_units is not None:
                back_units[(i, k)] += amount
        assign[pos] = 0

    dfs(0, 0.0)
    decision = RoutingDecision(slot=state.slot)
    for (idx, k, _), amount in zip(variables, best_assign[0]):
        if amount:
            decision.add(int(src[idx]), int(dst[idx]), k, amount * grid)
    return decision
