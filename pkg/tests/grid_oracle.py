"""Brute-force supportability scan used to cross-check the LP.

Two facts keep the scan small and exact on the grid:

* Balance can always be restored by padding the lighter direction i->j with
  tokens destined to j itself, which loosens every constraint. So a rate matrix
  is supportable iff some flow keeps each direction's load within B/2.
* Any flow meeting the conservation rows contains a path decomposition that
  carries exactly the demanded rates, with no larger load anywhere.

The scan therefore enumerates, for every (source, destination) demand, how much
goes along each simple path, on a fixed step.
"""

from __future__ import annotations

import itertools

import numpy as np

from celerlab.netmodel import Topology


def simple_paths(topo: Topology, s: int, d: int) -> list[tuple[int, ...]]:
    out = []

    def walk(path):
        if path[-1] == d:
            out.append(tuple(path))
            return
        for v in topo.neighbors[path[-1]]:
            if v not in path:
                walk(path + [v])

    walk([s])
    return out


def _splits(total: float, parts: int, step: float) -> np.ndarray:
    """Every way to write ``total`` as ``parts`` non-negative multiples of ``step``."""
    units = round(total / step)
    rows = [c for c in itertools.product(range(units + 1), repeat=parts - 1) if sum(c) <= units]
    arr = np.array([list(c) + [units - sum(c)] for c in rows], dtype=float)
    return arr * step


def grid_supportable(topo: Topology, rates: np.ndarray, step: float = 0.25) -> bool:
    limit = np.repeat(topo.deposits() / 2.0, 2)
    loads = np.zeros((1, topo.link_count))
    for i, k in zip(*np.nonzero(rates > 0)):
        paths = simple_paths(topo, int(i), int(k))
        if not paths:
            return False
        incidence = np.zeros((len(paths), topo.link_count))
        for p, path in enumerate(paths):
            for u, v in zip(path, path[1:]):
                incidence[p, topo.link_index[(u, v)]] = 1.0
        options = _splits(float(rates[i, k]), len(paths), step) @ incidence
        loads = (loads[:, None, :] + options[None, :, :]).reshape(-1, topo.link_count)
        # prune partial assignments that already overflow, then dedupe
        loads = np.unique(loads[np.all(loads <= limit + 1e-9, axis=1)], axis=0)
        if len(loads) == 0:
            return False
    return True


def near_boundary(topo: Topology, rates: np.ndarray, step: float = 0.25) -> bool:
    """True when nudging every demand by one step in either direction flips the scan."""
    bump = np.where(rates > 0, step, 0.0)
    return grid_supportable(topo, np.maximum(rates - bump, 0.0), step) != grid_supportable(topo, rates + bump, step)


def random_instance(seed: int, step: float = 0.25) -> tuple[Topology, np.ndarray]:
    """Three nodes (path or triangle), integer deposits in 1..10, two destinations."""
    rng = np.random.default_rng(seed)
    pairs = [(0, 1), (1, 2), (0, 2)]
    if rng.uniform() < 0.3:
        pairs.pop(int(rng.integers(3)))
    topo = Topology(3, tuple((a, b, float(rng.integers(1, 11))) for a, b in pairs))
    dests = rng.choice(3, size=2, replace=False)
    rates = np.zeros((3, 3))
    for k in dests:
        for i in range(3):
            if i != k and rng.uniform() < 0.8:
                rates[i, k] = step * int(rng.integers(0, int(6 / step) + 1))
    return topo, rates
