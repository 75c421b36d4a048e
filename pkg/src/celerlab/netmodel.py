"""State-channel network graph and per-slot mutable state.

Directed links are indexed from the channel list: channel ``e`` between
``a`` and ``b`` owns link ``2e`` (a -> b) and link ``2e + 1`` (b -> a).
Queues are an ``(n, n)`` array indexed ``[node, destination]``.
"""

from __future__ import annotations

import dataclasses
import json
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from celerlab.prng import SplitMix64

REL_TOL = 1e-9


class TopologyError(ValueError):
    pass


class InfeasibleDecision(RuntimeError):
    """Raised when a router emits a decision that violates a slot constraint."""

    def __init__(self, violation: "Violation"):
        super().__init__(str(violation))
        self.violation = violation


@dataclass(frozen=True)
class Topology:
    node_count: int
    channels: tuple[tuple[int, int, float], ...]
    adjacency: tuple[frozenset[int], ...] = field(init=False, repr=False, compare=False)
    neighbors: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)
    link_index: dict[tuple[int, int], int] = field(init=False, repr=False, compare=False)
    _endpoints: tuple[np.ndarray, np.ndarray] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        n = self.node_count
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise TopologyError(f"node_count must be a positive integer, got {n!r}")
        channels = tuple((int(a), int(b), float(dep)) for a, b, dep in self.channels)
        object.__setattr__(self, "channels", channels)
        seen: set[frozenset[int]] = set()
        nbrs: list[set[int]] = [set() for _ in range(n)]
        links: dict[tuple[int, int], int] = {}
        for e, (a, b, dep) in enumerate(channels):
            if not (0 <= a < n and 0 <= b < n):
                raise TopologyError(f"channel {e} endpoint out of range: ({a}, {b})")
            if a == b:
                raise TopologyError(f"channel {e} is a self-channel on node {a}")
            pair = frozenset((a, b))
            if pair in seen:
                raise TopologyError(f"duplicate channel between {a} and {b}")
            seen.add(pair)
            if not np.isfinite(dep) or dep <= 0:
                raise TopologyError(f"channel {e} deposit must be > 0, got {dep}")
            nbrs[a].add(b)
            nbrs[b].add(a)
            links[(a, b)] = 2 * e
            links[(b, a)] = 2 * e + 1
        object.__setattr__(self, "adjacency", tuple(frozenset(s) for s in nbrs))
        object.__setattr__(self, "neighbors", tuple(tuple(sorted(s)) for s in nbrs))
        object.__setattr__(self, "link_index", links)
        src = np.array([a if side == 0 else b for a, b, _ in channels for side in (0, 1)], dtype=np.int64)
        dst = np.array([b if side == 0 else a for a, b, _ in channels for side in (0, 1)], dtype=np.int64)
        src.flags.writeable = False
        dst.flags.writeable = False
        object.__setattr__(self, "_endpoints", (src, dst))

    @property
    def channel_count(self) -> int:
        return len(self.channels)

    @property
    def link_count(self) -> int:
        return 2 * len(self.channels)

    def link_endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        """Read-only arrays ``(src, dst)`` of length ``link_count`` in link-index order."""
        return self._endpoints

    def deposits(self) -> np.ndarray:
        return np.array([dep for _, _, dep in self.channels], dtype=float)

    def link_deposits(self) -> np.ndarray:
        return np.repeat(self.deposits(), 2)

    def degree(self, node: int) -> int:
        return len(self.adjacency[node])

    def to_json(self) -> str:
        return dump_topology(self)


@dataclass(frozen=True)
class NetworkState:
    topology: Topology
    capacities: np.ndarray  # per directed link
    queues: np.ndarray  # [node, destination]
    imbalances: np.ndarray  # per directed link
    slot: int = 0

    def capacity(self, i: int, j: int) -> float:
        return float(self.capacities[self.topology.link_index[(i, j)]])

    def imbalance(self, i: int, j: int) -> float:
        return float(self.imbalances[self.topology.link_index[(i, j)]])

    def replace(self, **changes) -> "NetworkState":
        return dataclasses.replace(self, **changes)


# (link i -> j, commodity k) -> tokens
DecisionEntries = dict[tuple[int, int, int], float]


@dataclass
class RoutingDecision:
    entries: DecisionEntries = field(default_factory=dict)
    slot: int = 0

    def add(self, i: int, j: int, k: int, amount: float) -> None:
        if amount <= 0:
            return
        key = (i, j, k)
        self.entries[key] = self.entries.get(key, 0.0) + amount

    def link_totals(self, topology: Topology) -> np.ndarray:
        totals = np.zeros(topology.link_count)
        for (i, j, _), amt in self.entries.items():
            totals[topology.link_index[(i, j)]] += amt
        return totals

    def total(self) -> float:
        return float(sum(self.entries.values()))

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class Violation:
    kind: str  # "negative" | "self_commodity" | "unknown_link" | "capacity" | "backlog"
    link: tuple[int, int] | None
    commodity: int | None
    amount: float
    limit: float

    def __str__(self) -> str:
        where = f"link {self.link[0]}->{self.link[1]}" if self.link else "decision"
        com = f" commodity {self.commodity}" if self.commodity is not None else ""
        return f"{self.kind} violation on {where}{com}: {self.amount!r} > {self.limit!r}"


def empty_arrivals(n: int) -> np.ndarray:
    return np.zeros((n, n))


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

SplitPolicy = Callable[[int, int, float], float]


def even_split(a: int, b: int, deposit: float) -> float:
    return deposit / 2.0


def build_state(topology: Topology, initial_split: SplitPolicy | Mapping | None = None) -> NetworkState:
    """Fresh slot-0 state.

    ``initial_split`` gives ``c_ab`` for each channel ``(a, b, B)``, either as a
    callable ``(a, b, B) -> c_ab`` or a mapping keyed by ``(a, b)``; the reverse
    direction receives ``B - c_ab``. Default is an even split.
    """
    if initial_split is None:
        initial_split = even_split
    caps = np.zeros(topology.link_count)
    for e, (a, b, dep) in enumerate(topology.channels):
        if callable(initial_split):
            c_ab = float(initial_split(a, b, dep))
            c_ba = dep - c_ab
        else:
            if (a, b) in initial_split:
                c_ab = float(initial_split[(a, b)])
                c_ba = float(initial_split.get((b, a), dep - c_ab))
            elif (b, a) in initial_split:
                c_ba = float(initial_split[(b, a)])
                c_ab = dep - c_ba
            else:
                c_ab = c_ba = dep / 2.0
        if c_ab < 0 or c_ba < 0:
            raise TopologyError(f"negative initial capacity on channel {a}<->{b}")
        if abs(c_ab + c_ba - dep) > REL_TOL * dep:
            raise TopologyError(f"split on channel {a}<->{b} does not sum to deposit {dep}")
        caps[2 * e], caps[2 * e + 1] = c_ab, c_ba
    n = topology.node_count
    return NetworkState(
        topology=topology,
        capacities=caps,
        queues=np.zeros((n, n)),
        imbalances=np.zeros(topology.link_count),
        slot=0,
    )


# ---------------------------------------------------------------------------
# Feasibility
# ---------------------------------------------------------------------------

def _tol(x: float) -> float:
    return REL_TOL * max(1.0, abs(x))


def check_decision_feasible(
    state: NetworkState,
    decision: RoutingDecision,
    arrivals: np.ndarray | None = None,
    enforce_backlog: bool = True,
) -> Violation | None:
    """First violated constraint, or ``None`` when the decision is feasible.

    Capacity: per direction, ``sum_k mu_ij^k <= c_ij``.
    Backlog: per node and commodity, total outflow may not exceed start-of-slot
    backlog plus this slot's arrivals plus same-slot inflow (inflow only matters
    for path routers that relay a payment across several hops in one slot).
    """
    topo = state.topology
    n = topo.node_count
    totals = np.zeros(topo.link_count)
    out = np.zeros((n, n))
    inflow = np.zeros((n, n))
    for (i, j, k), amt in sorted(decision.entries.items()):
        if amt < 0 or not np.isfinite(amt):
            return Violation("negative", (i, j), k, amt, 0.0)
        if i == k:
            return Violation("self_commodity", (i, j), k, amt, 0.0)
        idx = topo.link_index.get((i, j))
        if idx is None:
            return Violation("unknown_link", (i, j), k, amt, 0.0)
        totals[idx] += amt
        out[i, k] += amt
        inflow[j, k] += amt
    src, dst = topo.link_endpoints()
    caps = state.capacities
    over = np.nonzero(totals > caps + REL_TOL * np.maximum(1.0, np.abs(caps)))[0]
    if len(over):
        idx = over[0]
        return Violation("capacity", (int(src[idx]), int(dst[idx])), None, float(totals[idx]), float(caps[idx]))
    if enforce_backlog:
        avail = state.queues + (arrivals if arrivals is not None else 0.0) + inflow
        for i, k in zip(*np.nonzero(out > 0)):
            limit = avail[i, k]
            if out[i, k] > limit + _tol(limit):
                return Violation("backlog", None, int(k), float(out[i, k]), float(limit))
    return None


# ---------------------------------------------------------------------------
# Transitions
# ---------------------------------------------------------------------------

def _flow_arrays(state: NetworkState, decision: RoutingDecision) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = state.topology.node_count
    out = np.zeros((n, n))
    inflow = np.zeros((n, n))
    for (i, j, k), amt in decision.entries.items():
        out[i, k] += amt
        inflow[j, k] += amt
    return out, inflow, decision.link_totals(state.topology)


def update_debt_queues(
    state: NetworkState, arrivals: np.ndarray, decision: RoutingDecision
) -> tuple[NetworkState, np.ndarray, float]:
    """Apply the debt-queue recurrence with the ``[x]^+`` clamp.

    Returns ``(new_state, delivered, minted)``: ``delivered[k]`` counts tokens of
    commodity ``k`` that reached node ``k`` this slot, ``minted`` the tokens the
    clamp created because a node sent more than it owed.
    """
    out, inflow, _ = _flow_arrays(state, decision)
    raw = state.queues + arrivals + inflow - out
    n = state.topology.node_count
    diag = np.arange(n)
    delivered = inflow[diag, diag].copy()
    raw[diag, diag] = 0.0
    # float dust from relaying exactly the whole backlog is not minting
    avail = state.queues + arrivals + inflow
    raw[(raw < 0) & (raw >= -REL_TOL * np.maximum(1.0, avail))] = 0.0
    minted = float(-raw[raw < 0].sum())
    queues = np.maximum(raw, 0.0)
    return state.replace(queues=queues), delivered, minted


def update_imbalances(state: NetworkState, decision: RoutingDecision) -> NetworkState:
    totals = decision.link_totals(state.topology)
    received = totals.reshape(-1, 2)[:, ::-1].reshape(-1)
    return state.replace(imbalances=state.imbalances + received - totals)


def update_capacities(state: NetworkState, decision: RoutingDecision) -> NetworkState:
    totals = decision.link_totals(state.topology).reshape(-1, 2)
    caps = state.capacities.reshape(-1, 2)
    deposits = state.topology.deposits()
    forward = caps[:, 0] - totals[:, 0] + totals[:, 1]
    forward = np.clip(forward, 0.0, deposits)
    new = np.column_stack([forward, deposits - forward]).reshape(-1)
    return state.replace(capacities=new)


def apply_decision(
    state: NetworkState, arrivals: np.ndarray, decision: RoutingDecision
) -> tuple[NetworkState, np.ndarray, float]:
    """Queues, imbalances and capacities for one slot; advances ``slot``."""
    nxt, delivered, minted = update_debt_queues(state, arrivals, decision)
    nxt = update_imbalances(nxt, decision)
    nxt = update_capacities(nxt, decision)
    return nxt.replace(slot=state.slot + 1), delivered, minted


# ---------------------------------------------------------------------------
# Random topologies
# ---------------------------------------------------------------------------

def generate_random_topology(seed: int, n: int, m: int, deposit_range: tuple[float, float]) -> Topology:
    """Connected random graph: a random recursive spanning tree plus extra edges.

    Every draw comes from one SplitMix64 stream seeded with ``seed``.
    """
    if n < 1 or m < n - 1 or m > n * (n - 1) // 2:
        raise TopologyError(f"cannot build a connected graph with n={n}, m={m}")
    lo, hi = float(deposit_range[0]), float(deposit_range[1])
    if lo <= 0 or hi < lo:
        raise TopologyError(f"bad deposit range [{lo}, {hi}]")
    rng = SplitMix64(seed)
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.randbelow(i + 1)
        order[i], order[j] = order[j], order[i]
    pairs: list[tuple[int, int]] = []
    present: set[tuple[int, int]] = set()
    for pos in range(1, n):
        parent = order[rng.randbelow(pos)]
        child = order[pos]
        edge = (min(parent, child), max(parent, child))
        pairs.append(edge)
        present.add(edge)
    while len(pairs) < m:
        a = rng.randbelow(n)
        b = rng.randbelow(n)
        if a == b:
            continue
        edge = (min(a, b), max(a, b))
        if edge in present:
            continue
        pairs.append(edge)
        present.add(edge)
    channels = tuple((a, b, lo + (hi - lo) * rng.uniform()) for a, b in pairs)
    return Topology(n, channels)


# ---------------------------------------------------------------------------
# Topology files
# ---------------------------------------------------------------------------

def fmt_real(x: float) -> str:
    """17 significant digits, '.' separator; integral values print without exponent."""
    x = float(x)
    if x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return format(x, ".17g")


def dump_topology(topology: Topology) -> str:
    rows = ",\n".join(
        f'    {{"a": {a}, "b": {b}, "deposit": {fmt_real(dep)}}}' for a, b, dep in topology.channels
    )
    return f'{{\n  "nodes": {topology.node_count},\n  "channels": [\n{rows}\n  ]\n}}\n'


def parse_topology(doc: Mapping) -> Topology:
    if not isinstance(doc, Mapping) or set(doc) != {"nodes", "channels"}:
        raise TopologyError('topology must be an object with exactly "nodes" and "channels"')
    channels = []
    for idx, ch in enumerate(doc["channels"]):
        if not isinstance(ch, Mapping) or set(ch) != {"a", "b", "deposit"}:
            raise TopologyError(f'channel {idx} must have exactly "a", "b", "deposit"')
        channels.append((int(ch["a"]), int(ch["b"]), float(ch["deposit"])))
    return Topology(int(doc["nodes"]), tuple(channels))


def load_topology(path: str | Path) -> Topology:
    with open(path, encoding="utf-8") as fh:
        return parse_topology(json.load(fh))


def save_topology(topology: Topology, path: str | Path) -> None:
    Path(path).write_text(dump_topology(topology), encoding="utf-8", newline="\n")


def triangle(deposit: float = 200.0) -> Topology:
    """Three nodes A=0, B=1, C=2, fully connected."""
    return Topology(3, ((0, 1, deposit), (1, 2, deposit), (2, 0, deposit)))


