"""Seeded payment arrivals and node-failure schedules.

Every variate costs exactly one uniform draw: Poisson counts by CDF
inversion, geometric sizes by inverting the closed-form CDF.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from celerlab.prng import SplitMix64

MAX_POISSON_RATE = 30.0
DEFAULT_MEAN_SIZE = 3.0


class TrafficError(ValueError):
    pass


@dataclass(frozen=True)
class FlowSpec:
    source: int
    destination: int
    rate: float  # expected payments per slot

    def __post_init__(self) -> None:
        if self.source == self.destination:
            raise TrafficError(f"flow source equals destination ({self.source})")
        if not math.isfinite(self.rate) or self.rate < 0:
            raise TrafficError(f"flow rate must be finite and >= 0, got {self.rate}")


@dataclass(frozen=True)
class Payment:
    id: int
    source: int
    destination: int
    size: int
    arrival_slot: int


def sample_poisson(lam: float, rng: SplitMix64) -> int:
    if not 0.0 <= lam <= MAX_POISSON_RATE:
        raise TrafficError(f"Poisson rate must lie in [0, {MAX_POISSON_RATE}], got {lam}")
    u = rng.uniform()
    if lam == 0.0:
        return 0
    k = 0
    p = math.exp(-lam)
    cdf = p
    while u >= cdf:
        k += 1
        p *= lam / k
        if p == 0.0:
            break
        cdf += p
    return k


def sample_payment_size(rng: SplitMix64, mean: float = DEFAULT_MEAN_SIZE) -> int:
    """Geometric on {1, 2, ...} with success probability ``1 / mean``."""
    if not mean > 1.0:
        raise TrafficError(f"mean payment size must exceed 1, got {mean}")
    u = rng.uniform()
    return 1 + int(math.floor(math.log1p(-u) / math.log1p(-1.0 / mean)))


def sample_arrivals(
    flows: Sequence[FlowSpec],
    slot: int,
    rng: SplitMix64,
    node_count: int,
    first_id: int = 0,
    mean_size: float = DEFAULT_MEAN_SIZE,
) -> tuple[list[Payment], np.ndarray]:
    """Payments generated in ``slot`` and the ``[source, destination]`` token ledger.

    Flows are visited in list order; each draws a Poisson count, then that many
    sizes. Ids continue from ``first_id``.
    """
    ledger = np.zeros((node_count, node_count))
    payments: list[Payment] = []
    next_id = first_id
    for flow in flows:
        for _ in range(sample_poisson(flow.rate, rng)):
            size = sample_payment_size(rng, mean_size)
            payments.append(Payment(next_id, flow.source, flow.destination, size, slot))
            ledger[flow.source, flow.destination] += size
            next_id += 1
    return payments, ledger


class TrafficSource:
    """Threads the PRNG and the global payment-id counter through a run."""

    def __init__(self, flows: Sequence[FlowSpec], node_count: int, seed: int, mean_size: float = DEFAULT_MEAN_SIZE):
        for f in flows:
            if not (0 <= f.source < node_count and 0 <= f.destination < node_count):
                raise TrafficError(f"flow {f} references a node outside 0..{node_count - 1}")
        self.flows = list(flows)
        self.node_count = node_count
        self.rng = SplitMix64(seed)
        self.mean_size = mean_size
        self.next_id = 0

    def draw(self, slot: int) -> tuple[list[Payment], np.ndarray]:
        payments, ledger = sample_arrivals(
            self.flows, slot, self.rng, self.node_count, self.next_id, self.mean_size
        )
        self.next_id += len(payments)
        return payments, ledger


class DeterministicSource:
    """Fixed token amounts every slot, one payment per flow (rate = tokens per slot)."""

    def __init__(self, flows: Sequence[FlowSpec], node_count: int):
        self.flows = list(flows)
        self.node_count = node_count
        self.next_id = 0

    def draw(self, slot: int) -> tuple[list[Payment], np.ndarray]:
        ledger = np.zeros((self.node_count, self.node_count))
        payments = []
        for f in self.flows:
            size = int(round(f.rate))
            if size <= 0:
                continue
            payments.append(Payment(self.next_id, f.source, f.destination, size, slot))
            ledger[f.source, f.destination] += size
            self.next_id += 1
        return payments, ledger


def generate_random_flows(seed: int, node_count: int, count: int, rate: float) -> list[FlowSpec]:
    """``count`` distinct random (source, destination) pairs, all at ``rate``."""
    if count > node_count * (node_count - 1):
        raise TrafficError("more flows requested than ordered node pairs")
    rng = SplitMix64(seed)
    seen: set[tuple[int, int]] = set()
    flows = []
    while len(flows) < count:
        s = rng.randbelow(node_count)
        d = rng.randbelow(node_count)
        if s == d or (s, d) in seen:
            continue
        seen.add((s, d))
        flows.append(FlowSpec(s, d, rate))
    return flows


# ---------------------------------------------------------------------------
# Failures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FailureEvent:
    slot: int
    node: int
    action: str  # "down" | "up"


class FailureSchedule:
    def __init__(self, events: Iterable[FailureEvent] = ()):
        self.events = sorted(events, key=lambda ev: ev.slot)
        down: set[int] = set()
        for ev in self.events:
            if ev.action == "down":
                if ev.node in down:
                    raise TrafficError(f"node {ev.node} downed twice without an up (slot {ev.slot})")
                down.add(ev.node)
            elif ev.action == "up":
                down.discard(ev.node)
            else:
                raise TrafficError(f"unknown failure action {ev.action!r}")

    def __len__(self) -> int:
        return len(self.events)


def active_nodes(schedule: FailureSchedule | None, slot: int, all_nodes: Iterable[int]) -> frozenset[int]:
    """Nodes not down in ``slot``; events apply from the start of their slot."""
    nodes = set(all_nodes)
    if schedule is None:
        return frozenset(nodes)
    down: set[int] = set()
    for ev in schedule.events:
        if ev.slot > slot:
            break
        if ev.action == "down":
            down.add(ev.node)
        else:
            down.discard(ev.node)
    return frozenset(nodes - down)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def parse_flows(doc) -> list[FlowSpec]:
    if not isinstance(doc, list):
        raise TrafficError("flow file must hold a JSON array")
    flows = []
    for idx, item in enumerate(doc):
        if not isinstance(item, Mapping) or set(item) != {"source", "destination", "rate"}:
            raise TrafficError(f'flow {idx} must have exactly "source", "destination", "rate"')
        flows.append(FlowSpec(int(item["source"]), int(item["destination"]), float(item["rate"])))
    return flows


def parse_failures(doc) -> FailureSchedule:
    if not isinstance(doc, list):
        raise TrafficError("failure file must hold a JSON array")
    events = []
    for idx, item in enumerate(doc):
        if not isinstance(item, Mapping) or set(item) != {"slot", "node", "action"}:
            raise TrafficError(f'failure event {idx} must have exactly "slot", "node", "action"')
        events.append(FailureEvent(int(item["slot"]), int(item["node"]), str(item["action"])))
    return FailureSchedule(events)


def load_flows(path: str | Path) -> list[FlowSpec]:
    with open(path, encoding="utf-8") as fh:
        return parse_flows(json.load(fh))


def load_failures(path: str | Path) -> FailureSchedule:
    with open(path, encoding="utf-8") as fh:
        return parse_failures(json.load(fh))


def dump_flows(flows: Sequence[FlowSpec]) -> str:
    return json.dumps(
        [{"source": f.source, "destination": f.destination, "rate": f.rate} for f in flows], indent=2
    ) + "\n"
