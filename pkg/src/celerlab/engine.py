"""Time-slotted simulation loop, per-slot metrics and run verdicts."""

from __future__ import annotations

import csv
import io
import time
from collections import deque
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from celerlab import baseline, dbr
from celerlab.netmodel import (
    InfeasibleDecision,
    NetworkState,
    RoutingDecision,
    Topology,
    apply_decision,
    build_state,
    check_decision_feasible,
    fmt_real,
)
from celerlab.oracle import OracleRouter, check_supportable, rates_from_flows
from celerlab.traffic import (
    MAX_POISSON_RATE,
    DeterministicSource,
    FailureSchedule,
    FlowSpec,
    Payment,
    TrafficSource,
    active_nodes,
)

ROUTERS = ("dbr", "shortest_path", "landmark", "oracle")
STABILITY_EPS = 0.01  # queue slope as a fraction of the mean token arrival rate
BALANCE_EPS = 0.05  # tokens per slot
MIN_VERDICT_SLOTS = 200
AUDIT_TOL = 1e-9

CSV_FIELDS = (
    "slot",
    "tokens_delivered",
    "payments_completed",
    "utilization",
    "total_queue",
    "max_queue_ratio",
    "max_imbalance_ratio",
    "lyapunov",
    "messages",
    "active_payments",
)


class ConfigError(ValueError):
    pass


class AuditError(RuntimeError):
    pass


@dataclass
class SimConfig:
    topology: Topology
    flows: list[FlowSpec]
    router: str = "dbr"
    beta: float = 1.0
    backlog_cap: bool = True
    landmarks: int = 3
    slots: int = 1000
    seed: int = 0
    arrivals: str = "poisson"  # or "deterministic": rate is tokens per slot, one payment per flow
    mean_size: float = 3.0
    failures: FailureSchedule | None = None
    max_retries: int = 100
    initial_split: dict | None = None

    def validate(self) -> None:
        if self.router not in ROUTERS:
            raise ConfigError(f"unknown router {self.router!r}; choose from {', '.join(ROUTERS)}")
        if self.slots < 1:
            raise ConfigError("slots must be >= 1")
        if not self.beta > 0:
            raise ConfigError("beta must be > 0")
        if self.arrivals not in ("poisson", "deterministic"):
            raise ConfigError(f"unknown arrival model {self.arrivals!r}")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.arrivals == "poisson" and not self.mean_size > 1:
            raise ConfigError("mean_size must exceed 1 for geometric payment sizes")
        n = self.topology.node_count
        for f in self.flows:
            if not (0 <= f.source < n and 0 <= f.destination < n):
                raise ConfigError(f"flow {f.source}->{f.destination} references a missing node")
            if self.arrivals == "poisson" and f.rate > MAX_POISSON_RATE:
                raise ConfigError(f"flow {f.source}->{f.destination} rate {f.rate} exceeds {MAX_POISSON_RATE} payments per slot")

    def token_rates(self) -> np.ndarray:
        size = 1.0 if self.arrivals == "deterministic" else self.mean_size
        return rates_from_flows(self.flows, self.topology.node_count, size)


@dataclass
class SlotMetrics:
    slot: int
    tokens_delivered: float
    payments_completed: int
    utilization: float
    total_queue: float
    max_queue_ratio: float
    max_imbalance_ratio: float
    lyapunov: float
    messages: int
    active_payments: int
    tokens_injected: float = 0.0
    tokens_minted: float = 0.0

    def csv_row(self) -> list[str]:
        return [
            str(self.slot),
            fmt_real(self.tokens_delivered),
            str(self.payments_completed),
            fmt_real(self.utilization),
            fmt_real(self.total_queue),
            fmt_real(self.max_queue_ratio),
            fmt_real(self.max_imbalance_ratio),
            fmt_real(self.lyapunov),
            str(self.messages),
            str(self.active_payments),
        ]


@dataclass
class Verdict:
    ok: bool
    slope: float
    threshold: float


@dataclass
class RunSummary:
    router: str
    slots: int
    avg_payments_per_slot: float
    avg_tokens_per_slot: float
    avg_utilization: float
    stable: bool | None
    queue_slope: float | None
    balanced: bool | None
    imbalance_slope: float | None
    failed_payments: int
    tokens_minted: float
    final_max_imbalance_ratio: float
    wall_seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    metrics: list[SlotMetrics]
    summary: RunSummary
    final_state: NetworkState
    decisions: list[RoutingDecision] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Metric helpers
# ---------------------------------------------------------------------------

def channel_utilization(decision: RoutingDecision, topology: Topology) -> float:
    total_deposit = float(topology.deposits().sum())
    if total_deposit == 0:
        return 0.0
    return decision.total() / total_deposit


def lyapunov(state: NetworkState, beta: float) -> float:
    """Squared queues plus ``beta / 2`` times squared imbalances over ordered pairs.

    Each directed link is one ordered pair, so every channel contributes twice.
    """
    if not beta > 0:
        raise ValueError("beta must be > 0")
    return float(np.square(state.queues).sum() + 0.5 * beta * np.square(state.imbalances).sum())


class FifoCompletion:
    """Credits delivered tokens to outstanding payments per destination, oldest first.

    Tokens delivered while nothing is outstanding for that destination are
    dropped from attribution (``unattributed``).
    """

    def __init__(self) -> None:
        self.pending: dict[int, deque[list]] = {}
        self.unattributed = 0.0
        self.outstanding = 0

    def add(self, payment: Payment) -> None:
        self.pending.setdefault(payment.destination, deque()).append([payment.id, float(payment.size)])
        self.outstanding += 1

    def deliver(self, destination: int, tokens: float) -> int:
        q = self.pending.get(destination)
        done = 0
        while tokens > 0 and q:
            head = q[0]
            take = min(head[1], tokens)
            head[1] -= take
            tokens -= take
            if head[1] <= AUDIT_TOL * max(1.0, take):
                q.popleft()
                done += 1
        self.unattributed += max(tokens, 0.0)
        self.outstanding -= done
        return done


def payments_completed(delivered: float, outstanding_sizes: Sequence[float]) -> tuple[int, float]:
    """Completions from ``delivered`` tokens against payments in arrival order.

    Returns ``(completed, credit carried to the next outstanding payment)``.
    """
    done = 0
    for size in outstanding_sizes:
        if delivered >= size:
            delivered -= size
            done += 1
        else:
            return done, delivered
    return done, 0.0


def _slope(y: np.ndarray) -> float:
    x = np.arange(len(y), dtype=float)
    if len(y) < 2:
        return 0.0
    return float(np.polyfit(x, y, 1)[0])


def stability_verdict(series: Sequence[SlotMetrics], eps: float = STABILITY_EPS) -> Verdict:
    """Least-squares slope of total queue over the second half versus ``eps`` times the mean arrival rate."""
    if len(series) < MIN_VERDICT_SLOTS:
        raise ValueError(f"need at least {MIN_VERDICT_SLOTS} slots for a verdict, got {len(series)}")
    half = series[len(series) // 2 :]
    slope = _slope(np.array([m.total_queue for m in half]))
    rate = float(np.mean([m.tokens_injected for m in series]))
    threshold = eps * rate
    return Verdict(slope <= threshold + 1e-9, slope, threshold)


def balance_verdict(series: Sequence[SlotMetrics], eps: float = BALANCE_EPS) -> Verdict:
    """Least-squares slope of ``max |imbalance|`` over the second half versus ``eps`` tokens per slot."""
    if len(series) < MIN_VERDICT_SLOTS:
        raise ValueError(f"need at least {MIN_VERDICT_SLOTS} slots for a verdict, got {len(series)}")
    half = series[len(series) // 2 :]
    worst = np.array([m.max_imbalance_ratio * (m.slot + 1) for m in half])
    slope = _slope(worst)
    return Verdict(slope <= eps + 1e-9, slope, eps)


def write_metrics_csv(series: Sequence[SlotMetrics]) -> str:
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for m in series:
        writer.writerow(m.csv_row())
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Routers behind one interface
# ---------------------------------------------------------------------------

class _PathRouterState:
    """Source-side pending payments for the path routers.

    Every pending payment is retried each slot, so a payment that arrived in
    slot ``a`` has failed ``t - a + 1`` attempts after slot ``t``. Payments that
    share (source, destination, size) share one route per slot.
    """

    def __init__(self, kind: str, landmarks: int, max_retries: int):
        self.landmark_cfg = baseline.LandmarkConfig(landmarks) if kind == "landmark" else None
        self.landmark_nodes: list[int] | None = None
        self.max_retries = max_retries
        self.pending: dict[int, Payment] = {}
        self.groups: dict[tuple[int, int, int], dict[int, Payment]] = {}

    def _route(self, rep: Payment, state: NetworkState, active, cache) -> baseline.PathRoute | None:
        if self.landmark_cfg is not None:
            if self.landmark_nodes is None:
                self.landmark_nodes = self.landmark_cfg.landmarks(state.topology)
            return baseline.route_via_landmarks(rep, state, self.landmark_nodes, active, cache)
        return baseline.route_shortest_path(rep, state, active, cache)

    def _remove(self, p: Payment) -> None:
        del self.pending[p.id]
        key = (p.source, p.destination, p.size)
        group = self.groups[key]
        del group[p.id]
        if not group:
            del self.groups[key]

    def decide(self, state: NetworkState, new: list[Payment], active: frozenset[int]):
        for p in new:
            self.pending[p.id] = p
            self.groups.setdefault((p.source, p.destination, p.size), {})[p.id] = p
        cache = baseline.PathCache(state, active)
        candidates: list[tuple[int, tuple[int, ...]]] = []
        for group in self.groups.values():
            rep = next(iter(group.values()))
            route = self._route(rep, state, active, cache)
            if route is not None:
                candidates.extend((pid, route.nodes) for pid in group)
        candidates.sort()

        remaining = state.capacities.copy()
        index = state.topology.link_index
        decision = RoutingDecision(slot=state.slot)
        done: list[Payment] = []
        hops = 0
        for pid, nodes in candidates:
            p = self.pending[pid]
            links = [index[u, v] for u, v in zip(nodes, nodes[1:])]
            hops += len(links)
            if all(remaining[h] >= p.size for h in links):
                for (u, v), h in zip(zip(nodes, nodes[1:]), links):
                    remaining[h] -= p.size
                    decision.add(u, v, nodes[-1], float(p.size))
                done.append(p)
        for p in done:
            self._remove(p)

        failed: list[Payment] = []
        cutoff = state.slot + 1 - self.max_retries  # arrival slots below this have exhausted retries
        while self.pending:
            p = next(iter(self.pending.values()))
            if p.arrival_slot >= cutoff:
                break
            failed.append(p)
            self._remove(p)
        return decision, done, failed, hops


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------

def run(config: SimConfig, keep_decisions: bool = False) -> RunResult:
    config.validate()
    started = time.perf_counter()
    topo = config.topology
    n = topo.node_count
    state = build_state(topo, config.initial_split)
    if config.arrivals == "deterministic":
        source = DeterministicSource(config.flows, n)
    else:
        source = TrafficSource(config.flows, n, config.seed, config.mean_size)
    params = dbr.DbrParams(config.beta, config.backlog_cap)
    path_router = None
    oracle = None
    if config.router in ("shortest_path", "landmark"):
        path_router = _PathRouterState(config.router, config.landmarks, config.max_retries)
    elif config.router == "oracle":
        rates = config.token_rates()
        result = check_supportable(topo, rates)
        if not result.supportable:
            raise ConfigError("oracle router needs supportable rates; flows are outside the throughput region")
        oracle = OracleRouter(result.witness, topo, rates)
        state = oracle.prepare(state)

    fifo = FifoCompletion()
    enforce_backlog = config.backlog_cap or path_router is not None
    injected = delivered_total = minted_total = failed_tokens = 0.0
    failed_count = 0
    metrics: list[SlotMetrics] = []
    decisions: list[RoutingDecision] = []
    all_nodes = range(n)

    for t in range(config.slots):
        payments, arrivals = source.draw(t)
        active = active_nodes(config.failures, t, all_nodes)
        failed: list[Payment] = []
        if path_router is not None:
            decision, done, failed, messages = path_router.decide(state, payments, active)
        elif oracle is not None:
            decision = oracle.decide(state, arrivals, config.backlog_cap, active)
            messages = 0
        else:
            decision = dbr.decide_slot(state, arrivals, params, active)
            messages = dbr.message_count(state, active)

        violation = check_decision_feasible(state, decision, arrivals, enforce_backlog)
        if violation is not None:
            raise InfeasibleDecision(violation)

        state, delivered, minted = apply_decision(state, arrivals, decision)
        if failed:
            q = state.queues.copy()
            for p in failed:
                q[p.source, p.destination] -= p.size
                failed_tokens += p.size
            failed_count += len(failed)
            state = state.replace(queues=np.maximum(q, 0.0))

        if path_router is not None:
            completed = len(done)
            outstanding = len(path_router.pending)
        else:
            for p in payments:
                fifo.add(p)
            completed = sum(fifo.deliver(int(k), float(delivered[k])) for k in np.nonzero(delivered)[0])
            outstanding = fifo.outstanding

        slot_in = float(arrivals.sum())
        injected += slot_in
        delivered_total += float(delivered.sum())
        minted_total += minted
        queued = float(state.queues.sum())
        gap = injected + minted_total - delivered_total - queued - failed_tokens
        if abs(gap) > AUDIT_TOL * max(1.0, injected + minted_total):
            raise AuditError(f"token conservation audit failed at slot {t}: gap {gap!r}")

        elapsed = t + 1
        metrics.append(
            SlotMetrics(
                slot=t,
                tokens_delivered=float(delivered.sum()),
                payments_completed=completed,
                utilization=channel_utilization(decision, topo),
                total_queue=queued,
                max_queue_ratio=float(state.queues.max(initial=0.0)) / elapsed,
                max_imbalance_ratio=float(np.abs(state.imbalances).max(initial=0.0)) / elapsed,
                lyapunov=lyapunov(state, config.beta),
                messages=int(messages),
                active_payments=outstanding,
                tokens_injected=slot_in,
                tokens_minted=minted,
            )
        )
        if keep_decisions:
            decisions.append(decision)

    summary = summarize(config, metrics, failed_count, minted_total, time.perf_counter() - started)
    return RunResult(metrics, summary, state, decisions)


def summarize(config: SimConfig, metrics: list[SlotMetrics], failed: int, minted: float, wall: float) -> RunSummary:
    window = metrics[len(metrics) // 2 :] or metrics
    stable = balanced = None
    q_slope = i_slope = None
    if len(metrics) >= MIN_VERDICT_SLOTS:
        sv = stability_verdict(metrics)
        bv = balance_verdict(metrics)
        stable, q_slope, balanced, i_slope = sv.ok, sv.slope, bv.ok, bv.slope
    return RunSummary(
        router=config.router,
        slots=len(metrics),
        avg_payments_per_slot=float(np.mean([m.payments_completed for m in window])),
        avg_tokens_per_slot=float(np.mean([m.tokens_delivered for m in window])),
        avg_utilization=float(np.mean([m.utilization for m in window])),
        stable=stable,
        queue_slope=q_slope,
        balanced=balanced,
        imbalance_slope=i_slope,
        failed_payments=failed,
        tokens_minted=minted,
        final_max_imbalance_ratio=metrics[-1].max_imbalance_ratio,
        wall_seconds=wall,
    )
