"""Throughput-region membership and the fixed-flow oracle router.

A rate matrix ``rates[i, k]`` (tokens per slot from node ``i`` to destination
``k``) is supportable when some static flow ``f[link, k]`` satisfies

* flow conservation: ``rates[i, k] + inflow_i^k - outflow_i^k <= 0`` for ``i != k``
* channel balance: both directions of every channel carry the same total
* channel capacity: the two directions together stay within the deposit

The conservation rows are inequalities, so a node may emit more of a
commodity than it receives; those surplus tokens are what let one-way demand
be balanced. Flows of commodity ``k`` leaving node ``k`` are fixed at zero,
which does not shrink the region (the same surplus can always be carried as
commodity ``j`` on link ``i -> j``).
"""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from celerlab.netmodel import NetworkState, RoutingDecision, Topology

FEAS_TOL = 1e-6
MAX_NODES = 20


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class FlowViolation:
    kind: str  # "conservation" | "balance" | "capacity" | "negative"
    where: tuple[int, ...]
    slack: float

    def __str__(self) -> str:
        return f"{self.kind} at {self.where}: exceeds by {self.slack:.6g}"


@dataclass
class SupportabilityResult:
    supportable: bool
    witness: np.ndarray | None = None  # f[link, k]
    max_violation: float = 0.0
    violations: list[FlowViolation] = field(default_factory=list)


def _check_rates(topology: Topology, rates: np.ndarray) -> np.ndarray:
    rates = np.asarray(rates, dtype=float)
    n = topology.node_count
    if rates.shape != (n, n):
        raise OracleError(f"rate matrix must be {n}x{n}, got {rates.shape}")
    if not np.all(np.isfinite(rates)) or np.any(rates < 0):
        raise OracleError("rates must be finite and non-negative")
    if np.any(np.diag(rates) != 0):
        raise OracleError("rate matrix must have a zero diagonal")
    return rates


def verify_flow(
    flows: np.ndarray, rates: np.ndarray, topology: Topology, tol: float = FEAS_TOL
) -> list[FlowViolation]:
    """Every violated condition with its slack; an empty list means the flow is valid."""
    rates = _check_rates(topology, rates)
    n = topology.node_count
    f = np.asarray(flows, dtype=float)
    if f.shape != (topology.link_count, n):
        raise OracleError(f"flow array must be {topology.link_count}x{n}, got {f.shape}")
    out: list[FlowViolation] = []
    for idx, k in zip(*np.nonzero(f < -tol)):
        out.append(FlowViolation("negative", (int(idx), int(k)), float(-f[idx, k])))
    src, dst = topology.link_endpoints()
    net = rates.copy()
    for idx in range(topology.link_count):
        net[dst[idx]] += f[idx]
        net[src[idx]] -= f[idx]
    for i in range(n):
        for k in range(n):
            if i != k and net[i, k] > tol:
                out.append(FlowViolation("conservation", (i, k), float(net[i, k])))
    totals = f.sum(axis=1).reshape(-1, 2)
    for e, (a, b, dep) in enumerate(topology.channels):
        gap = abs(totals[e, 0] - totals[e, 1])
        if gap > tol:
            out.append(FlowViolation("balance", (a, b), float(gap)))
        over = totals[e, 0] + totals[e, 1] - dep
        if over > tol:
            out.append(FlowViolation("capacity", (a, b), float(over)))
    return out


def _lp_structure(topology: Topology):
    """Sparse rows shared by every LP: (conservation, balance, capacity) and bounds."""
    n = topology.node_count
    L = topology.link_count
    src, dst = topology.link_endpoints()

    def var(idx: int, k: int) -> int:
        return idx * n + k

    cons_rows, cons_cols, cons_vals = [], [], []
    row_of = {}
    for i in range(n):
        for k in range(n):
            if i != k:
                row_of[(i, k)] = len(row_of)
    for idx in range(L):
        for k in range(n):
            if (int(dst[idx]), k) in row_of:
                cons_rows.append(row_of[(int(dst[idx]), k)])
                cons_cols.append(var(idx, k))
                cons_vals.append(1.0)
            if (int(src[idx]), k) in row_of:
                cons_rows.append(row_of[(int(src[idx]), k)])
                cons_cols.append(var(idx, k))
                cons_vals.append(-1.0)
    A_cons = sp.csr_matrix((cons_vals, (cons_rows, cons_cols)), shape=(len(row_of), L * n))

    m = topology.channel_count
    bal_r, bal_c, bal_v, cap_r, cap_c = [], [], [], [], []
    for e in range(m):
        for k in range(n):
            bal_r += [e, e]
            bal_c += [var(2 * e, k), var(2 * e + 1, k)]
            bal_v += [1.0, -1.0]
            cap_r += [e, e]
            cap_c += [var(2 * e, k), var(2 * e + 1, k)]
    A_bal = sp.csr_matrix((bal_v, (bal_r, bal_c)), shape=(m, L * n))
    A_cap = sp.csr_matrix((np.ones(len(cap_r)), (cap_r, cap_c)), shape=(m, L * n))

    bounds = [(0.0, 0.0) if int(src[idx]) == k else (0.0, None) for idx in range(L) for k in range(n)]
    return row_of, A_cons, A_bal, A_cap, bounds


def _rhs_rates(row_of: dict, rates: np.ndarray) -> np.ndarray:
    rhs = np.zeros(len(row_of))
    for (i, k), r in row_of.items():
        rhs[r] = rates[i, k]
    return rhs


def check_supportable(topology: Topology, rates: np.ndarray, max_nodes: int = MAX_NODES) -> SupportabilityResult:
    """Solve the membership LP with HiGHS (deterministic dual simplex).

    A supportable verdict carries a witness that passes ``verify_flow``; an
    unsupportable one reports the smallest uniform slack that would restore
    feasibility.
    """
    rates = _check_rates(topology, rates)
    n = topology.node_count
    if n > max_nodes:
        raise OracleError(f"instance has {n} nodes; limit is {max_nodes}")
    row_of, A_cons, A_bal, A_cap, bounds = _lp_structure(topology)
    lam = _rhs_rates(row_of, rates)
    deposits = topology.deposits()
    nvar = topology.link_count * n
    A_ub = sp.vstack([A_cons, A_cap]).tocsr()
    b_ub = np.concatenate([-lam, deposits])
    res = linprog(
        c=np.ones(nvar),
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=A_bal,
        b_eq=np.zeros(topology.channel_count),
        bounds=bounds,
        method="highs-ds",
    )
    if res.status == 0:
        witness = np.clip(res.x.reshape(topology.link_count, n), 0.0, None)
        issues = verify_flow(witness, rates, topology)
        if not issues:
            return SupportabilityResult(True, witness=witness)
        return SupportabilityResult(False, max_violation=max(v.slack for v in issues), violations=issues)
    if res.status != 2:
        raise OracleError(f"LP solver failed: {res.message}")
    return SupportabilityResult(False, max_violation=infeasibility_margin(topology, rates))


def infeasibility_margin(topology: Topology, rates: np.ndarray) -> float:
    """Least ``s >= 0`` such that relaxing every conservation and capacity row by ``s`` is feasible."""
    rates = _check_rates(topology, rates)
    n = topology.node_count
    row_of, A_cons, A_bal, A_cap, bounds = _lp_structure(topology)
    lam = _rhs_rates(row_of, rates)
    nvar = topology.link_count * n
    slack_col_cons = sp.csr_matrix(-np.ones((A_cons.shape[0], 1)))
    slack_col_cap = sp.csr_matrix(-np.ones((A_cap.shape[0], 1)))
    A_ub = sp.vstack([sp.hstack([A_cons, slack_col_cons]), sp.hstack([A_cap, slack_col_cap])]).tocsr()
    b_ub = np.concatenate([-lam, topology.deposits()])
    A_eq = sp.hstack([A_bal, sp.csr_matrix((A_bal.shape[0], 1))]).tocsr()
    c = np.zeros(nvar + 1)
    c[-1] = 1.0
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=np.zeros(A_eq.shape[0]),
                  bounds=list(bounds) + [(0.0, None)], method="highs-ds")
    if res.status != 0:
        raise OracleError(f"margin LP failed: {res.message}")
    return float(res.x[-1])


def max_supportable_scale(topology: Topology, rates: np.ndarray) -> float:
    """Largest ``alpha`` with ``alpha * rates`` supportable (``inf`` for all-zero rates)."""
    rates = _check_rates(topology, rates)
    if not rates.any():
        return float("inf")
    n = topology.node_count
    row_of, A_cons, A_bal, A_cap, bounds = _lp_structure(topology)
    lam = _rhs_rates(row_of, rates)
    nvar = topology.link_count * n
    A_ub = sp.vstack([
        sp.hstack([A_cons, sp.csr_matrix(lam.reshape(-1, 1))]),
        sp.hstack([A_cap, sp.csr_matrix((A_cap.shape[0], 1))]),
    ]).tocsr()
    b_ub = np.concatenate([np.zeros(len(lam)), topology.deposits()])
    A_eq = sp.hstack([A_bal, sp.csr_matrix((A_bal.shape[0], 1))]).tocsr()
    c = np.zeros(nvar + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=np.zeros(A_eq.shape[0]),
                  bounds=list(bounds) + [(0.0, None)], method="highs-ds")
    if res.status != 0:
        raise OracleError(f"scale LP failed: {res.message}")
    return float(res.x[-1])


class OracleRouter:
    """Sends the static witness flow every slot.

    ``prepare`` performs the one-off fund equalization: any link whose starting
    balance is below its per-slot flow is topped up by its peer before slot 0.
    """

    def __init__(self, flows: np.ndarray, topology: Topology, rates: np.ndarray | None = None):
        f = np.asarray(flows, dtype=float)
        if rates is not None:
            issues = verify_flow(f, rates, topology)
            if issues:
                raise OracleError("flows do not verify: " + "; ".join(map(str, issues[:3])))
        elif f.shape != (topology.link_count, topology.node_count) or np.any(f < 0):
            raise OracleError("flows have the wrong shape or negative entries")
        self.flows = np.where(f > FEAS_TOL * 1e-3, f, 0.0)
        self.topology = topology

    def prepare(self, state: NetworkState) -> NetworkState:
        totals = self.flows.sum(axis=1)
        caps = state.capacities.copy().reshape(-1, 2)
        imb = state.imbalances.copy().reshape(-1, 2)
        for e, (_, _, dep) in enumerate(self.topology.channels):
            for side in (0, 1):
                need = totals[2 * e + side] - caps[e, side]
                if need > 0:
                    # peer pays the shortfall across the channel
                    move = min(need, caps[e, 1 - side])
                    caps[e, side] += move
                    caps[e, 1 - side] -= move
                    imb[e, side] += move
                    imb[e, 1 - side] -= move
        return state.replace(capacities=caps.reshape(-1), imbalances=imb.reshape(-1))

    def decide(
        self,
        state: NetworkState,
        arrivals: np.ndarray,
        backlog_cap: bool = True,
        active: Iterable[int] | None = None,
    ) -> RoutingDecision:
        src, dst = self.topology.link_endpoints()
        up = None if active is None else set(active)
        backlog = state.queues + arrivals
        remaining = state.capacities.copy()
        decision = RoutingDecision(slot=state.slot)
        for idx, k in zip(*np.nonzero(self.flows)):
            i, j = int(src[idx]), int(dst[idx])
            if up is not None and (i not in up or j not in up):
                continue
            amount = min(self.flows[idx, k], remaining[idx])
            if backlog_cap:
                amount = min(amount, backlog[i, k])
                backlog[i, k] -= max(amount, 0.0)
            if amount > 0:
                remaining[idx] -= amount
                decision.add(i, j, int(k), float(amount))
        return decision


def oracle_router(flows: np.ndarray, topology: Topology, rates: np.ndarray | None = None) -> OracleRouter:
    return OracleRouter(flows, topology, rates)


def rates_from_flows(flow_specs, node_count: int, mean_size: float = 1.0) -> np.ndarray:
    """Token-rate matrix implied by payment flows (payments/slot times mean size)."""
    rates = np.zeros((node_count, node_count))
    for f in flow_specs:
        rates[f.source, f.destination] += f.rate * mean_size
    return rates
