import numpy as np
import pytest
from grid_oracle import grid_supportable, near_boundary, random_instance

from celerlab.engine import SimConfig, run
from celerlab.netmodel import Topology, build_state, generate_random_topology, triangle
from celerlab.oracle import (
    OracleError,
    OracleRouter,
    check_supportable,
    infeasibility_margin,
    max_supportable_scale,
    rates_from_flows,
    verify_flow,
)
from celerlab.traffic import FlowSpec

PAIR = Topology(2, ((0, 1, 10.0),))


def pair_rates(fwd, back):
    return np.array([[0.0, fwd], [back, 0.0]])


def pair_flow(f01, f10):
    # link 0 is 0->1 (commodity 1), link 1 is 1->0 (commodity 0)
    f = np.zeros((2, 2))
    f[0, 1], f[1, 0] = f01, f10
    return f


def test_verify_flow_examples():
    rates = pair_rates(4, 4)
    assert verify_flow(pair_flow(4, 4), rates, PAIR) == []
    issues = verify_flow(pair_flow(6, 4), rates, PAIR)
    assert [(v.kind, v.slack) for v in issues] == [("balance", 2.0)]
    issues = verify_flow(pair_flow(5.5, 5.5), pair_rates(4, 4), PAIR)
    assert [v.kind for v in issues] == ["capacity"]


def test_verify_flow_reports_conservation():
    issues = verify_flow(pair_flow(3, 3), pair_rates(4, 0), PAIR)
    assert issues[0].kind == "conservation" and issues[0].where == (0, 1)


def test_symmetric_pair_supportable():
    res = check_supportable(PAIR, pair_rates(4, 4))
    assert res.supportable and verify_flow(res.witness, pair_rates(4, 4), PAIR) == []


def test_one_way_pair_matches_grid_scan():
    for rate in (4.0, 5.0, 6.0):
        res = check_supportable(PAIR, pair_rates(rate, 0))
        assert res.supportable == grid_supportable(PAIR, pair_rates(rate, 0), step=0.5)
    assert not check_supportable(PAIR, pair_rates(6, 0)).supportable
    assert check_supportable(PAIR, pair_rates(5, 0)).supportable  # exactly on the boundary


def test_source_cut_unsupportable():
    topo = triangle(10)
    rates = np.zeros((3, 3))
    rates[0, 1] = 21
    res = check_supportable(topo, rates)
    assert not res.supportable and res.max_violation > 0


def test_rate_validation():
    with pytest.raises(OracleError):
        check_supportable(PAIR, np.ones((2, 2)))
    with pytest.raises(OracleError):
        check_supportable(PAIR, pair_rates(-1, 0))
    with pytest.raises(OracleError):
        check_supportable(generate_random_topology(0, 21, 20, (1, 2)), np.zeros((21, 21)))


def test_lp_agrees_with_grid_scan():
    compared = 0
    for seed in range(100):
        topo, rates = random_instance(seed)
        if near_boundary(topo, rates):
            continue
        compared += 1
        assert check_supportable(topo, rates).supportable == grid_supportable(topo, rates), seed
    assert compared >= 80


def random_rates(seed, n=5):
    rng = np.random.default_rng(seed)
    topo = generate_random_topology(seed, n, n + 1, (5, 15))
    rates = np.where(rng.uniform(size=(n, n)) < 0.4, rng.uniform(0, 4, size=(n, n)), 0.0)
    np.fill_diagonal(rates, 0)
    return topo, rates


@pytest.mark.parametrize("seed", range(15))
def test_witness_soundness_and_margin(seed):
    topo, rates = random_rates(seed)
    res = check_supportable(topo, rates)
    if res.supportable:
        assert verify_flow(res.witness, rates, topo) == []
        assert infeasibility_margin(topo, rates) <= 1e-7
    else:
        assert res.max_violation > 0


@pytest.mark.parametrize("seed", range(15))
def test_monotone_and_scaling(seed):
    topo, rates = random_rates(seed)
    alpha = max_supportable_scale(topo, rates)
    inside = rates * alpha * 0.99
    assert check_supportable(topo, inside).supportable
    assert not check_supportable(topo, rates * alpha * 1.01).supportable
    rng = np.random.default_rng(seed)
    assert check_supportable(topo, inside * rng.uniform(0, 1, size=rates.shape)).supportable
    bigger = Topology(topo.node_count, tuple((a, b, 3 * dep) for a, b, dep in topo.channels))
    assert check_supportable(bigger, inside * 3).supportable


def test_zero_flows_send_nothing():
    router = OracleRouter(np.zeros((2, 2)), PAIR, np.zeros((2, 2)))
    s = build_state(PAIR)
    for _ in range(5):
        assert len(router.decide(s, np.zeros((2, 2)))) == 0


def test_symmetric_pair_oracle_keeps_balance():
    cfg = SimConfig(PAIR, [FlowSpec(0, 1, 4.0), FlowSpec(1, 0, 4.0)], router="oracle", arrivals="deterministic", slots=50)
    result = run(cfg, keep_decisions=True)
    assert all(d.entries == {(0, 1, 1): 4.0, (1, 0, 0): 4.0} for d in result.decisions)
    assert not result.final_state.imbalances.any()


def test_oracle_rejects_bad_flows():
    with pytest.raises(OracleError):
        OracleRouter(pair_flow(6, 4), PAIR, pair_rates(4, 4))


def test_fund_equalization_before_first_slot():
    s = build_state(PAIR, {(0, 1): 1.0})
    router = OracleRouter(pair_flow(4, 4), PAIR, pair_rates(4, 4))
    s = router.prepare(s)
    assert s.capacity(0, 1) == 4 and s.capacity(1, 0) == 6


def test_triangle_rotating_demand_queues_bounded():
    flows = [FlowSpec(0, 1, 100), FlowSpec(1, 2, 100), FlowSpec(2, 0, 100)]
    cfg = SimConfig(triangle(200), flows, router="oracle", arrivals="deterministic", slots=1000)
    result = run(cfg)
    assert max(m.total_queue for m in result.metrics) <= 300
    assert result.summary.stable and result.summary.balanced


def test_rates_from_flows():
    rates = rates_from_flows([FlowSpec(0, 1, 2.0), FlowSpec(0, 1, 1.0)], 2, 3.0)
    assert rates[0, 1] == 9.0 and rates[1, 0] == 0
