import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from celerlab.econ import (
    RING,
    AuctionRequest,
    Bid,
    EconError,
    GuardRequest,
    InsufficientLiquidity,
    PolcCommitment,
    Stake,
    StakePool,
    assign_dispute_slots,
    polc_power,
    polc_rewards,
    ring_distance,
    run_liba,
    score_bid,
    sgn_assign,
    sgn_fees,
    sgn_stake_counts,
)

PCT = Fraction(1, 100)
REQUEST = AuctionRequest(600, 30, PCT)
BIDS = [
    Bid("A", PCT, 800, 400),
    Bid("B", PCT / 2, 800, 200),
    Bid("C", PCT, 100, 400),
]


def scan_stake(bid, target, f_max, r_max, w1=Fraction(1, 2), w2=Fraction(1, 2)):
    """Smallest t' in 0..t whose score reaches ``target``, by linear scan."""
    for t in range(bid.celr + 1):
        trial = Bid(bid.bidder, bid.rate, t, bid.liquidity)
        if score_bid(trial, f_max, r_max, w1, w2) >= target:
            return t
    return bid.celr


# --- auction ----------------------------------------------------------------

def test_example_scores():
    f_max, r_max = Fraction(4), PCT
    a, b, c = (score_bid(bid, f_max, r_max) for bid in BIDS)
    assert a == Fraction(-1, 4) and b == Fraction(1, 4) and c == Fraction(-15, 32)
    assert b > a > c


def test_zero_celr_score():
    bid = Bid("Z", PCT / 2, 0, 100)
    assert score_bid(bid, 4, PCT) == -Fraction(1, 2) * Fraction(1, 2)


def test_example_outcome():
    out = run_liba(REQUEST, BIDS)
    assert out.winners == ("B", "A") and out.losers == ("C",) and out.first_loser == "C"
    assert out.stakes == {"A": 100, "B": 0}
    for bidder in out.winners:
        bid = next(b for b in BIDS if b.bidder == bidder)
        assert out.stakes[bidder] == scan_stake(bid, out.score_of("C"), out.f_max, out.r_max)


def test_single_bid_pays_no_stake():
    out = run_liba(AuctionRequest(100, 1, PCT), [Bid(1, PCT, 50, 100)])
    assert out.winners == (1,) and out.stakes == {1: 0} and out.first_loser is None


def test_auction_errors():
    with pytest.raises(InsufficientLiquidity):
        run_liba(AuctionRequest(2000, 30, PCT), BIDS)
    with pytest.raises(EconError):
        run_liba(REQUEST, BIDS + [Bid("D", 2 * PCT, 1, 1)])
    with pytest.raises(EconError):
        run_liba(REQUEST, BIDS + [Bid("A", PCT, 1, 1)])
    with pytest.raises(EconError):
        run_liba(REQUEST, BIDS, mode="burn")
    with pytest.raises(EconError):
        Bid("X", PCT, 1, 0)


def test_mode_is_recorded():
    assert run_liba(REQUEST, BIDS, mode="consume").mode == "consume"


def test_ties_break_by_bidder_id():
    bids = [Bid(2, PCT, 10, 100), Bid(1, PCT, 10, 100)]
    assert run_liba(AuctionRequest(100, 1, PCT), bids).winners == (1,)


@st.composite
def auctions(draw):
    n = draw(st.integers(1, 7))
    bids = [
        Bid(i, Fraction(draw(st.integers(1, 100)), 10_000), draw(st.integers(0, 1000)), draw(st.integers(1, 500)))
        for i in range(n)
    ]
    if all(b.celr == 0 for b in bids):
        bids[0] = Bid(0, bids[0].rate, 1, bids[0].liquidity)
    total = sum(b.liquidity for b in bids)
    q = draw(st.integers(1, total))
    return AuctionRequest(q, 30, PCT), bids


@settings(max_examples=150, deadline=None)
@given(auctions())
def test_stakes_match_scan_and_bound(case):
    request, bids = case
    out = run_liba(request, bids)
    assert sum(b.liquidity for b in bids if b.bidder in out.winners) >= request.liquidity
    for bidder, stake in out.stakes.items():
        bid = next(b for b in bids if b.bidder == bidder)
        assert 0 <= stake <= bid.celr
        if out.first_loser is not None:
            target = out.score_of(out.first_loser)
            assert stake == scan_stake(bid, target, out.f_max, out.r_max)


@settings(max_examples=100, deadline=None)
@given(auctions(), st.integers(2, 9))
def test_ordering_scale_invariance(case, factor):
    request, bids = case
    base = run_liba(request, bids)
    order = [sb.bid.bidder for sb in base.ranked]
    more_celr = run_liba(request, [Bid(b.bidder, b.rate, b.celr * factor, b.liquidity) for b in bids])
    assert [sb.bid.bidder for sb in more_celr.ranked] == order and more_celr.winners == base.winners
    more_liq = run_liba(
        AuctionRequest(request.liquidity * factor, request.duration, request.max_rate),
        [Bid(b.bidder, b.rate, b.celr, b.liquidity * factor) for b in bids],
    )
    assert [sb.bid.bidder for sb in more_liq.ranked] == order and more_liq.winners == base.winners


@settings(max_examples=150, deadline=None)
@given(auctions(), st.data())
def test_overstating_rate_never_helps(case, data):
    request, bids = case
    base = run_liba(request, bids)
    who = data.draw(st.sampled_from(bids))
    # stay within the current maximum rate so the normalisation is unchanged
    higher = data.draw(st.integers(int(who.rate * 10_000), int(base.r_max * 10_000)))
    cheat = Bid(who.bidder, Fraction(higher, 10_000), who.celr, who.liquidity)
    out = run_liba(request, [cheat if b.bidder == who.bidder else b for b in bids])
    rank = lambda o: [sb.bid.bidder for sb in o.ranked].index(who.bidder)
    assert rank(out) >= rank(base)
    if who.bidder in base.winners and who.bidder in out.winners:
        assert out.stakes[who.bidder] >= base.stakes[who.bidder]
    if who.bidder not in base.winners:
        assert who.bidder not in out.winners


# --- PoLC -------------------------------------------------------------------

def test_polc_power():
    assert polc_power(100, 30) == 3000
    assert polc_power(1, 1) == 1
    assert polc_power(100, 60) == 2 * polc_power(100, 30)
    with pytest.raises(EconError):
        polc_power(0, 5)


def test_polc_reward_examples():
    two = [PolcCommitment("x", 100, 30), PolcCommitment("y", 100, 10)]
    assert polc_rewards(two, 100) == {"x": 75, "y": 25}
    assert polc_rewards([PolcCommitment("solo", 3, 7)], 100) == {"solo": 100}
    three = [PolcCommitment(i, 1, 1) for i in (2, 0, 1)]
    assert polc_rewards(three, 100) == {0: 34, 1: 33, 2: 33}


def test_polc_rounding_residue():
    commitments = [PolcCommitment(i, 1, 1) for i in range(4)]
    shares = polc_rewards(commitments, 2)  # exact 0.5 each rounds to 0
    assert shares == {0: 2, 1: 0, 2: 0, 3: 0}
    commitments = [PolcCommitment(i, 3, 1) for i in range(2)] + [PolcCommitment(9, 2, 1)]
    shares = polc_rewards(commitments, 4)  # 1.5, 1.5, 1.0 round to 2, 2, 1
    assert shares == {0: 1, 1: 2, 9: 1}


# --- SGN --------------------------------------------------------------------

def test_stake_counts_examples():
    assert sgn_stake_counts([GuardRequest(1, 1, 1), GuardRequest(2, 3, 1)], 100) == [25, 75]
    assert sgn_stake_counts([GuardRequest(1, 7, 3)], 100) == [100]
    assert sgn_stake_counts([GuardRequest(i, 2, 2) for i in range(3)], 100) == [34, 33, 33]


def random_pool(rng, size, owners=4):
    ids = [rng.getrandbits(256) for _ in range(size)]
    return StakePool(tuple(Stake(p, rng.randrange(owners)) for p in dict.fromkeys(ids)))


def test_assign_examples():
    rng = random.Random(5)
    pool = random_pool(rng, 8)
    req = GuardRequest(rng.getrandbits(256), 10, 5)
    assert len(sgn_assign(req, pool, 8).selected) == 8
    target = pool.stakes[3].stake_id
    assert sgn_assign(GuardRequest(target, 1, 1), pool, 1).selected[0].stake_id == target
    reference = sorted(pool.stakes, key=lambda s: ((s.stake_id - req.state_hash) % RING, s.stake_id))[:3]
    assert list(sgn_assign(req, pool, 3).selected) == reference


def test_ring_distance_wraps():
    assert ring_distance(5, 10) == RING - 5
    assert ring_distance(10, 5) == 5


def test_fee_examples():
    req = GuardRequest(0, 10, 1)
    assert sgn_fees(req, {"g": 4}) == {"g": 10}
    assert sgn_fees(req, {"a": 1, "b": 1}) == {"a": 5, "b": 5}
    assert sgn_fees(req, {"a": 2, "b": 1}) == {"a": 7, "b": 3}


def test_dispute_slots():
    stakes = [Stake(i, 0) for i in range(3)]
    assert assign_dispute_slots(stakes[:1], 10) == [(0, 10)]
    assert assign_dispute_slots(stakes[:2], 10) == [(0, 5), (5, 10)]
    assert assign_dispute_slots(stakes, 10) == [(0, 4), (4, 7), (7, 10)]
    with pytest.raises(EconError):
        assign_dispute_slots(stakes, 2)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 10**6), st.integers(1, 10**4)), min_size=1, max_size=12), st.integers(0, 10**9))
def test_polc_rewards_sum_exactly(pairs, reward):
    commitments = [PolcCommitment(i, v, d) for i, (v, d) in enumerate(pairs)]
    shares = polc_rewards(commitments, reward)
    assert sum(shares.values()) == reward and all(s >= 0 for s in shares.values())
    total = sum(v * d for v, d in pairs)
    for i, (v, d) in enumerate(pairs):
        assert abs(shares[i] - Fraction(reward * v * d, total)) <= len(pairs)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 1000), st.integers(1, 100)), min_size=1, max_size=10), st.integers(1, 5000))
def test_stake_counts_largest_remainder(reqs, total):
    counts = sgn_stake_counts([GuardRequest(i, fee, d) for i, (fee, d) in enumerate(reqs)], total)
    assert sum(counts) == total
    rates = [Fraction(fee, d) for fee, d in reqs]
    for n, r in zip(counts, rates):
        assert abs(n - total * r / sum(rates)) < 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 40), st.data())
def test_assign_is_order_free_and_fees_sum(seed, size, data):
    rng = random.Random(seed)
    pool = random_pool(rng, size)
    req = GuardRequest(rng.getrandbits(256), rng.randint(1, 10**6), rng.randint(1, 100))
    count = data.draw(st.integers(1, pool.total))
    picked = sgn_assign(req, pool, count)
    shuffled = list(pool.stakes)
    rng.shuffle(shuffled)
    assert sgn_assign(req, StakePool(tuple(shuffled)), count) == picked
    assert sum(picked.per_owner.values()) == count
    fees = sgn_fees(req, picked.per_owner)
    assert sum(fees.values()) == req.fee
