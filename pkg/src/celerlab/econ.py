"""Token-economy mechanisms: the liquidity auction, lock-up mining rewards and
the state-guardian network's stake accounting.

Everything here is exact: rates and weights are ``Fraction``s, token amounts
are ``int``s. Floats passed in are converted through their shortest decimal
repr, so ``0.01`` means one hundredth, not the nearest binary64.
"""

from __future__ import annotations

import math
from collections.abc import Hashable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction

RING = 1 << 256
MODES = ("stake", "consume")


class EconError(ValueError):
    pass


class InsufficientLiquidity(EconError):
    pass


def as_fraction(x) -> Fraction:
    """Exact rational for ints, Fractions, decimal strings and floats (via ``repr``)."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, bool):
        raise EconError("booleans are not numbers here")
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, float):
        if not math.isfinite(x):
            raise EconError(f"non-finite value {x}")
        return Fraction(repr(x))
    if isinstance(x, str):
        try:
            return Fraction(x.strip())
        except (ValueError, ZeroDivisionError) as exc:
            raise EconError(f"not a number: {x!r}") from exc
    raise EconError(f"unsupported numeric type {type(x).__name__}")


def _positive_int(name: str, x) -> int:
    if isinstance(x, bool) or not isinstance(x, int) or x <= 0:
        raise EconError(f"{name} must be a positive integer, got {x!r}")
    return x


# ---------------------------------------------------------------------------
# Liquidity auction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AuctionRequest:
    liquidity: int  # currency units requested
    duration: int  # days
    max_rate: Fraction  # highest acceptable interest rate

    def __post_init__(self) -> None:
        _positive_int("liquidity", self.liquidity)
        _positive_int("duration", self.duration)
        rate = as_fraction(self.max_rate)
        if not 0 < rate <= 1:
            raise EconError(f"max_rate must lie in (0, 1], got {rate}")
        object.__setattr__(self, "max_rate", rate)


@dataclass(frozen=True)
class Bid:
    bidder: Hashable
    rate: Fraction
    celr: int  # tokens committed
    liquidity: int  # currency units offered

    def __post_init__(self) -> None:
        rate = as_fraction(self.rate)
        if rate < 0:
            raise EconError(f"bid {self.bidder}: negative rate")
        if isinstance(self.celr, bool) or not isinstance(self.celr, int) or self.celr < 0:
            raise EconError(f"bid {self.bidder}: celr must be a non-negative integer")
        if isinstance(self.liquidity, bool) or not isinstance(self.liquidity, int) or self.liquidity <= 0:
            raise EconError(f"bid {self.bidder}: liquidity must be a positive integer")
        object.__setattr__(self, "rate", rate)

    @property
    def celr_ratio(self) -> Fraction:
        return Fraction(self.celr, self.liquidity)


@dataclass(frozen=True)
class ScoredBid:
    bid: Bid
    score: Fraction


@dataclass(frozen=True)
class AuctionOutcome:
    ranked: tuple[ScoredBid, ...]  # every bid, best score first
    winners: tuple[Hashable, ...]
    stakes: dict[Hashable, int]
    first_loser: Hashable | None
    mode: str
    f_max: Fraction
    r_max: Fraction

    @property
    def losers(self) -> tuple[Hashable, ...]:
        won = set(self.winners)
        return tuple(sb.bid.bidder for sb in self.ranked if sb.bid.bidder not in won)

    def score_of(self, bidder: Hashable) -> Fraction:
        for sb in self.ranked:
            if sb.bid.bidder == bidder:
                return sb.score
        raise KeyError(bidder)


def score_bid(bid: Bid, f_max, r_max, w1=Fraction(1, 2), w2=Fraction(1, 2)) -> Fraction:
    f_max, r_max = as_fraction(f_max), as_fraction(r_max)
    if f_max <= 0 or r_max <= 0:
        raise EconError("f_max and r_max must be positive")
    return as_fraction(w1) * bid.celr_ratio / f_max - as_fraction(w2) * bid.rate / r_max


def stake_to_match(bid: Bid, target: Fraction, f_max, r_max, w1=Fraction(1, 2), w2=Fraction(1, 2)) -> int:
    """Smallest whole stake in ``[0, bid.celr]`` whose score reaches ``target``."""
    f_max, r_max, w1, w2 = map(as_fraction, (f_max, r_max, w1, w2))
    need = bid.liquidity * f_max * (target + w2 * bid.rate / r_max) / w1
    return min(max(math.ceil(need), 0), bid.celr)


def run_liba(
    request: AuctionRequest,
    bids: Sequence[Bid],
    w1=Fraction(1, 2),
    w2=Fraction(1, 2),
    mode: str = "stake",
) -> AuctionOutcome:
    """Reverse second-score auction for liquidity.

    Bids are ranked by score (ties to the smaller bidder id); winners are the
    shortest prefix whose offered liquidity covers the request. Each winner
    stakes only what it takes to match the first loser's score.
    """
    if mode not in MODES:
        raise EconError(f"mode must be one of {MODES}, got {mode!r}")
    if not bids:
        raise EconError("an auction needs at least one bid")
    w1, w2 = as_fraction(w1), as_fraction(w2)
    if w1 <= 0 or w2 < 0:
        raise EconError("weights must satisfy w1 > 0, w2 >= 0")
    ids = [b.bidder for b in bids]
    if len(set(ids)) != len(ids):
        raise EconError("bidder ids must be unique")
    for b in bids:
        if b.rate > request.max_rate:
            raise EconError(f"bid {b.bidder} rate {b.rate} exceeds the request's {request.max_rate}")
    if sum(b.liquidity for b in bids) < request.liquidity:
        raise InsufficientLiquidity(
            f"bids offer {sum(b.liquidity for b in bids)} but {request.liquidity} was requested"
        )

    f_max = max(b.celr_ratio for b in bids)
    r_max = max(b.rate for b in bids)
    if f_max == 0 or r_max == 0:
        raise EconError("scores are undefined when every bid has zero CELR or zero rate")
    ranked = sorted(
        (ScoredBid(b, score_bid(b, f_max, r_max, w1, w2)) for b in bids),
        key=lambda sb: (-sb.score, sb.bid.bidder),
    )
    covered = 0
    cut = 0
    while covered < request.liquidity:
        covered += ranked[cut].bid.liquidity
        cut += 1
    winners = ranked[:cut]
    loser = ranked[cut] if cut < len(ranked) else None
    stakes = {
        sb.bid.bidder: 0 if loser is None else stake_to_match(sb.bid, loser.score, f_max, r_max, w1, w2)
        for sb in winners
    }
    return AuctionOutcome(
        ranked=tuple(ranked),
        winners=tuple(sb.bid.bidder for sb in winners),
        stakes=stakes,
        first_loser=None if loser is None else loser.bid.bidder,
        mode=mode,
        f_max=f_max,
        r_max=r_max,
    )


# ---------------------------------------------------------------------------
# Proportional payouts
# ---------------------------------------------------------------------------

def apportion_rounded(total: int, weights: Sequence[Fraction], priority: Sequence[int]) -> list[int]:
    """Split ``total`` by ``weights``: round each exact share half-even, then settle the residue.

    A positive residue goes to ``priority[0]``. A negative one is taken a unit
    at a time from recipients in ``priority`` order, never below zero.
    """
    wsum = sum(weights, Fraction(0))
    if wsum <= 0:
        raise EconError("weights must have a positive sum")
    out = [round(Fraction(total) * w / wsum) for w in weights]  # Fraction rounds half-even
    residue = total - sum(out)
    if residue > 0:
        out[priority[0]] += residue
    while residue < 0:
        for idx in priority:
            if residue == 0:
                break
            if out[idx] > 0:
                out[idx] -= 1
                residue += 1
    return out


@dataclass(frozen=True)
class PolcCommitment:
    backer: Hashable
    value: int  # locked currency units
    duration: int  # lock time units

    def __post_init__(self) -> None:
        _positive_int("value", self.value)
        _positive_int("duration", self.duration)


def polc_power(value: int, duration: int) -> int:
    return _positive_int("value", value) * _positive_int("duration", duration)


def polc_rewards(commitments: Sequence[PolcCommitment], reward: int) -> dict[Hashable, int]:
    """Block reward split in proportion to lock-up power; the residue goes to the
    most powerful backer (smallest id among equals)."""
    if not commitments:
        raise EconError("no commitments")
    if isinstance(reward, bool) or not isinstance(reward, int) or reward < 0:
        raise EconError("reward must be a non-negative integer")
    ids = [c.backer for c in commitments]
    if len(set(ids)) != len(ids):
        raise EconError("backer ids must be unique")
    powers = [polc_power(c.value, c.duration) for c in commitments]
    priority = sorted(range(len(commitments)), key=lambda i: (-powers[i], ids[i]))
    shares = apportion_rounded(reward, [Fraction(p) for p in powers], priority)
    return dict(zip(ids, shares))


# ---------------------------------------------------------------------------
# State guardian network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GuardRequest:
    state_hash: int  # 256-bit digest of the guarded state
    fee: int
    duration: int

    def __post_init__(self) -> None:
        if isinstance(self.state_hash, bool) or not isinstance(self.state_hash, int) or not 0 <= self.state_hash < RING:
            raise EconError("state_hash must be an integer in [0, 2**256)")
        _positive_int("fee", self.fee)
        _positive_int("duration", self.duration)

    @property
    def income_rate(self) -> Fraction:
        return Fraction(self.fee, self.duration)


@dataclass(frozen=True)
class Stake:
    stake_id: int  # 256-bit ring position
    owner: Hashable


@dataclass(frozen=True)
class StakePool:
    stakes: tuple[Stake, ...]

    def __post_init__(self) -> None:
        ids = [s.stake_id for s in self.stakes]
        if len(set(ids)) != len(ids):
            raise EconError("stake ids must be unique")
        for s in self.stakes:
            if not 0 <= s.stake_id < RING:
                raise EconError("stake ids must lie in [0, 2**256)")

    @property
    def total(self) -> int:
        return len(self.stakes)


@dataclass(frozen=True)
class Assignment:
    selected: tuple[Stake, ...]  # in ring-distance order
    per_owner: dict[Hashable, int] = field(default_factory=dict)


def sgn_stake_counts(requests: Sequence[GuardRequest], total_stakes: int) -> list[int]:
    """Largest-remainder apportionment of stakes by fee per unit time."""
    if not requests:
        raise EconError("no requests")
    _positive_int("total_stakes", total_stakes)
    rates = [r.income_rate for r in requests]
    rsum = sum(rates, Fraction(0))
    quotas = [total_stakes * r / rsum for r in rates]
    counts = [math.floor(q) for q in quotas]
    left = total_stakes - sum(counts)
    order = sorted(range(len(requests)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def ring_distance(stake_id: int, state_hash: int) -> int:
    """Clockwise distance from the state hash to the stake on the 2**256 ring."""
    return (stake_id - state_hash) % RING


def sgn_assign(request: GuardRequest, pool: StakePool, count: int) -> Assignment:
    if isinstance(count, bool) or not isinstance(count, int) or not 0 <= count <= pool.total:
        raise EconError(f"count must lie in 0..{pool.total}")
    h = request.state_hash
    ranked = sorted(pool.stakes, key=lambda s: (ring_distance(s.stake_id, h), s.stake_id))
    chosen = tuple(ranked[:count])
    per_owner: dict[Hashable, int] = {}
    for s in chosen:
        per_owner[s.owner] = per_owner.get(s.owner, 0) + 1
    return Assignment(chosen, per_owner)


def sgn_fees(request: GuardRequest, per_owner: dict[Hashable, int]) -> dict[Hashable, int]:
    """Fee split by selected-stake count; residue to the owner with most stakes (smallest id on ties)."""
    if not per_owner or any(z <= 0 for z in per_owner.values()):
        raise EconError("every owner needs at least one selected stake")
    owners = list(per_owner)
    counts = [per_owner[o] for o in owners]
    priority = sorted(range(len(owners)), key=lambda i: (-counts[i], owners[i]))
    shares = apportion_rounded(request.fee, [Fraction(z) for z in counts], priority)
    return dict(zip(owners, shares))


def assign_dispute_slots(selected: Sequence[Stake], timeout: int) -> list[tuple[int, int]]:
    """Contiguous half-open windows covering ``[0, timeout)``; earlier stakes get the longer ones."""
    count = len(selected)
    if count == 0:
        return []
    if isinstance(timeout, bool) or not isinstance(timeout, int) or timeout < count:
        raise EconError(f"timeout must be an integer >= {count} (one slot per stake)")
    base, extra = divmod(timeout, count)
    windows = []
    start = 0
    for idx in range(count):
        width = base + (1 if idx < extra else 0)
        windows.append((start, start + width))
        start += width
    return windows
