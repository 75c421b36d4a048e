"""Command-line entry point: ``celerlab <subcommand> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 a router produced
an infeasible decision or the token audit failed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from celerlab import econ
from celerlab.config import load_config
from celerlab.engine import ROUTERS, AuditError, ConfigError, RunSummary, SimConfig, run, write_metrics_csv
from celerlab.netmodel import InfeasibleDecision, TopologyError, dump_topology, generate_random_topology, load_topology
from celerlab.oracle import OracleError, check_supportable
from celerlab.traffic import TrafficError

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 2, 3
THREADS_ENV = "CELERLAB_THREADS"


class InputError(ValueError):
    pass


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def summary_record(summary: RunSummary) -> dict:
    """Summary fields that depend only on the inputs (wall time is left out)."""
    record = summary.to_dict()
    record.pop("wall_seconds")
    return record


def summary_line(summary: RunSummary) -> str:
    return (
        f"router={summary.router} avg_payments_per_slot={summary.avg_payments_per_slot:.6g} "
        f"avg_utilization={summary.avg_utilization:.6g}"
    )


def _overrides(args) -> dict:
    return {"seed": args.seed, "router": args.router, "beta": args.beta, "slots": args.slots}


# ---------------------------------------------------------------------------
# simulate / compare
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    config = load_config(args.config, _overrides(args))
    result = run(config)
    out = Path(args.out)
    _write(out / "metrics.csv", write_metrics_csv(result.metrics))
    _write(out / "summary.json", _dump_json(summary_record(result.summary)))
    print(summary_line(result.summary))
    if not args.quiet:
        print(f"wrote {out / 'metrics.csv'} and {out / 'summary.json'} in {result.summary.wall_seconds:.2f}s", file=sys.stderr)
    return EXIT_OK


def _run_one(config: SimConfig):
    result = run(config)
    return result.summary, write_metrics_csv(result.metrics)


def _ratio(num: float, den: float) -> float | None:
    # null in JSON when the baseline delivered nothing
    return None if den == 0 else num / den


def compare_record(summaries: dict[str, RunSummary]) -> dict:
    record: dict = {"routers": {name: summary_record(s) for name, s in summaries.items()}}
    if "dbr" in summaries:
        ref = summaries["dbr"]
        record["dbr_ratios"] = {
            name: {
                "payments": _ratio(ref.avg_payments_per_slot, s.avg_payments_per_slot),
                "utilization": _ratio(ref.avg_utilization, s.avg_utilization),
            }
            for name, s in summaries.items()
        }
    return record


def cmd_compare(args) -> int:
    routers = [r.strip() for r in args.routers.split(",") if r.strip()]
    bad = [r for r in routers if r not in ROUTERS]
    if bad or not routers:
        raise ConfigError(f"--routers: unknown router(s) {', '.join(bad) or '(none)'}; choose from {', '.join(ROUTERS)}")
    base = load_config(args.config, _overrides(args))
    configs = [replace(base, router=r) for r in routers]
    workers = max(1, min(len(configs), _thread_limit()))
    if workers == 1:
        outcomes = [_run_one(c) for c in configs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_one, configs))
    out = Path(args.out)
    summaries = {}
    for name, (summary, csv_text) in zip(routers, outcomes):
        summaries[name] = summary
        _write(out / f"metrics_{name}.csv", csv_text)
        print(summary_line(summary))
    _write(out / "compare.json", _dump_json(compare_record(summaries)))
    if not args.quiet:
        print(f"wrote {out / 'compare.json'}", file=sys.stderr)
    return EXIT_OK


def _thread_limit() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


# ---------------------------------------------------------------------------
# topology / oracle
# ---------------------------------------------------------------------------

def cmd_topology(args) -> int:
    topo = generate_random_topology(args.seed, args.nodes, args.channels, (args.deposit_min, args.deposit_max))
    text = dump_topology(topo)
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _read_json(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc


def parse_rates(doc, node_count: int) -> np.ndarray:
    """Rates file: an object mapping ``"source:destination"`` to tokens per slot."""
    if not isinstance(doc, dict):
        raise InputError('rates must be a JSON object like {"0:2": 1.5}')
    rates = np.zeros((node_count, node_count))
    for key, value in doc.items():
        try:
            i, k = (int(part) for part in key.split(":"))
        except ValueError as exc:
            raise InputError(f"bad rate key {key!r}; expected 'source:destination'") from exc
        if not (0 <= i < node_count and 0 <= k < node_count) or i == k:
            raise InputError(f"rate key {key!r} must name two distinct nodes below {node_count}")
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
            raise InputError(f"rate for {key!r} must be a non-negative number")
        rates[i, k] += value
    return rates


def cmd_oracle(args) -> int:
    try:
        topo = load_topology(args.topology)
    except OSError as exc:
        raise InputError(f"{args.topology}: {exc.strerror or exc}") from exc
    rates = parse_rates(_read_json(args.rates), topo.node_count)
    result = check_supportable(topo, rates)
    record: dict = {"supportable": result.supportable}
    if result.supportable:
        src, dst = topo.link_endpoints()
        record["witness"] = [
            {"from": int(src[idx]), "to": int(dst[idx]), "commodity": int(k), "flow": float(result.witness[idx, k])}
            for idx, k in zip(*np.nonzero(result.witness > 0))
        ]
    else:
        record["max_violation"] = result.max_violation
    text = _dump_json(record)
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Mechanisms
# ---------------------------------------------------------------------------

def _frac_str(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


def _emit(args, record) -> None:
    text = _dump_json(record)
    if getattr(args, "out", None):
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)


def _require(doc, keys: set[str], where: str) -> None:
    if not isinstance(doc, dict) or set(doc) != keys:
        raise InputError(f"{where} must have exactly the keys {', '.join(sorted(keys))}")


def cmd_liba(args) -> int:
    doc = _read_json(args.input)
    if not isinstance(doc, dict) or not {"request", "bids"} <= set(doc) or not set(doc) <= {"request", "bids", "w1", "w2", "mode"}:
        raise InputError('auction input needs "request" and "bids" (optional "w1", "w2", "mode")')
    _require(doc["request"], {"liquidity", "duration", "max_rate"}, "request")
    req = doc["request"]
    request = econ.AuctionRequest(req["liquidity"], req["duration"], req["max_rate"])
    bids = []
    for idx, b in enumerate(doc["bids"]):
        _require(b, {"bidder", "rate", "celr", "liquidity"}, f"bid {idx}")
        bids.append(econ.Bid(b["bidder"], b["rate"], b["celr"], b["liquidity"]))
    w1 = args.w1 if args.w1 is not None else doc.get("w1", "1/2")
    w2 = args.w2 if args.w2 is not None else doc.get("w2", "1/2")
    mode = args.mode or doc.get("mode", "stake")
    outcome = econ.run_liba(request, bids, w1, w2, mode)
    _emit(args, {
        "mode": outcome.mode,
        "winners": list(outcome.winners),
        "first_loser": outcome.first_loser,
        "stakes": outcome.stakes,
        "scores": {sb.bid.bidder: _frac_str(sb.score) for sb in outcome.ranked},
        "ranking": [sb.bid.bidder for sb in outcome.ranked],
    })
    return EXIT_OK


def cmd_polc(args) -> int:
    doc = _read_json(args.input)
    if not isinstance(doc, list):
        raise InputError("commitments file must hold a JSON array")
    commitments = []
    for idx, c in enumerate(doc):
        _require(c, {"backer", "value", "duration"}, f"commitment {idx}")
        commitments.append(econ.PolcCommitment(c["backer"], c["value"], c["duration"]))
    rewards = econ.polc_rewards(commitments, args.reward)
    _emit(args, {
        "reward": args.reward,
        "power": {c.backer: econ.polc_power(c.value, c.duration) for c in commitments},
        "rewards": rewards,
    })
    return EXIT_OK


def _hash(value, where: str) -> int:
    if not isinstance(value, str) or len(value) != 64 or value != value.lower():
        raise InputError(f"{where} must be 64 lowercase hex characters")
    try:
        return int(value, 16)
    except ValueError as exc:
        raise InputError(f"{where} must be 64 lowercase hex characters") from exc


def cmd_sgn_assign(args) -> int:
    req_doc = _read_json(args.requests)
    pool_doc = _read_json(args.pool)
    if not isinstance(req_doc, list) or not req_doc:
        raise InputError("requests file must hold a non-empty JSON array")
    if not isinstance(pool_doc, list) or not pool_doc:
        raise InputError("pool file must hold a non-empty JSON array")
    requests = []
    for idx, r in enumerate(req_doc):
        _require(r, {"state_hash", "fee", "duration"}, f"request {idx}")
        requests.append(econ.GuardRequest(_hash(r["state_hash"], f"request {idx} state_hash"), r["fee"], r["duration"]))
    stakes = []
    for idx, s in enumerate(pool_doc):
        _require(s, {"stake_id", "owner"}, f"stake {idx}")
        stakes.append(econ.Stake(_hash(s["stake_id"], f"stake {idx} stake_id"), s["owner"]))
    pool = econ.StakePool(tuple(stakes))
    counts = econ.sgn_stake_counts(requests, pool.total)
    records = []
    for req, n in zip(requests, counts):
        chosen = econ.sgn_assign(req, pool, n)
        entry = {
            "state_hash": f"{req.state_hash:064x}",
            "stakes": n,
            "selected": [{"stake_id": f"{s.stake_id:064x}", "owner": s.owner} for s in chosen.selected],
            "per_owner": chosen.per_owner,
            "fees": econ.sgn_fees(req, chosen.per_owner) if n else {},
        }
        if args.timeout is not None and n:
            entry["dispute_slots"] = [list(w) for w in econ.assign_dispute_slots(chosen.selected, args.timeout)]
        records.append(entry)
    _emit(args, {"total_stakes": pool.total, "assignments": records})
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def _u32(text: str) -> int:
    value = int(text)
    if not 1 <= value < 1 << 32:
        raise argparse.ArgumentTypeError("slots must be a positive 32-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="celerlab", description="Payment-channel routing simulator and token-economy tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=_u64)
        p.add_argument("--router", choices=ROUTERS)
        p.add_argument("--beta", type=float)
        p.add_argument("--slots", type=_u32)
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("simulate", help="run one configuration")
    run_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="run one configuration under several routers")
    run_flags(p)
    p.add_argument("--routers", default="dbr,shortest_path,landmark")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("topology", help="generate a random connected topology")
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--channels", type=int, required=True)
    p.add_argument("--deposit-min", type=float, default=100.0)
    p.add_argument("--deposit-max", type=float, default=200.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_topology)

    p = sub.add_parser("oracle", help="check whether token rates are supportable")
    p.add_argument("--topology", required=True)
    p.add_argument("--rates", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("liba", help="run the liquidity auction")
    p.add_argument("--input", required=True)
    p.add_argument("--w1")
    p.add_argument("--w2")
    p.add_argument("--mode", choices=econ.MODES)
    p.add_argument("--out")
    p.set_defaults(func=cmd_liba)

    p = sub.add_parser("polc", help="split a block reward by lock-up power")
    p.add_argument("--input", required=True)
    p.add_argument("--reward", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_polc)

    p = sub.add_parser("sgn-assign", help="assign guardian stakes to state requests")
    p.add_argument("--requests", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--timeout", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sgn_assign)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError, TopologyError, TrafficError, OracleError, econ.EconError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleDecision, AuditError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
