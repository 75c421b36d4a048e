"""JSON run configuration: parsing, validation and line-referenced errors."""

from __future__ import annotations

import json
import re
from collections.abc import Mapping
from pathlib import Path

from celerlab.engine import ROUTERS, ConfigError, SimConfig
from celerlab.netmodel import TopologyError, generate_random_topology, load_topology, parse_topology
from celerlab.traffic import (
    FailureSchedule,
    TrafficError,
    generate_random_flows,
    load_failures,
    load_flows,
    parse_failures,
    parse_flows,
)

RUN_KEYS = {
    "topology",
    "flows",
    "failures",
    "router",
    "beta",
    "backlog_cap",
    "landmarks",
    "slots",
    "seed",
    "arrivals",
    "mean_size",
    "max_retries",
}
TOPOLOGY_GENERATE_KEYS = {"seed", "nodes", "channels", "deposit_min", "deposit_max"}
FLOWS_GENERATE_KEYS = {"seed", "count", "rate"}


class _Located:
    """Maps config keys back to source lines for error messages."""

    def __init__(self, text: str, origin: str):
        self.text = text
        self.origin = origin

    def line_of(self, key: str) -> int:
        m = re.search(r'"' + re.escape(key) + r'"\s*:', self.text)
        return self.text.count("\n", 0, m.start()) + 1 if m else 1

    def error(self, key: str, message: str) -> ConfigError:
        return ConfigError(f"{self.origin}:{self.line_of(key)}: {message}")


def _pick_source(loc: _Located, key: str, source, allowed: tuple[str, ...]) -> tuple[str, object]:
    if not isinstance(source, Mapping) or len(source) != 1 or next(iter(source)) not in allowed:
        raise loc.error(key, f'"{key}" must be an object with exactly one of {", ".join(allowed)}')
    kind = next(iter(source))
    return kind, source[kind]


def _exact_keys(loc: _Located, key: str, doc, allowed: set[str]) -> None:
    if not isinstance(doc, Mapping):
        raise loc.error(key, f'"{key}" must be an object')
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise loc.error(unknown[0], f"unknown key {unknown[0]!r} in {key!r}")
    missing = sorted(allowed - set(doc))
    if missing:
        raise loc.error(key, f"{key!r} is missing {', '.join(missing)}")


def _number(loc: _Located, key: str, value, kind=float, minimum=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or (kind is int and not isinstance(value, int)):
        raise loc.error(key, f"{key!r} must be {'an integer' if kind is int else 'a number'}")
    if minimum is not None and value < minimum:
        raise loc.error(key, f"{key!r} must be >= {minimum}")
    return kind(value)


def parse_config(text: str, origin: str = "<config>", base_dir: Path | None = None, overrides: Mapping | None = None) -> SimConfig:
    """Build a validated ``SimConfig`` from JSON text. ``overrides`` beat file values."""
    loc = _Located(text, origin)
    base_dir = base_dir or Path(".")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{origin}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{origin}:1: config must be a JSON object")
    unknown = sorted(set(doc) - RUN_KEYS)
    if unknown:
        raise loc.error(unknown[0], f"unknown key {unknown[0]!r}")
    for required in ("topology", "flows"):
        if required not in doc:
            raise ConfigError(f"{origin}:1: missing required key {required!r}")

    try:
        kind, value = _pick_source(loc, "topology", doc["topology"], ("file", "generate", "inline"))
        if kind == "file":
            path = base_dir / str(value)
            if not path.is_file():
                raise loc.error("file", f"topology file not found: {path}")
            topology = load_topology(path)
        elif kind == "generate":
            _exact_keys(loc, "generate", value, TOPOLOGY_GENERATE_KEYS)
            topology = generate_random_topology(
                _number(loc, "seed", value["seed"], int, 0),
                _number(loc, "nodes", value["nodes"], int, 2),
                _number(loc, "channels", value["channels"], int, 1),
                (_number(loc, "deposit_min", value["deposit_min"]), _number(loc, "deposit_max", value["deposit_max"])),
            )
        else:
            topology = parse_topology(value)
    except (TopologyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise loc.error("topology", f"bad topology: {exc}") from exc
    except OSError as exc:
        raise loc.error("topology", f"cannot read topology: {exc}") from exc

    try:
        kind, value = _pick_source(loc, "flows", doc["flows"], ("file", "generate", "inline"))
        if kind == "file":
            path = base_dir / str(value)
            if not path.is_file():
                raise loc.error("flows", f"flow file not found: {path}")
            flows = load_flows(path)
        elif kind == "generate":
            _exact_keys(loc, "generate", value, FLOWS_GENERATE_KEYS)
            flows = generate_random_flows(
                _number(loc, "seed", value["seed"], int, 0),
                topology.node_count,
                _number(loc, "count", value["count"], int, 0),
                _number(loc, "rate", value["rate"], float, 0),
            )
        else:
            flows = parse_flows(value)
    except (TrafficError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise loc.error("flows", f"bad flows: {exc}") from exc
    except OSError as exc:
        raise loc.error("flows", f"cannot read flows: {exc}") from exc

    failures: FailureSchedule | None = None
    if doc.get("failures") is not None:
        try:
            kind, value = _pick_source(loc, "failures", doc["failures"], ("file", "inline"))
            failures = load_failures(base_dir / str(value)) if kind == "file" else parse_failures(value)
        except (TrafficError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise loc.error("failures", f"bad failure schedule: {exc}") from exc
        except OSError as exc:
            raise loc.error("failures", f"cannot read failures: {exc}") from exc

    fields: dict = {}
    if "router" in doc:
        if doc["router"] not in ROUTERS:
            raise loc.error("router", f"unknown router {doc['router']!r}; choose from {', '.join(ROUTERS)}")
        fields["router"] = doc["router"]
    if "beta" in doc:
        fields["beta"] = _number(loc, "beta", doc["beta"])
    if "backlog_cap" in doc:
        if not isinstance(doc["backlog_cap"], bool):
            raise loc.error("backlog_cap", '"backlog_cap" must be true or false')
        fields["backlog_cap"] = doc["backlog_cap"]
    for key, minimum in (("landmarks", 1), ("slots", 1), ("seed", 0), ("max_retries", 0)):
        if key in doc:
            fields[key] = _number(loc, key, doc[key], int, minimum)
    if "arrivals" in doc:
        if doc["arrivals"] not in ("poisson", "deterministic"):
            raise loc.error("arrivals", '"arrivals" must be "poisson" or "deterministic"')
        fields["arrivals"] = doc["arrivals"]
    if "mean_size" in doc:
        fields["mean_size"] = _number(loc, "mean_size", doc["mean_size"])
    for key, value in (overrides or {}).items():
        if value is not None:
            fields[key] = value

    config = SimConfig(topology=topology, flows=flows, failures=failures, **fields)
    try:
        config.validate()
    except ConfigError as exc:
        key = next((k for k in ("router", "beta", "slots", "arrivals", "max_retries", "mean_size", "flows") if k in str(exc)), "flows")
        raise loc.error(key, str(exc)) from exc
    if config.router == "landmark" and config.landmarks > topology.node_count:
        raise loc.error("landmarks", f"landmarks must be <= node count {topology.node_count}")
    return config


def load_config(path: str | Path, overrides: Mapping | None = None) -> SimConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}:1: cannot read config: {exc.strerror or exc}") from exc
    return parse_config(text, str(path), path.parent, overrides)
