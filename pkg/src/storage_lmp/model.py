"""Grid, load and user types, case-file ingestion and validation.

Cost coefficients follow ``C(g) = 0.5*a*g**2 + b*g + c``. A literal such as
``0.05 g^2 + 5 g + 100`` is therefore stored as ``a=0.1, b=5, c=100``.
"""
from __future__ import annotations

import csv
import io
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class CaseError(ValueError):
    """Raised for malformed or invalid case and user files."""


class MultipleCosts(CaseError):
    pass


class ZeroLoad(ValueError):
    pass


@dataclass(frozen=True)
class QuadraticCost:
    a: float
    b: float = 0.0
    c: float = 0.0

    def __post_init__(self):
        if not self.a > 0:
            raise CaseError(f"cost curvature must be positive, got a={self.a}")

    def __call__(self, g):
        return 0.5 * self.a * np.square(g) + self.b * g + self.c

    def marginal(self, g):
        return self.a * np.asarray(g, dtype=float) + self.b


@dataclass(frozen=True)
class Bus:
    id: int
    cost: QuadraticCost | None = None
    # soft alternative to the hard g == 0 row for pure-load buses
    penalty: QuadraticCost | None = None

    @property
    def has_generator(self) -> bool:
        return self.cost is not None


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    susceptance: float
    fmax: float


@dataclass(frozen=True)
class NetworkInstance:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    demand: np.ndarray = field(repr=False)
    name: str = ""

    def __post_init__(self):
        d = np.array(self.demand, dtype=float, ndmin=2)
        d.setflags(write=False)
        object.__setattr__(self, "demand", d)
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))

    @property
    def horizon(self) -> int:
        return self.demand.shape[1]

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    def bus_index(self, bus_id: int) -> int:
        for k, bus in enumerate(self.buses):
            if bus.id == bus_id:
                return k
        raise KeyError(f"no bus with id {bus_id}")

    @property
    def generator_mask(self) -> np.ndarray:
        return np.array([b.has_generator for b in self.buses])

    def cost_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-bus (a, b, c); NaN at pure-load buses."""
        a = np.full(self.n_bus, np.nan)
        b = np.full(self.n_bus, np.nan)
        c = np.full(self.n_bus, np.nan)
        for k, bus in enumerate(self.buses):
            cost = bus.cost or bus.penalty
            if cost is not None:
                a[k], b[k], c[k] = cost.a, cost.b, cost.c
        return a, b, c

    def with_demand(self, demand) -> "NetworkInstance":
        return NetworkInstance(self.buses, self.lines, np.asarray(demand, float), self.name)


@dataclass(frozen=True)
class PoolInstance:
    cost: QuadraticCost
    demand: np.ndarray = field(repr=False)
    name: str = ""

    def __post_init__(self):
        d = np.array(self.demand, dtype=float).ravel()
        if np.any(d < 0):
            raise CaseError("pool demand must be non-negative")
        d.setflags(write=False)
        object.__setattr__(self, "demand", d)

    @property
    def horizon(self) -> int:
        return self.demand.size

    def with_demand(self, demand) -> "PoolInstance":
        return PoolInstance(self.cost, np.asarray(demand, float), self.name)


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    bus_id: int
    load: np.ndarray = field(repr=False)

    def __post_init__(self):
        l = np.array(self.load, dtype=float).ravel()
        if np.any(l < 0):
            raise CaseError(f"user {self.user_id}: load must be non-negative")
        l.setflags(write=False)
        object.__setattr__(self, "load", l)

    @property
    def l1(self) -> float:
        return float(np.sum(self.load))


def validate_network(instance: NetworkInstance) -> list[str]:
    """Return a list of human-readable violations; empty means valid."""
    problems = []
    ids = [b.id for b in instance.buses]
    n = len(ids)
    if n == 0:
        return ["no buses"]
    if sorted(ids) != list(range(1, n + 1)):
        problems.append(f"bus ids must be unique and contiguous 1..{n}, got {ids}")
    d = instance.demand
    if d.shape[0] != n:
        problems.append(f"dimension mismatch: demand has {d.shape[0]} rows for {n} buses")
    if d.shape[1] < 1:
        problems.append("dimension mismatch: horizon must be at least 1")
    if np.any(d < 0):
        problems.append("demand must be non-negative")
    if not np.all(np.isfinite(d)):
        problems.append("demand must be finite")
    seen = set()
    idset = set(ids)
    for k, line in enumerate(instance.lines):
        key = frozenset((line.from_bus, line.to_bus))
        if line.from_bus == line.to_bus:
            problems.append(f"line {k}: from == to ({line.from_bus})")
        elif key in seen:
            problems.append(f"line {k}: duplicate line {line.from_bus}-{line.to_bus}")
        seen.add(key)
        if line.from_bus not in idset or line.to_bus not in idset:
            problems.append(f"line {k}: unknown bus in {line.from_bus}-{line.to_bus}")
        if not line.fmax > 0:
            problems.append(f"line {k}: non-positive fmax {line.fmax}")
        if not line.susceptance > 0:
            problems.append(f"line {k}: non-positive susceptance {line.susceptance}")
    if not any(b.has_generator or b.penalty is not None for b in instance.buses):
        problems.append("no generator bus")
    # connectivity by BFS over known buses
    adj = {i: [] for i in ids}
    for line in instance.lines:
        if line.from_bus in adj and line.to_bus in adj:
            adj[line.from_bus].append(line.to_bus)
            adj[line.to_bus].append(line.from_bus)
    start = ids[0]
    reached = {start}
    queue = deque([start])
    while queue:
        for nxt in adj[queue.popleft()]:
            if nxt not in reached:
                reached.add(nxt)
                queue.append(nxt)
    if len(reached) != len(set(ids)):
        missing = sorted(set(ids) - reached)
        problems.append(f"disconnected: buses {missing} unreachable from bus {start}")
    return problems


def check_network(instance: NetworkInstance) -> None:
    problems = validate_network(instance)
    if problems:
        raise CaseError("; ".join(problems))


def pool_of(instance: NetworkInstance) -> PoolInstance:
    """Collapse a network to the pool model: sum demand, keep the single cost."""
    check_network(instance)
    costs = [b.cost for b in instance.buses if b.cost is not None]
    if len(costs) != 1:
        raise MultipleCosts(f"pool model needs exactly one generator bus, found {len(costs)}")
    return PoolInstance(costs[0], instance.demand.sum(axis=0), instance.name)


# ---------------------------------------------------------------------------
# case files


def _cost_from_json(obj) -> QuadraticCost | None:
    if obj is None:
        return None
    return QuadraticCost(float(obj["a"]), float(obj.get("b", 0.0)), float(obj.get("c", 0.0)))


def _cost_to_json(cost: QuadraticCost) -> dict:
    return {"a": cost.a, "b": cost.b, "c": cost.c}


def case_from_dict(data: dict) -> NetworkInstance | PoolInstance:
    """Build an instance from the JSON case schema.

    A case with ``"model": "pool"`` (or a single bus and no lines, flagged as
    pool) becomes a :class:`PoolInstance`; everything else is a network.
    """
    try:
        demand = np.array(data["demand"], dtype=float)
        horizon = data.get("horizon")
        if data.get("model") == "pool":
            cost = _cost_from_json(data["cost"])
            if demand.ndim == 2:
                demand = demand.sum(axis=0)
            if horizon is not None and demand.size != int(horizon):
                raise CaseError(f"horizon {horizon} does not match demand length {demand.size}")
            return PoolInstance(cost, demand, data.get("name", ""))
        buses = tuple(
            Bus(int(b["id"]), _cost_from_json(b.get("cost")), _cost_from_json(b.get("penalty")))
            for b in data["buses"]
        )
        lines = tuple(
            Line(int(l["from"]), int(l["to"]), float(l["susceptance"]), float(l["fmax"]))
            for l in data.get("lines", [])
        )
    except (KeyError, TypeError) as exc:
        raise CaseError(f"malformed case: missing or bad field {exc}") from exc
    if demand.ndim == 1:
        demand = demand[None, :]
    if horizon is not None and demand.shape[1] != int(horizon):
        raise CaseError(f"horizon {horizon} does not match demand width {demand.shape[1]}")
    return NetworkInstance(buses, lines, demand, data.get("name", ""))


def case_to_dict(instance: NetworkInstance | PoolInstance) -> dict:
    if isinstance(instance, PoolInstance):
        return {
            "name": instance.name,
            "model": "pool",
            "cost": _cost_to_json(instance.cost),
            "demand": instance.demand.tolist(),
            "horizon": instance.horizon,
        }
    buses = []
    for b in instance.buses:
        entry = {"id": b.id}
        if b.cost is not None:
            entry["cost"] = _cost_to_json(b.cost)
        if b.penalty is not None:
            entry["penalty"] = _cost_to_json(b.penalty)
        buses.append(entry)
    return {
        "name": instance.name,
        "buses": buses,
        "lines": [
            {"from": l.from_bus, "to": l.to_bus, "susceptance": l.susceptance, "fmax": l.fmax}
            for l in instance.lines
        ],
        "demand": instance.demand.tolist(),
        "horizon": instance.horizon,
    }


def dumps_case(instance) -> str:
    """Canonical JSON text for a case (sorted keys, fixed indentation)."""
    return json.dumps(case_to_dict(instance), indent=1, sort_keys=True) + "\n"


def loads_case(text: str):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return case_from_dict(data)


def load_case(path) -> NetworkInstance | PoolInstance:
    path = Path(path)
    if not path.exists():
        name = path.name if path.suffix else path.name + ".json"
        bundled = Path(__file__).parent / "cases" / name
        if bundled.exists():
            path = bundled
        else:
            raise CaseError(f"case file not found: {path}")
    return loads_case(path.read_text())


def bundled_case(name: str):
    if not name.endswith(".json"):
        name += ".json"
    return load_case(Path(__file__).parent / "cases" / name)


# ---------------------------------------------------------------------------
# users CSV: user_id,bus_id,t1,...,tT


def read_users(source) -> list[UserProfile]:
    """Parse a users CSV given as a path or as the CSV text itself."""
    looks_like_path = isinstance(source, Path) or (
        isinstance(source, str) and source and "\n" not in source and "," not in source)
    if looks_like_path:
        if not Path(source).is_file():
            raise CaseError(f"users file not found: {source}")
        text = Path(source).read_text()
    else:
        text = source
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CaseError("users file is empty") from None
    if header[:2] != ["user_id", "bus_id"] or len(header) < 3:
        raise CaseError(f"users header must start with user_id,bus_id,t1..., got {header[:3]}")
    users = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise CaseError(f"users line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            users.append(UserProfile(row[0], int(row[1]), [float(v) for v in row[2:]]))
        except ValueError as exc:
            raise CaseError(f"users line {lineno}: {exc}") from exc
    return users


def write_users(users: Sequence[UserProfile]) -> str:
    horizon = len(users[0].load) if users else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["user_id", "bus_id"] + [f"t{k + 1}" for k in range(horizon)])
    for u in users:
        w.writerow([u.user_id, u.bus_id] + [repr(float(v)) for v in u.load])
    return buf.getvalue()
