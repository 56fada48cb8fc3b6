"""Integrated transmission-distribution (ITD) case model.

A case is one network partitioned into a master (transmission), a boundary
(substation interface) and a slave (distribution) subsystem.  Cases are
immutable; every modifier returns a new case.

All quantities are per-unit on the master MVA base once a case is loaded.
Angles are radians internally and degrees in case files.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

import numpy as np


class Subsystem(str, Enum):
    MASTER = "master"
    BOUNDARY = "boundary"
    SLAVE = "slave"


class BusKind(str, Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


class Owner(str, Enum):
    TSO = "tso"
    DSO = "dso"


class CaseError(ValueError):
    """Base class for case parsing and validation failures."""


class CaseParseError(CaseError):
    pass


class CaseValidationError(CaseError):
    def __init__(self, violations: list["Violation"]):
        self.violations = list(violations)
        super().__init__("; ".join(v.message for v in self.violations))


class IslandingError(CaseValidationError):
    pass


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    branch: int | None = None
    buses: tuple[int, ...] = ()


@dataclass(frozen=True)
class Bus:
    id: int
    subsystem: Subsystem
    kind: BusKind = BusKind.PQ
    v_mag: float = 1.0
    v_ang: float = 0.0
    p_load: float = 0.0
    q_load: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    # only meaningful on boundary buses
    shunt_owner: Owner = Owner.TSO


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    in_service: bool = True
    flow_limit: float | None = None


@dataclass(frozen=True)
class Generator:
    bus: int
    p: float = 0.0
    q: float = 0.0
    p_min: float = 0.0
    p_max: float = 0.0
    q_min: float = -math.inf
    q_max: float = math.inf
    cost_c2: float = 0.0
    cost_c1: float = 0.0
    cost_c0: float = 0.0
    owner: Owner | None = None

    def cost(self, p: float) -> float:
        return self.cost_c2 * p * p + self.cost_c1 * p + self.cost_c0


@dataclass(frozen=True)
class Measurement:
    """Linear (DC) measurement: bus angle, branch flow or bus injection."""

    id: int
    kind: str  # "angle" | "flow" | "injection"
    value: float
    sigma: float
    bus: int | None = None
    branch: int | None = None


@dataclass(frozen=True)
class ItdCase:
    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...] = ()
    boundary_ids: tuple[int, ...] = ()
    dso_assignment: dict[int, int] = field(default_factory=dict)
    contingencies: tuple[int, ...] = ()
    measurements: tuple[Measurement, ...] = ()
    load_direction: dict[int, float] = field(default_factory=dict)
    voltage_limits: tuple[float, float] = (0.95, 1.05)
    # per-DSO MVA bases as written in the file; informational after load
    base_mva_slave: dict[int, float] = field(default_factory=dict)

    __hash__ = None  # type: ignore[assignment]

    # -- lookups -----------------------------------------------------------
    @cached_property
    def _bus_map(self) -> dict[int, Bus]:
        return {b.id: b for b in self.buses}

    @cached_property
    def _branch_map(self) -> dict[int, Branch]:
        return {br.id: br for br in self.branches}

    def bus(self, bus_id: int) -> Bus:
        return self._bus_map[bus_id]

    def has_bus(self, bus_id: int) -> bool:
        return bus_id in self._bus_map

    def branch(self, branch_id: int) -> Branch:
        return self._branch_map[branch_id]

    def _ids(self, sub: Subsystem) -> tuple[int, ...]:
        return tuple(sorted(b.id for b in self.buses if b.subsystem is sub))

    @cached_property
    def master_ids(self) -> tuple[int, ...]:
        return self._ids(Subsystem.MASTER)

    @cached_property
    def boundary(self) -> tuple[int, ...]:
        return self._ids(Subsystem.BOUNDARY)

    @cached_property
    def slave_ids(self) -> tuple[int, ...]:
        return self._ids(Subsystem.SLAVE)

    @cached_property
    def bus_order(self) -> tuple[int, ...]:
        """Master, then boundary, then slave ids; ascending within each."""
        return self.master_ids + self.boundary + self.slave_ids

    @property
    def active_branches(self) -> list[Branch]:
        return [br for br in self.branches if br.in_service]

    @cached_property
    def slack_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses if b.kind is BusKind.SLACK)

    def gens_at(self, bus_id: int) -> list[Generator]:
        return [g for g in self.generators if g.bus == bus_id]

    @property
    def dsos(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.dso_assignment.values())))

    def dso_boundary(self, dso: int) -> tuple[int, ...]:
        return tuple(b for b in self.boundary if self.dso_assignment.get(b) == dso)

    def dso_slave_ids(self, dso: int) -> tuple[int, ...]:
        comps = slave_components(self)
        out: list[int] = []
        for comp, attached in comps:
            dsos = {self.dso_assignment.get(b) for b in attached}
            if dsos == {dso}:
                out.extend(comp)
        return tuple(sorted(out))

    def dso_of_slave(self, bus_id: int) -> int | None:
        for comp, attached in slave_components(self):
            if bus_id in comp:
                dsos = {self.dso_assignment.get(b) for b in attached}
                return dsos.pop() if len(dsos) == 1 else None
        return None

    def branch_side(self, br: Branch) -> Subsystem:
        """Slave if either end is a slave bus, otherwise master."""
        subs = {self.bus(br.from_bus).subsystem, self.bus(br.to_bus).subsystem}
        return Subsystem.SLAVE if Subsystem.SLAVE in subs else Subsystem.MASTER

    def generator_side(self, g: Generator) -> Subsystem:
        sub = self.bus(g.bus).subsystem
        if sub is Subsystem.BOUNDARY:
            return Subsystem.SLAVE if g.owner is Owner.DSO else Subsystem.MASTER
        return sub


# -- graph helpers -----------------------------------------------------------

def _adjacency(case: ItdCase, branches: Iterable[Branch] | None = None) -> dict[int, set[int]]:
    adj: dict[int, set[int]] = defaultdict(set)
    for b in case.buses:
        adj[b.id]
    for br in case.active_branches if branches is None else branches:
        adj[br.from_bus].add(br.to_bus)
        adj[br.to_bus].add(br.from_bus)
    return adj


def _components(nodes: Iterable[int], adj: dict[int, set[int]]) -> list[list[int]]:
    nodes = set(nodes)
    seen: set[int] = set()
    comps = []
    for start in sorted(nodes):
        if start in seen:
            continue
        stack, comp = [start], []
        seen.add(start)
        while stack:
            n = stack.pop()
            comp.append(n)
            for m in adj[n]:
                if m in nodes and m not in seen:
                    seen.add(m)
                    stack.append(m)
        comps.append(sorted(comp))
    return comps


def slave_components(case: ItdCase) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Connected slave components and the boundary buses each touches."""
    adj = _adjacency(case)
    slaves = set(case.slave_ids)
    boundary = set(case.boundary)
    out = []
    for comp in _components(slaves, adj):
        attached = sorted({m for n in comp for m in adj[n] if m in boundary})
        out.append((tuple(comp), tuple(attached)))
    return out


# -- validation ----------------------------------------------------------------

def validate_partition(case: ItdCase) -> list[Violation]:
    """Report master-slave branches and badly attached slave components.

    An empty list means the partition is valid.
    """
    report: list[Violation] = []
    for br in case.active_branches:
        if not (case.has_bus(br.from_bus) and case.has_bus(br.to_bus)):
            continue
        subs = {case.bus(br.from_bus).subsystem, case.bus(br.to_bus).subsystem}
        if subs == {Subsystem.MASTER, Subsystem.SLAVE}:
            report.append(Violation(
                "fact2",
                f"Fact 2 violated: branch {br.id} connects master and slave buses "
                f"{br.from_bus}-{br.to_bus} without passing through the boundary",
                branch=br.id, buses=(br.from_bus, br.to_bus)))
    for comp, attached in slave_components(case):
        dsos = sorted({case.dso_assignment[b] for b in attached if b in case.dso_assignment})
        if len(dsos) != 1:
            report.append(Violation(
                "attachment",
                f"slave component {list(comp)} attaches to {len(dsos)} DSOs "
                f"{dsos} via boundary buses {list(attached)}",
                buses=comp))
    return report


def _connectivity(case: ItdCase) -> list[Violation]:
    adj = _adjacency(case)
    out = []
    for comp in _components([b.id for b in case.buses], adj):
        slacks = [i for i in comp if case.bus(i).kind is BusKind.SLACK]
        if not slacks:
            out.append(Violation("island", f"buses {comp} are islanded from every slack bus",
                                 buses=tuple(comp)))
        elif len(slacks) > 1:
            out.append(Violation("slack", f"island {comp} has {len(slacks)} slack buses {slacks}",
                                 buses=tuple(comp)))
    return out


def check_case(case: ItdCase) -> list[Violation]:
    """Every structural invariant; empty list means the case is usable."""
    v: list[Violation] = []
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        v.append(Violation("duplicate", "duplicate bus ids"))
    if not case.slack_ids:
        v.append(Violation("slack", "no slack bus"))
        return v
    for s in case.slack_ids:
        if case.bus(s).subsystem is not Subsystem.MASTER:
            v.append(Violation("slack", f"slack bus {s} is not in the master subsystem"))
    for b in case.buses:
        if b.kind in (BusKind.SLACK, BusKind.PV) and not b.v_mag > 0:
            v.append(Violation("voltage", f"bus {b.id} needs a positive voltage setpoint"))
        if b.subsystem is Subsystem.BOUNDARY and b.kind is not BusKind.PQ:
            v.append(Violation("boundary", f"boundary bus {b.id} must be PQ"))
    if tuple(sorted(case.boundary_ids)) != case.boundary:
        v.append(Violation("boundary", "boundary list does not match buses tagged boundary"))
    for b in case.boundary:
        if b not in case.dso_assignment:
            v.append(Violation("boundary", f"boundary bus {b} has no DSO assignment"))
    br_ids = [br.id for br in case.branches]
    if len(set(br_ids)) != len(br_ids):
        v.append(Violation("duplicate", "duplicate branch ids"))
    for br in case.branches:
        if not (case.has_bus(br.from_bus) and case.has_bus(br.to_bus)):
            v.append(Violation("branch", f"branch {br.id} references an unknown bus", branch=br.id))
            continue
        if br.from_bus == br.to_bus:
            v.append(Violation("branch", f"branch {br.id} is a self loop", branch=br.id))
        if br.x == 0:
            v.append(Violation("branch", f"branch {br.id} has zero reactance", branch=br.id))
        if not br.tap > 0:
            v.append(Violation("branch", f"branch {br.id} has a nonpositive tap", branch=br.id))
    for g in case.generators:
        if not case.has_bus(g.bus):
            v.append(Violation("generator", f"generator at unknown bus {g.bus}"))
            continue
        if g.p_min > g.p_max or g.q_min > g.q_max:
            v.append(Violation("generator", f"generator at bus {g.bus} has inverted limits"))
        if g.cost_c2 < 0:
            v.append(Violation("generator", f"generator at bus {g.bus} has a concave cost"))
        if case.bus(g.bus).subsystem is Subsystem.BOUNDARY and g.owner is None:
            v.append(Violation(
                "fact1", f"Fact 1: generator at boundary bus {g.bus} needs an owner (tso or dso)"))
    for m in case.measurements:
        if m.sigma <= 0:
            v.append(Violation("measurement", f"measurement {m.id} has nonpositive sigma"))
    if v:
        return v
    v.extend(validate_partition(case))
    v.extend(_connectivity(case))
    return v


def validate(case: ItdCase) -> ItdCase:
    problems = check_case(case)
    if problems:
        if all(p.kind == "island" for p in problems):
            raise IslandingError(problems)
        raise CaseValidationError(problems)
    return case


# -- parsing -------------------------------------------------------------------

def _enum(cls, value, where):
    try:
        return cls(str(value).lower())
    except ValueError:
        raise CaseParseError(f"{where}: unknown value {value!r}") from None


def _bus_from(d: dict[str, Any]) -> Bus:
    return Bus(
        id=int(d["id"]),
        subsystem=_enum(Subsystem, d["subsystem"], f"bus {d['id']}"),
        kind=_enum(BusKind, d.get("kind", "pq"), f"bus {d['id']}"),
        v_mag=float(d.get("v_mag", 1.0)),
        v_ang=math.radians(float(d.get("v_ang", 0.0))),
        p_load=float(d.get("p_load", 0.0)),
        q_load=float(d.get("q_load", 0.0)),
        shunt_g=float(d.get("shunt_g", 0.0)),
        shunt_b=float(d.get("shunt_b", 0.0)),
        shunt_owner=_enum(Owner, d.get("shunt_owner", "tso"), f"bus {d['id']}"),
    )


def _branch_from(d: dict[str, Any], idx: int) -> Branch:
    lim = d.get("flow_limit")
    return Branch(
        id=int(d.get("id", idx + 1)),
        from_bus=int(d["from"]),
        to_bus=int(d["to"]),
        r=float(d.get("r", 0.0)),
        x=float(d["x"]),
        b_charging=float(d.get("b_charging", 0.0)),
        tap=float(d.get("tap", 1.0)) or 1.0,
        in_service=bool(d.get("status", 1)),
        flow_limit=None if lim is None else float(lim),
    )


def _gen_from(d: dict[str, Any]) -> Generator:
    def f(key, default):
        v = d.get(key, default)
        return default if v is None else float(v)

    owner = d.get("owner")
    return Generator(
        bus=int(d["bus"]), p=f("p", 0.0), q=f("q", 0.0),
        p_min=f("p_min", 0.0), p_max=f("p_max", f("p", 0.0)),
        q_min=f("q_min", -math.inf), q_max=f("q_max", math.inf),
        cost_c2=f("cost_c2", 0.0), cost_c1=f("cost_c1", 0.0), cost_c0=f("cost_c0", 0.0),
        owner=None if owner is None else _enum(Owner, owner, f"generator at {d['bus']}"),
    )


def _meas_from(d: dict[str, Any], idx: int) -> Measurement:
    kind = str(d["kind"]).lower()
    if kind not in ("angle", "flow", "injection"):
        raise CaseParseError(f"measurement {idx}: unknown kind {kind!r}")
    value = float(d["value"])
    sigma = float(d["sigma"])
    if kind == "angle":
        value, sigma = math.radians(value), math.radians(sigma)
    return Measurement(id=int(d.get("id", idx + 1)), kind=kind, value=value, sigma=sigma,
                       bus=None if d.get("bus") is None else int(d["bus"]),
                       branch=None if d.get("branch") is None else int(d["branch"]))


def case_from_dict(data: dict[str, Any], name: str = "case") -> ItdCase:
    """Build and validate a case from its decoded file representation."""
    try:
        base = float(data.get("base_mva", 100.0))
        buses = tuple(_bus_from(b) for b in data.get("buses", []))
        branches = tuple(_branch_from(b, i) for i, b in enumerate(data.get("branches", [])))
        gens = tuple(_gen_from(g) for g in data.get("generators", []))
        boundary = tuple(int(b) for b in data.get("boundary", []))
        assignment = {int(k): int(v) for k, v in data.get("dso_assignment", {}).items()}
        dso_base = {int(k): float(v) for k, v in data.get("dso_base_mva", {}).items()}
        meas = tuple(_meas_from(m, i) for i, m in enumerate(data.get("measurements", [])))
        direction = {int(k): float(v) for k, v in data.get("load_direction", {}).items()}
        vlim = tuple(float(v) for v in data.get("voltage_limits", (0.95, 1.05)))
        conts = tuple(int(c) for c in data.get("contingencies", []))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CaseError):
            raise
        raise CaseParseError(f"malformed case: {exc!r}") from exc
    if base <= 0:
        raise CaseParseError("base_mva must be positive")
    case = ItdCase(
        name=str(data.get("name", name)), base_mva=base, buses=buses, branches=branches,
        generators=gens, boundary_ids=boundary, dso_assignment=assignment,
        contingencies=conts, measurements=meas, load_direction=direction,
        voltage_limits=(vlim[0], vlim[1]), base_mva_slave=dso_base,
    )
    validate(case)
    return _reconcile_slave_bases(case)


def load_case(path: str | Path) -> ItdCase:
    """Parse and validate a case file (JSON text, see docs/case-format.md)."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise CaseParseError(f"{path}: top level must be an object")
    return case_from_dict(data, name=path.stem)


def bundled_case_path(name: str) -> Path:
    if not name.endswith(".json"):
        name += ".json"
    return Path(str(resources.files("tdcoord") / "cases" / name))


def bundled_case(name: str) -> ItdCase:
    return load_case(bundled_case_path(name))


def bundled_case_names() -> list[str]:
    return sorted(p.stem for p in Path(str(resources.files("tdcoord") / "cases")).glob("*.json"))


def case_to_dict(case: ItdCase) -> dict[str, Any]:
    """Inverse of case_from_dict for an already reconciled case."""
    def num(v):
        return None if v is None or (isinstance(v, float) and math.isinf(v)) else v

    out: dict[str, Any] = {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [{
            "id": b.id, "subsystem": b.subsystem.value, "kind": b.kind.value,
            "v_mag": b.v_mag, "v_ang": math.degrees(b.v_ang), "p_load": b.p_load,
            "q_load": b.q_load, "shunt_g": b.shunt_g, "shunt_b": b.shunt_b,
            "shunt_owner": b.shunt_owner.value} for b in case.buses],
        "branches": [{
            "id": br.id, "from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x,
            "b_charging": br.b_charging, "tap": br.tap, "status": int(br.in_service),
            "flow_limit": br.flow_limit} for br in case.branches],
        "generators": [{
            "bus": g.bus, "p": g.p, "q": g.q, "p_min": g.p_min, "p_max": g.p_max,
            "q_min": num(g.q_min), "q_max": num(g.q_max), "cost_c2": g.cost_c2,
            "cost_c1": g.cost_c1, "cost_c0": g.cost_c0,
            "owner": None if g.owner is None else g.owner.value} for g in case.generators],
        "boundary": list(case.boundary_ids),
        "dso_assignment": {str(k): v for k, v in case.dso_assignment.items()},
        "contingencies": list(case.contingencies),
        "measurements": [{
            "id": m.id, "kind": m.kind, "bus": m.bus, "branch": m.branch,
            "value": math.degrees(m.value) if m.kind == "angle" else m.value,
            "sigma": math.degrees(m.sigma) if m.kind == "angle" else m.sigma}
            for m in case.measurements],
        "load_direction": {str(k): v for k, v in case.load_direction.items()},
        "voltage_limits": list(case.voltage_limits),
    }
    return out


# -- per-unit handling -------------------------------------------------------------

def _scale_bus(b: Bus, k: float) -> Bus:
    return replace(b, p_load=b.p_load * k, q_load=b.q_load * k,
                   shunt_g=b.shunt_g * k, shunt_b=b.shunt_b * k)


def _scale_branch(br: Branch, k: float) -> Branch:
    return replace(br, r=br.r / k, x=br.x / k, b_charging=br.b_charging * k,
                   flow_limit=None if br.flow_limit is None else br.flow_limit * k)


def _scale_gen(g: Generator, k: float) -> Generator:
    return replace(g, p=g.p * k, q=g.q * k, p_min=g.p_min * k, p_max=g.p_max * k,
                   q_min=g.q_min * k, q_max=g.q_max * k,
                   cost_c2=g.cost_c2 / (k * k), cost_c1=g.cost_c1 / k)


def _scale_meas(m: Measurement, k: float) -> Measurement:
    if m.kind == "angle":
        return m
    return replace(m, value=m.value * k, sigma=m.sigma * k)


def _reconcile_slave_bases(case: ItdCase) -> ItdCase:
    """Convert each DSO's data from its own MVA base onto the master base."""
    factors = {d: s / case.base_mva for d, s in case.base_mva_slave.items()
               if s != case.base_mva}
    if not factors:
        return case
    owner = {}
    for d in case.dsos:
        for i in case.dso_slave_ids(d):
            owner[i] = d

    def k_of_bus(i):
        return factors.get(owner.get(i), 1.0)

    buses = tuple(_scale_bus(b, k_of_bus(b.id)) if b.id in owner else b for b in case.buses)
    branches = []
    for br in case.branches:
        d = owner.get(br.from_bus, owner.get(br.to_bus))
        branches.append(_scale_branch(br, factors.get(d, 1.0)) if d is not None else br)
    gens = tuple(_scale_gen(g, k_of_bus(g.bus)) if g.bus in owner else g for g in case.generators)
    meas = []
    for m in case.measurements:
        where = m.bus if m.bus is not None else None
        if where is None and m.branch is not None:
            br = case.branch(m.branch)
            where = br.from_bus if br.from_bus in owner else br.to_bus
        meas.append(_scale_meas(m, k_of_bus(where)) if where in owner else m)
    return replace(case, buses=buses, branches=tuple(branches), generators=gens,
                   measurements=tuple(meas))


def rebase(case: ItdCase, target_mva: float) -> ItdCase:
    """Express every per-unit quantity on a new MVA base."""
    if not target_mva > 0:
        raise ValueError("target base must be positive")
    k = case.base_mva / target_mva
    if k == 1.0:
        return case
    return replace(
        case, base_mva=float(target_mva),
        buses=tuple(_scale_bus(b, k) for b in case.buses),
        branches=tuple(_scale_branch(br, k) for br in case.branches),
        generators=tuple(_scale_gen(g, k) for g in case.generators),
        measurements=tuple(_scale_meas(m, k) for m in case.measurements),
    )


# -- contingencies and load scaling ---------------------------------------------------

def apply_contingency(case: ItdCase, branch_id: int) -> ItdCase:
    try:
        br = case.branch(branch_id)
    except KeyError:
        raise KeyError(f"unknown branch {branch_id}") from None
    if not br.in_service:
        raise ValueError(f"branch {branch_id} is already out of service")
    out = replace(case, branches=tuple(replace(b, in_service=False) if b.id == branch_id else b
                                       for b in case.branches))
    problems = check_case(out)
    if problems:
        if any(p.kind == "island" for p in problems) or any(p.kind == "attachment" for p in problems):
            raise IslandingError(problems)
        raise CaseValidationError(problems)
    return out


def scale_loads(case: ItdCase, multiplier: float, direction: dict[int, float] | None = None) -> ItdCase:
    """Loads grow as p0 * (1 + multiplier * d_i) at constant power factor."""
    direction = case.load_direction if direction is None else direction
    if not direction:
        direction = {b.id: 1.0 for b in case.buses}
    buses = []
    for b in case.buses:
        k = 1.0 + multiplier * direction.get(b.id, 0.0)
        buses.append(replace(b, p_load=b.p_load * k, q_load=b.q_load * k))
    return replace(case, buses=tuple(buses))


# -- admittance ------------------------------------------------------------------

@dataclass(frozen=True)
class AdmittanceBlocks:
    master_ids: tuple[int, ...]
    boundary_ids: tuple[int, ...]
    slave_ids: tuple[int, ...]
    Y: np.ndarray
    # slave-side share of Y_BB: slave branch ends at boundary buses plus DSO-owned shunts
    Y_BB_slave: np.ndarray

    __hash__ = None  # type: ignore[assignment]

    @property
    def _m(self):
        return slice(0, len(self.master_ids))

    @property
    def _b(self):
        n = len(self.master_ids)
        return slice(n, n + len(self.boundary_ids))

    @property
    def _s(self):
        n = len(self.master_ids) + len(self.boundary_ids)
        return slice(n, n + len(self.slave_ids))

    @property
    def Y_MM(self):
        return self.Y[self._m, self._m]

    @property
    def Y_MB(self):
        return self.Y[self._m, self._b]

    @property
    def Y_BM(self):
        return self.Y[self._b, self._m]

    @property
    def Y_BB(self):
        return self.Y[self._b, self._b]

    @property
    def Y_BS(self):
        return self.Y[self._b, self._s]

    @property
    def Y_SB(self):
        return self.Y[self._s, self._b]

    @property
    def Y_SS(self):
        return self.Y[self._s, self._s]

    @property
    def Y_MS(self):
        return self.Y[self._m, self._s]


def branch_admittance(br: Branch) -> tuple[complex, complex, complex, complex]:
    """(Y_ff, Y_ft, Y_tf, Y_tt) of a pi-model branch with the tap on the from side."""
    z = complex(br.r, br.x)
    if z == 0:
        raise ValueError(f"branch {br.id} has zero impedance")
    y = 1.0 / z
    half = 0.5j * br.b_charging
    t = br.tap
    return (y + half) / (t * t), -y / t, -y / t, y + half


def assemble_admittance(ids: Iterable[int], branches: Iterable[Branch],
                        shunts: dict[int, complex] | None = None) -> np.ndarray:
    ids = list(ids)
    pos = {b: i for i, b in enumerate(ids)}
    Y = np.zeros((len(ids), len(ids)), dtype=complex)
    for br in branches:
        if not br.in_service:
            continue
        f, t = pos[br.from_bus], pos[br.to_bus]
        yff, yft, ytf, ytt = branch_admittance(br)
        Y[f, f] += yff
        Y[f, t] += yft
        Y[t, f] += ytf
        Y[t, t] += ytt
    for b, y in (shunts or {}).items():
        if b in pos:
            Y[pos[b], pos[b]] += y
    return Y


def bus_shunt(b: Bus) -> complex:
    return complex(b.shunt_g, b.shunt_b)


def build_admittance(case: ItdCase) -> AdmittanceBlocks:
    order = case.bus_order
    shunts = {b.id: bus_shunt(b) for b in case.buses}
    Y = assemble_admittance(order, case.active_branches, shunts)
    slave_branches = [br for br in case.active_branches
                      if case.branch_side(br) is Subsystem.SLAVE]
    boundary = case.boundary
    ybs = np.zeros((len(boundary), len(boundary)), dtype=complex)
    if boundary:
        pos = {b: i for i, b in enumerate(boundary)}
        for br in slave_branches:
            yff, _, _, ytt = branch_admittance(br)
            if br.from_bus in pos:
                ybs[pos[br.from_bus], pos[br.from_bus]] += yff
            if br.to_bus in pos:
                ybs[pos[br.to_bus], pos[br.to_bus]] += ytt
        for b in boundary:
            if case.bus(b).shunt_owner is Owner.DSO:
                ybs[pos[b], pos[b]] += bus_shunt(case.bus(b))
    return AdmittanceBlocks(case.master_ids, case.boundary, case.slave_ids, Y, ybs)


# -- operator views -------------------------------------------------------------------

def tso_view(case: ItdCase) -> ItdCase:
    """What the transmission operator holds: master and boundary data only."""
    keep = set(case.master_ids) | set(case.boundary)
    buses = tuple(b if b.subsystem is not Subsystem.BOUNDARY or b.shunt_owner is Owner.TSO
                  else replace(b, shunt_g=0.0, shunt_b=0.0)
                  for b in case.buses if b.id in keep)
    branches = tuple(br for br in case.branches
                     if br.from_bus in keep and br.to_bus in keep)
    gens = tuple(g for g in case.generators
                 if g.bus in keep and case.generator_side(g) is Subsystem.MASTER)
    # boundary injection meters belong to the TSO even though they see slave branches
    meas = tuple(m for m in case.measurements if _meas_buses(case, m) <= keep
                 or (m.kind == "injection" and m.bus in case.boundary))
    return replace(case, buses=buses, branches=branches, generators=gens, measurements=meas,
                   contingencies=tuple(c for c in case.contingencies
                                       if any(br.id == c for br in branches)),
                   load_direction={k: v for k, v in case.load_direction.items() if k in keep},
                   base_mva_slave={})


def dso_view(case: ItdCase, dso: int) -> ItdCase:
    """What one distribution operator holds: its boundary buses and slave network."""
    bnd = set(case.dso_boundary(dso))
    sl = set(case.dso_slave_ids(dso))
    keep = bnd | sl
    buses = []
    for b in case.buses:
        if b.id in sl:
            buses.append(b)
        elif b.id in bnd:
            # boundary load stays with the TSO; DSO sees only its own shunt share
            own = b.shunt_owner is Owner.DSO
            buses.append(replace(b, p_load=0.0, q_load=0.0,
                                 shunt_g=b.shunt_g if own else 0.0,
                                 shunt_b=b.shunt_b if own else 0.0))
    branches = tuple(br for br in case.branches
                     if (br.from_bus in sl or br.to_bus in sl))
    gens = tuple(g for g in case.generators
                 if g.bus in keep and case.generator_side(g) is Subsystem.SLAVE)
    meas = tuple(m for m in case.measurements
                 if _meas_buses(case, m) <= keep and _meas_buses(case, m) & sl)
    return replace(case, buses=tuple(buses), branches=branches, generators=gens,
                   boundary_ids=tuple(sorted(bnd)),
                   dso_assignment={b: dso for b in bnd}, contingencies=(),
                   measurements=meas,
                   load_direction={k: v for k, v in case.load_direction.items() if k in sl},
                   base_mva_slave={})


def _meas_buses(case: ItdCase, m: Measurement) -> set[int]:
    if m.kind == "flow":
        br = case.branch(m.branch)
        return {br.from_bus, br.to_bus}
    if m.kind == "angle":
        return {m.bus}
    return {m.bus} | {br.to_bus if br.from_bus == m.bus else br.from_bus
                      for br in case.active_branches if m.bus in (br.from_bus, br.to_bus)}
