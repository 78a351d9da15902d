"""Grid case data: parsing, validation, grouping and tie-line virtualization.

Case files are JSON with physical units as published in the usual bus/branch/gen
tables (MW, MVAr, degrees).  :func:`parse_case` converts everything to per-unit on
``base_mva`` and radians, so every record held in memory is per-unit.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

FORMAT_VERSION = "1"

SLACK, PV, PQ = "slack", "PV", "PQ"
_KIND_ALIASES = {
    "slack": SLACK, "ref": SLACK, "3": SLACK,
    "pv": PV, "generator": PV, "gen": PV, "2": PV,
    "pq": PQ, "load": PQ, "1": PQ,
}

# bus classes used by the admittance partition
GEN, TIE, LOAD = "G", "T", "L"


class CaseFormatError(ValueError):
    """Case or grouping file that cannot be turned into a valid model."""


@dataclass(frozen=True)
class BusRecord:
    id: int
    kind: str
    p_demand: float = 0.0
    q_demand: float = 0.0
    g_shunt: float = 0.0
    b_shunt: float = 0.0
    v_mag: float = 1.0
    v_ang: float = 0.0
    base_kv: float = 0.0

    @property
    def has_load(self) -> bool:
        return self.p_demand != 0.0 or self.q_demand != 0.0


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    status: bool = True

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)


@dataclass(frozen=True)
class GenRecord:
    bus: int
    p_gen: float = 0.0
    q_gen: float = 0.0
    q_min: float = -math.inf
    q_max: float = math.inf
    v_set: float = 1.0


@dataclass(frozen=True)
class VvcRecord:
    bus: int
    q_available: float
    q_injected: float = 0.0
    active: bool = True


@dataclass(frozen=True)
class GridCase:
    base_mva: float
    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    gens: tuple[GenRecord, ...] = ()
    vvcs: tuple[VvcRecord, ...] = ()
    name: str = ""

    def bus(self, bus_id: int) -> BusRecord:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def in_service(self) -> list[tuple[int, BranchRecord]]:
        """(branch id, record) pairs for in-service branches; branch id is the table index."""
        return [(k, br) for k, br in enumerate(self.branches) if br.status]

    def gen_buses(self) -> set[int]:
        return {b.id for b in self.buses if b.kind in (SLACK, PV)}

    def with_vvcs(self, vvcs) -> "GridCase":
        return replace(self, vvcs=tuple(vvcs))

    def to_dict(self) -> dict:
        """Inverse of :func:`parse_case` (physical units)."""
        s = self.base_mva
        return {
            "format_version": FORMAT_VERSION,
            "name": self.name,
            "base_mva": s,
            "buses": [dict(id=b.id, kind=b.kind, p_demand=b.p_demand * s, q_demand=b.q_demand * s,
                           g_shunt=b.g_shunt * s, b_shunt=b.b_shunt * s, v_mag=b.v_mag,
                           v_ang=math.degrees(b.v_ang), base_kv=b.base_kv) for b in self.buses],
            "branches": [dict(from_bus=br.from_bus, to_bus=br.to_bus, r=br.r, x=br.x,
                              b_charging=br.b_charging, status=br.status) for br in self.branches],
            "gens": [dict(bus=g.bus, p_gen=g.p_gen * s, q_gen=g.q_gen * s, q_min=g.q_min * s,
                          q_max=g.q_max * s, v_set=g.v_set) for g in self.gens],
            "vvcs": [dict(bus=v.bus, q_available=v.q_available * s, q_injected=v.q_injected * s,
                          active=v.active) for v in self.vvcs],
        }


def case_hash(case: GridCase) -> str:
    """Content hash used as the cache key for topology-derived matrices."""
    blob = json.dumps(case.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# -- parsing ---------------------------------------------------------------

def _load_json(text: str, what: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"{what}: syntax error at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise CaseFormatError(f"{what}: top level must be an object")
    version = str(doc.get("format_version", FORMAT_VERSION))
    if version != FORMAT_VERSION:
        raise CaseFormatError(f"{what}: unsupported format_version {version!r}")
    return doc


def _field(rec: Mapping, name: str, table: str, idx: int, default=None):
    if name in rec:
        value = rec[name]
    elif default is not None:
        value = default
    else:
        raise CaseFormatError(f"{table}[{idx}]: missing field {name!r}")
    if isinstance(value, bool) or name in ("kind", "status", "active"):
        return value
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise CaseFormatError(f"{table}[{idx}].{name}: not a number: {value!r}") from None
    if not math.isfinite(value) and name not in ("q_min", "q_max"):
        raise CaseFormatError(f"{table}[{idx}].{name}: not finite")
    return value


def parse_case(text: str) -> GridCase:
    doc = _load_json(text, "case")
    for key in ("base_mva", "buses", "branches"):
        if key not in doc:
            raise CaseFormatError(f"case: missing top-level key {key!r}")
    s = float(doc["base_mva"])
    if not s > 0:
        raise CaseFormatError("case: base_mva must be positive")

    buses = []
    for i, rec in enumerate(doc["buses"]):
        kind = _KIND_ALIASES.get(str(_field(rec, "kind", "buses", i)).lower())
        if kind is None:
            raise CaseFormatError(f"buses[{i}].kind: unknown bus kind {rec['kind']!r}")
        buses.append(BusRecord(
            id=int(_field(rec, "id", "buses", i)), kind=kind,
            p_demand=_field(rec, "p_demand", "buses", i, 0.0) / s,
            q_demand=_field(rec, "q_demand", "buses", i, 0.0) / s,
            g_shunt=_field(rec, "g_shunt", "buses", i, 0.0) / s,
            b_shunt=_field(rec, "b_shunt", "buses", i, 0.0) / s,
            v_mag=_field(rec, "v_mag", "buses", i, 1.0),
            v_ang=math.radians(_field(rec, "v_ang", "buses", i, 0.0)),
            base_kv=_field(rec, "base_kv", "buses", i, 0.0)))
    ids = [b.id for b in buses]
    dupes = sorted({b for b in ids if ids.count(b) > 1})
    if dupes:
        raise CaseFormatError(f"buses: duplicate bus id(s) {dupes}")
    known = set(ids)

    branches = []
    for i, rec in enumerate(doc["branches"]):
        br = BranchRecord(
            from_bus=int(_field(rec, "from_bus", "branches", i)),
            to_bus=int(_field(rec, "to_bus", "branches", i)),
            r=_field(rec, "r", "branches", i, 0.0), x=_field(rec, "x", "branches", i, 0.0),
            b_charging=_field(rec, "b_charging", "branches", i, 0.0),
            status=bool(rec.get("status", True)))
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise CaseFormatError(
                    f"branches[{i}]: referential integrity: endpoint bus {end} not in bus table")
        branches.append(br)

    gens = []
    for i, rec in enumerate(doc.get("gens", [])):
        g = GenRecord(
            bus=int(_field(rec, "bus", "gens", i)),
            p_gen=_field(rec, "p_gen", "gens", i, 0.0) / s,
            q_gen=_field(rec, "q_gen", "gens", i, 0.0) / s,
            q_min=_field(rec, "q_min", "gens", i, -math.inf) / s,
            q_max=_field(rec, "q_max", "gens", i, math.inf) / s,
            v_set=_field(rec, "v_set", "gens", i, 1.0))
        if g.bus not in known:
            raise CaseFormatError(f"gens[{i}]: referential integrity: bus {g.bus} not in bus table")
        gens.append(g)

    vvcs = []
    for i, rec in enumerate(doc.get("vvcs", [])):
        v = VvcRecord(
            bus=int(_field(rec, "bus", "vvcs", i)),
            q_available=_field(rec, "q_available", "vvcs", i) / s,
            q_injected=_field(rec, "q_injected", "vvcs", i, 0.0) / s,
            active=bool(rec.get("active", True)))
        if v.bus not in known:
            raise CaseFormatError(f"vvcs[{i}]: referential integrity: bus {v.bus} not in bus table")
        vvcs.append(v)

    return GridCase(base_mva=s, buses=tuple(buses), branches=tuple(branches), gens=tuple(gens),
                    vvcs=tuple(vvcs), name=str(doc.get("name", "")))


def load_case(path) -> GridCase:
    return parse_case(Path(path).read_text())


# -- validation ------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    record: str
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.record}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


def _components(bus_ids, edges) -> list[set[int]]:
    adj: dict[int, set[int]] = {b: set() for b in bus_ids}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    seen: set[int] = set()
    comps = []
    for start in bus_ids:
        if start in seen:
            continue
        comp = {start}
        queue = deque([start])
        while queue:
            for nb in adj[queue.popleft()]:
                if nb not in comp:
                    comp.add(nb)
                    queue.append(nb)
        seen |= comp
        comps.append(comp)
    return comps


def validate_case(case: GridCase) -> list[Violation]:
    out: list[Violation] = []
    ids = case.bus_ids
    known = set(ids)
    if len(known) != len(ids):
        out.append(Violation("buses", "duplicate bus id"))
    for b in case.buses:
        if b.kind not in (SLACK, PV, PQ):
            out.append(Violation(f"bus {b.id}", "unknown kind", b.kind))
        if not (math.isfinite(b.p_demand) and math.isfinite(b.q_demand)):
            out.append(Violation(f"bus {b.id}", "non-finite demand"))
    slacks = [b.id for b in case.buses if b.kind == SLACK]
    if len(slacks) > 1:
        out.append(Violation("buses", "multiple slack", f"buses {slacks}"))
    elif not slacks:
        out.append(Violation("buses", "no slack"))
    for k, br in enumerate(case.branches):
        if br.r == 0.0 and br.x == 0.0:
            out.append(Violation(f"branch {k}", "zero impedance"))
        if br.from_bus == br.to_bus:
            out.append(Violation(f"branch {k}", "self loop"))
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                out.append(Violation(f"branch {k}", "referential integrity", f"bus {end}"))
    for g in case.gens:
        if g.bus not in known:
            out.append(Violation(f"gen at bus {g.bus}", "referential integrity"))
        if not g.q_min <= g.q_gen <= g.q_max:
            out.append(Violation(f"gen at bus {g.bus}", "q_gen outside [q_min, q_max]"))
    for v in case.vvcs:
        if v.bus not in known:
            out.append(Violation(f"vvc at bus {v.bus}", "referential integrity"))
        if v.q_available < 0 or v.q_injected < 0:
            out.append(Violation(f"vvc at bus {v.bus}", "negative reactive quantity"))
    edges = [(br.from_bus, br.to_bus) for _, br in case.in_service()
             if br.from_bus in known and br.to_bus in known]
    comps = _components(ids, edges)
    if len(comps) > 1:
        main = max(comps, key=len)
        stray = sorted(b for c in comps if c is not main for b in c)
        out.append(Violation("network", "disconnected component", f"buses {stray}"))
    return out


# -- grouping --------------------------------------------------------------

@dataclass(frozen=True)
class Group:
    id: str
    bus_ids: frozenset[int]
    tie_branches: frozenset[int] = frozenset()
    merged_from: tuple[str, str] | None = None
    diagnostics: tuple[str, ...] = ()

    @property
    def is_merged(self) -> bool:
        return self.merged_from is not None


def group_sort_key(gid: str):
    return (0, int(gid), "") if str(gid).isdigit() else (1, 0, str(gid))


def tie_branches_of(case: GridCase, bus_ids) -> frozenset[int]:
    inside = set(bus_ids)
    return frozenset(k for k, br in case.in_service()
                     if (br.from_bus in inside) != (br.to_bus in inside))


def _content_diagnostics(case: GridCase, bus_ids, ties) -> tuple[str, ...]:
    inside = set(bus_ids)
    diags = []
    if not any(case.bus(b).has_load for b in inside):
        diags.append("no load bus")
    if not (case.gen_buses() & inside) and not ties:
        diags.append("no generator or virtual source")
    if not any(v.bus in inside and v.active for v in case.vvcs):
        diags.append("no VVC")
    return tuple(diags)


def make_group(case: GridCase, gid: str, bus_ids, merged_from=None) -> Group:
    ties = tie_branches_of(case, bus_ids)
    return Group(id=str(gid), bus_ids=frozenset(bus_ids), tie_branches=ties,
                 merged_from=merged_from,
                 diagnostics=_content_diagnostics(case, bus_ids, ties))


def apply_grouping(case: GridCase, grouping: Mapping) -> list[Group]:
    """Turn a group id -> bus ids mapping into Groups; the mapping must partition the buses."""
    owner: dict[int, str] = {}
    for gid, members in grouping.items():
        for b in members:
            b = int(b)
            if b in owner:
                raise CaseFormatError(f"grouping: bus {b} in both group {owner[b]} and {gid}")
            owner[b] = str(gid)
    known = set(case.bus_ids)
    unknown = sorted(set(owner) - known)
    if unknown:
        raise CaseFormatError(f"grouping: unknown bus id(s) {unknown}")
    missing = sorted(known - set(owner))
    if missing:
        raise CaseFormatError(f"grouping: bus(es) {missing} assigned to no group")
    groups = [make_group(case, str(gid), {int(b) for b in members})
              for gid, members in grouping.items()]
    return sorted(groups, key=lambda g: group_sort_key(g.id))


def parse_grouping(text: str) -> dict[str, list[int]]:
    doc = _load_json(text, "grouping")
    groups = doc.get("groups", {k: v for k, v in doc.items() if k != "format_version"})
    return {str(k): [int(b) for b in v] for k, v in groups.items()}


def load_grouping(path) -> dict[str, list[int]]:
    return parse_grouping(Path(path).read_text())


def adjacent_groups(case: GridCase, groups) -> list[tuple[str, str]]:
    """Pairs of group ids sharing at least one tie branch, sorted."""
    pairs = set()
    groups = list(groups)
    for i, a in enumerate(groups):
        for b in groups[i + 1:]:
            if a.tie_branches & b.tie_branches:
                pairs.add(tuple(sorted((a.id, b.id), key=group_sort_key)))
    return sorted(pairs, key=lambda p: (group_sort_key(p[0]), group_sort_key(p[1])))


# -- tie-line virtualization ----------------------------------------------

VIRTUAL_PV, VIRTUAL_PQ = "virtual-PV", "virtual-PQ"


def virtual_bus_id(branch_id: int) -> int:
    """Virtual midpoint buses get negative ids so they never collide with real buses."""
    return -(branch_id + 1)


@dataclass(frozen=True)
class TieFlow:
    """Power crossing a tie-line midpoint, positive when flowing into the group."""
    s_import: complex
    v_mid: complex | None = None


@dataclass(frozen=True)
class VirtualBus:
    branch_id: int
    bus_id: int
    kind: str
    inner_bus: int
    z_half: complex
    injection: complex
    v_mid: complex | None = None


@dataclass(frozen=True)
class VirtualizedGroup:
    group: Group
    virtual_buses: tuple[VirtualBus, ...]
    classes: Mapping[int, str] = field(default_factory=dict)

    @property
    def load_buses(self) -> list[int]:
        """Real buses classified as load buses, ascending."""
        return sorted(b for b, c in self.classes.items() if c == LOAD and b >= 0)


def classify_buses(case: GridCase, group: Group) -> dict[int, str]:
    """G for generator buses, T for unloaded tie-line endpoints, L for everything else."""
    inside = group.bus_ids
    tie_ends = set()
    for k in group.tie_branches:
        br = case.branches[k]
        tie_ends.add(br.from_bus if br.from_bus in inside else br.to_bus)
    gens = case.gen_buses()
    classes = {}
    for b in sorted(inside):
        if b in gens:
            classes[b] = GEN
        elif b in tie_ends and not case.bus(b).has_load:
            classes[b] = TIE
        else:
            classes[b] = LOAD
    return classes


def tie_endpoints(case: GridCase, group: Group) -> dict[int, tuple[int, complex]]:
    """tie branch id -> (inner endpoint bus, half series impedance)."""
    out = {}
    for k in sorted(group.tie_branches):
        br = case.branches[k]
        inner = br.from_bus if br.from_bus in group.bus_ids else br.to_bus
        out[k] = (inner, br.z / 2)
    return out


def virtualize(group: Group, ties: Mapping[int, tuple[int, complex]],
               classes: Mapping[int, str], flows: Mapping) -> VirtualizedGroup:
    missing = sorted(k for k in group.tie_branches if k not in flows)
    if missing:
        raise ValueError(f"group {group.id}: no flow given for tie branch(es) {missing}")
    classes = dict(classes)
    vbuses = []
    for k in sorted(group.tie_branches):
        flow = flows[k]
        if not isinstance(flow, TieFlow):
            flow = TieFlow(complex(flow))
        inner, z_half = ties[k]
        kind = VIRTUAL_PV if flow.s_import.real > 0 else VIRTUAL_PQ
        vid = virtual_bus_id(k)
        vbuses.append(VirtualBus(branch_id=k, bus_id=vid, kind=kind, inner_bus=inner,
                                 z_half=z_half, injection=complex(flow.s_import),
                                 v_mid=flow.v_mid))
        classes[vid] = GEN if kind == VIRTUAL_PV else LOAD
    return VirtualizedGroup(group=group, virtual_buses=tuple(vbuses), classes=classes)


def virtualize_ties(case: GridCase, group: Group, flows: Mapping) -> VirtualizedGroup:
    """Replace each tie line by a half line ending in a virtual PV (import) or PQ (export) bus."""
    return virtualize(group, tie_endpoints(case, group), classify_buses(case, group), flows)
