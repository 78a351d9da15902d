"""Voltage stability monitoring and control logic.

Everything here is a deterministic function of explicit inputs so it can run as
contract code on any number of endorsing peers and produce identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .gridcase import (GEN, LOAD, TIE, GridCase, Group, VirtualizedGroup, VvcRecord,
                       classify_buses, group_sort_key, tie_endpoints, virtualize)
from .powerflow import (AdmittanceMatrix, PartitionedY, PmuSnapshot, QVSensitivity,
                        dS_dV, electrical_path, group_network_admittance, partition_admittance,
                        reduced_dqdv, sensitivity_chain)

DEFAULT_THRESHOLD = 0.2
DEFAULT_V_REQ = 0.95

APPLIED = "applied"
INSUFFICIENT = "insufficient-local-resources"
NO_ACTION = "no-action-needed"


class StaleGroupState(RuntimeError):
    pass


class ControlError(RuntimeError):
    pass


# -- Thevenin equivalent and maximum transfer ------------------------------

@dataclass(frozen=True)
class TheveninParams:
    load_bus: int
    v_th: complex
    z_th: complex


def thevenin(vgroup: VirtualizedGroup, snap: PmuSnapshot,
             partitioned: PartitionedY) -> list[TheveninParams]:
    """Per-load-bus Thevenin source and impedance.

    Z_LL is the inverse of the Kron-reduced load block (tie buses eliminated,
    generator buses held as ideal sources).  The source voltage follows from the
    measured operating point: V_th = V_L + Z_th * conj(S_L / V_L).
    """
    y_ll = partitioned.blocks[(LOAD, LOAD)]
    y_tt = partitioned.blocks[(TIE, TIE)]
    if y_tt.size:
        try:
            correction = partitioned.blocks[(LOAD, TIE)] @ np.linalg.solve(
                y_tt, partitioned.blocks[(TIE, LOAD)])
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("singular tie-bus block Y_TT") from exc
        y_red = y_ll - correction
    else:
        y_red = y_ll
    if not y_red.size:
        return []
    try:
        z_ll = np.linalg.inv(y_red)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular reduced load admittance") from exc
    out = []
    for pos, bus in enumerate(partitioned.order[LOAD]):
        if bus < 0:
            continue
        z = complex(z_ll[pos, pos])
        v_l = complex(snap.v_phasor[bus])
        s_l = complex(snap.s_load.get(bus, 0j))
        i_l = (s_l / v_l).conjugate()
        out.append(TheveninParams(bus, v_l + z * i_l, z))
    return out


def deliverable(p: float, q: float, v_th: float, z_th: complex) -> bool:
    """Two-bus solvability: a real load voltage exists for P + jQ behind (v_th, z_th)."""
    r, x = z_th.real, z_th.imag
    head = v_th * v_th - 2.0 * (p * r + q * x)
    return head >= 0.0 and head * head >= 4.0 * (p * p + q * q) * abs(z_th) ** 2


def max_transfer(th: TheveninParams, load: complex) -> tuple[float, float, float]:
    """(p_max, q_max, s_max) on the two-bus solvability boundary.

    p_max holds Q at the load value, q_max holds P, s_max keeps the load power
    factor.  Closed forms come from the boundary quadratic, written in the
    rationalised form so that a purely resistive or reactive z_th needs no
    special case.  NaN marks "no deliverable point at this fixed component".
    """
    zmag = abs(th.z_th)
    if not zmag > 0 or not math.isfinite(zmag):
        raise ValueError(f"degenerate Thevenin impedance {th.z_th!r}")
    r, x = th.z_th.real, th.z_th.imag
    e2 = abs(th.v_th) ** 2
    p, q = load.real, load.imag

    def boundary(a: float, other: float, own_coeff: float, other_coeff: float) -> float:
        # largest t with a - 2 t own_coeff >= 2 |z| sqrt(t^2 + other^2)
        disc = a * a - 4.0 * other_coeff * other_coeff * other * other
        if a <= 0.0 or disc < 0.0:
            return math.nan
        den = 2.0 * (zmag * math.sqrt(disc) + a * own_coeff)
        if den <= 0.0:
            return math.inf
        return (a * a - 4.0 * other * other * zmag * zmag) / den

    p_max = boundary(e2 - 2.0 * q * x, q, r, x)
    q_max = boundary(e2 - 2.0 * p * r, p, x, r)
    s_abs = abs(load)
    if s_abs > 0:
        cos_phi, sin_phi = p / s_abs, q / s_abs
    else:
        cos_phi, sin_phi = 1.0, 0.0
    den = 2.0 * (zmag + r * cos_phi + x * sin_phi)
    s_max = e2 / den if den > 0 else math.inf
    return p_max, q_max, s_max


def _margin(limit: float, value: float) -> float:
    if value == 0.0 and (limit > 0 or math.isnan(limit)):
        return 1.0
    if math.isnan(limit) or limit <= 0.0:
        return -math.inf
    if math.isinf(limit):
        return 1.0
    # a net injection (negative load component) adds no stress in that direction
    return min(1.0, (limit - value) / limit)


# -- sorting ---------------------------------------------------------------

def knuth_gaps(n: int) -> list[int]:
    gaps, h = [], 1
    while h < max(n, 2):
        gaps.append(h)
        h = 3 * h + 1
    return gaps[::-1]


def shell_sort(values: Sequence[tuple[int, float]]) -> list[tuple[int, float]]:
    """Ascending by value, ties by bus id; gaps 1, 4, 13, 40, ..."""
    items = list(values)
    key = lambda item: (item[1], item[0])
    for gap in knuth_gaps(len(items)):
        for i in range(gap, len(items)):
            cur = items[i]
            j = i
            while j >= gap and key(items[j - gap]) > key(cur):
                items[j] = items[j - gap]
                j -= gap
            items[j] = cur
    return items


# -- group data kept on the ledger -----------------------------------------

@dataclass(frozen=True)
class PIMatrix:
    group_id: str
    ranking: Mapping[int, tuple[int, ...]]
    distances: Mapping[tuple[int, int], float]


def priority_index(y: AdmittanceMatrix, group: Group, gen_buses=()) -> PIMatrix:
    """Rank candidate buses for each weak bus: itself, then neighbours, then the rest.

    Within each tier buses are ordered by electrical distance
    |Z_ii + Z_jj - 2 Z_ij| over Z = inverse of the group's admittance block.
    """
    buses = sorted(group.bus_ids)
    ysub = y.submatrix(buses).entries.copy()
    if np.linalg.cond(ysub) > 1e12:
        candidates = sorted(set(gen_buses) & set(buses)) or buses
        g = buses.index(candidates[-1])
        ysub[g, g] += 1e6 * max(1.0, float(np.max(np.abs(ysub))))
    z = np.linalg.inv(ysub)
    dz = np.abs(np.diag(z)[:, None] + np.diag(z)[None, :] - 2.0 * z)
    scale = float(dz.max()) or 1.0
    # rounding makes the order immune to last-bit noise when Y is rescaled
    rel = np.round(dz / scale, 10)
    distances = {}
    ranking = {}
    for i, w in enumerate(buses):
        neighbours = {buses[j] for j in range(len(buses)) if j != i and ysub[i, j] != 0}
        for j, b in enumerate(buses):
            distances[(w, b)] = 0.0 if i == j else float(dz[i, j])
        order = sorted(buses, key=lambda b: (b != w, b not in neighbours,
                                             rel[i, buses.index(b)], b))
        ranking[w] = tuple(order)
    return PIMatrix(group.id, ranking, distances)


@dataclass
class GroupData:
    """Topology-derived data for one group (or merged pair), computed once at start-up."""
    group: Group
    ties: dict[int, tuple[int, complex]]
    classes: dict[int, str]
    y_net: AdmittanceMatrix
    pi: PIMatrix
    adjacency: dict[int, dict[int, float]] = field(default_factory=dict)

    @property
    def group_id(self) -> str:
        return self.group.id

    def virtualize(self, flows) -> VirtualizedGroup:
        return virtualize(self.group, self.ties, self.classes, flows)

    def to_dict(self) -> dict:
        g = self.group
        return {
            "group_id": g.id,
            "bus_ids": sorted(g.bus_ids),
            "tie_branches": sorted(g.tie_branches),
            "merged_from": list(g.merged_from) if g.merged_from else None,
            "ties": {str(k): [inner, [z.real, z.imag]] for k, (inner, z) in sorted(self.ties.items())},
            "classes": {str(b): c for b, c in sorted(self.classes.items())},
            "y_ids": list(self.y_net.bus_ids),
            "y_re": self.y_net.entries.real.tolist(),
            "y_im": self.y_net.entries.imag.tolist(),
            "pi_ranking": {str(w): list(r) for w, r in sorted(self.pi.ranking.items())},
            "pi_distances": [[a, b, d] for (a, b), d in sorted(self.pi.distances.items())],
            "adjacency": {str(a): {str(b): z for b, z in sorted(row.items())}
                          for a, row in sorted(self.adjacency.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroupData":
        group = Group(id=str(d["group_id"]), bus_ids=frozenset(d["bus_ids"]),
                      tie_branches=frozenset(d["tie_branches"]),
                      merged_from=tuple(d["merged_from"]) if d.get("merged_from") else None)
        y = AdmittanceMatrix(np.array(d["y_re"]) + 1j * np.array(d["y_im"]), list(d["y_ids"]))
        pi = PIMatrix(group.id, {int(w): tuple(r) for w, r in d["pi_ranking"].items()},
                      {(int(a), int(b)): float(x) for a, b, x in d["pi_distances"]})
        return cls(group=group,
                   ties={int(k): (int(v[0]), complex(*v[1])) for k, v in d["ties"].items()},
                   classes={int(b): c for b, c in d["classes"].items()},
                   y_net=y, pi=pi,
                   adjacency={int(a): {int(b): float(z) for b, z in row.items()}
                              for a, row in d["adjacency"].items()})


def build_group_data(case: GridCase, group: Group, full_y: AdmittanceMatrix | None = None) -> GroupData:
    from .powerflow import case_admittance
    full_y = full_y or case_admittance(case)
    adjacency: dict[int, dict[int, float]] = {}
    for _, br in case.in_service():
        if br.from_bus in group.bus_ids and br.to_bus in group.bus_ids:
            for a, b in ((br.from_bus, br.to_bus), (br.to_bus, br.from_bus)):
                row = adjacency.setdefault(a, {})
                row[b] = min(row.get(b, math.inf), abs(br.z))
    return GroupData(group=group, ties=tie_endpoints(case, group),
                     classes=classify_buses(case, group),
                     y_net=group_network_admittance(case, group),
                     pi=priority_index(full_y, group, case.gen_buses()),
                     adjacency=adjacency)


# -- monitoring ------------------------------------------------------------

@dataclass(frozen=True)
class BusStability:
    vsi: float
    p_load: float
    q_load: float
    s_load: float
    p_max: float
    q_max: float
    s_max: float


@dataclass(frozen=True)
class VsiReport:
    group_id: str
    buses: Mapping[int, BusStability]
    sorted_buses: tuple[int, ...]
    min_vsi: float
    weak_bus: int | None
    threshold: float = DEFAULT_THRESHOLD

    @property
    def flagged(self) -> bool:
        return self.weak_bus is not None and self.min_vsi <= self.threshold

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "buses": {str(b): [s.vsi, s.p_load, s.q_load, s.s_load, s.p_max, s.q_max, s.s_max]
                      for b, s in sorted(self.buses.items())},
            "sorted_buses": list(self.sorted_buses),
            "min_vsi": self.min_vsi,
            "weak_bus": self.weak_bus,
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "VsiReport":
        return cls(group_id=d["group_id"],
                   buses={int(b): BusStability(*v) for b, v in d["buses"].items()},
                   sorted_buses=tuple(d["sorted_buses"]), min_vsi=d["min_vsi"],
                   weak_bus=d["weak_bus"], threshold=d["threshold"])


def bus_vsi(th: TheveninParams, load: complex) -> BusStability:
    p_max, q_max, s_max = max_transfer(th, load)
    p, q, s = load.real, load.imag, abs(load)
    vsi = min(_margin(p_max, p), _margin(q_max, q), _margin(s_max, s))
    return BusStability(vsi, p, q, s, p_max, q_max, s_max)


def compute_vsi(snap: PmuSnapshot, data: GroupData,
                threshold: float = DEFAULT_THRESHOLD) -> VsiReport:
    if data is None:
        raise StaleGroupState(f"no group data for group {snap.group_id}")
    if snap.group_id != data.group_id or set(snap.v_phasor) != set(data.group.bus_ids):
        raise StaleGroupState(
            f"snapshot for {snap.group_id} does not match stored group {data.group_id}")
    vgroup = data.virtualize(snap.tie_flows)
    part = partition_admittance(data.y_net, vgroup.classes)
    per_bus = {}
    for th in thevenin(vgroup, snap, part):
        per_bus[th.load_bus] = bus_vsi(th, complex(snap.s_load.get(th.load_bus, 0j)))
    ordered = shell_sort([(b, s.vsi) for b, s in per_bus.items()])
    if ordered:
        weak, min_vsi = ordered[0]
    else:
        weak, min_vsi = None, 1.0
    return VsiReport(data.group_id, per_bus, tuple(b for b, _ in ordered), min_vsi, weak, threshold)


# -- control ---------------------------------------------------------------

def required_reactive(sensitivity: float, v_req: float, v_weak: float) -> float:
    deficit = v_req - v_weak
    if deficit <= 0:
        return 0.0
    return sensitivity * deficit


@dataclass(frozen=True)
class ControlAction:
    group_id: str
    weak_bus: int
    vvc_bus: int | None
    vvc_index: int | None
    q_req: float
    status: str
    v_req: float = DEFAULT_V_REQ
    v_weak: float = math.nan

    def to_dict(self) -> dict:
        return {"group_id": self.group_id, "weak_bus": self.weak_bus, "vvc_bus": self.vvc_bus,
                "vvc_index": self.vvc_index,
                "q_req": self.q_req if math.isfinite(self.q_req) else None,
                "status": self.status, "v_req": self.v_req, "v_weak": self.v_weak}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ControlAction":
        q = d["q_req"]
        return cls(d["group_id"], d["weak_bus"], d["vvc_bus"], d["vvc_index"],
                   math.inf if q is None else q, d["status"], d["v_req"], d["v_weak"])


def group_sensitivity(data: GroupData, snap: PmuSnapshot) -> QVSensitivity:
    """Reduced Q-V sensitivity of the group network with generator and importing tie
    midpoints held as ideal sources."""
    vgroup = data.virtualize(snap.tie_flows)
    fixed = [b for b, c in vgroup.classes.items() if c == GEN]
    if not fixed:
        raise ControlError(f"group {data.group_id} has no voltage source to anchor sensitivities")
    volts = dict(snap.v_phasor)
    for vb in vgroup.virtual_buses:
        if vb.v_mid is None:
            raise ControlError(f"tie {vb.branch_id} has no midpoint voltage")
        volts[vb.bus_id] = vb.v_mid
    return reduced_dqdv(volts, data.y_net, fixed_v=fixed, fixed_angle=fixed)


def candidate_sensitivity(data: GroupData, sens: QVSensitivity, source: int, weak: int) -> float:
    path = electrical_path(data.adjacency, source, weak, allowed=set(data.group.bus_ids))
    return sensitivity_chain(sens, source, weak, path, adjacency=data.adjacency)


def group_local_response(data: GroupData, snap: PmuSnapshot, bus: int, q: float,
                         max_iterations: int = 30, tolerance: float = 1e-10) -> dict[int, complex]:
    """Group-network voltages after adding reactive injection ``q`` at ``bus``.

    Sources (generator buses and importing tie midpoints) keep their measured
    phasors; every other node keeps the net injection implied by the snapshot.
    Raises ControlError when the local Newton iteration does not converge.
    """
    vgroup = data.virtualize(snap.tie_flows)
    ids = data.y_net.bus_ids
    volts = dict(snap.v_phasor)
    for vb in vgroup.virtual_buses:
        volts[vb.bus_id] = vb.v_mid
    v = np.array([complex(volts[b]) for b in ids])
    y = data.y_net.entries
    sbus = v * np.conj(y @ v)
    sbus[data.y_net.bus_index[bus]] += 1j * q
    free = [i for i, b in enumerate(ids) if vgroup.classes[b] != GEN]
    vm, va = np.abs(v), np.angle(v)
    for _ in range(max_iterations):
        mis = v * np.conj(y @ v) - sbus
        f = np.r_[mis[free].real, mis[free].imag]
        if np.max(np.abs(f)) <= tolerance:
            return {b: complex(x) for b, x in zip(ids, v)}
        ds_dvm, ds_dva = dS_dV(y, v)
        jac = np.block([[ds_dva[np.ix_(free, free)].real, ds_dvm[np.ix_(free, free)].real],
                        [ds_dva[np.ix_(free, free)].imag, ds_dvm[np.ix_(free, free)].imag]])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            break
        va[free] += dx[:len(free)]
        vm[free] += dx[len(free):]
        v = vm * np.exp(1j * va)
        if not np.all(np.isfinite(v)):
            break
    raise ControlError(f"group {data.group_id}: local response to injection at {bus} diverged")


def secant_sensitivity(data: GroupData, snap: PmuSnapshot, source: int, weak: int,
                       tangent: float, v_req: float, iterations: int = 8) -> float:
    """Large-signal dQ/dV: the injection at ``source`` that brings ``weak`` to ``v_req``
    on the group model, divided by the voltage deficit.  Starts from the tangent."""
    v_w = abs(snap.v_phasor[weak])
    deficit = v_req - v_w
    if deficit <= 0 or not math.isfinite(tangent) or iterations <= 0:
        return tangent

    def miss(q):
        return abs(group_local_response(data, snap, source, q)[weak]) - v_req

    q_a, f_a = 0.0, -deficit
    q_b = tangent * deficit
    try:
        f_b = miss(q_b)
        for _ in range(iterations):
            if abs(f_b) <= 1e-7 or f_b == f_a:
                break
            q_a, f_a, q_b = q_b, f_b, q_b - f_b * (q_b - q_a) / (f_b - f_a)
            if not q_b > 0:
                return math.inf
            f_b = miss(q_b)
    except ControlError:
        return math.inf
    return q_b / deficit


def _usable(resources: Sequence[VvcRecord], bus: int, q_req: float) -> int | None:
    if not q_req > 0 or not math.isfinite(q_req):
        return None
    for idx, vvc in enumerate(resources):
        if vvc.bus == bus and vvc.active and vvc.q_available >= q_req:
            return idx
    return None


def local_controller(report: VsiReport, resources: Sequence[VvcRecord], data: GroupData,
                     snap: PmuSnapshot, v_req: float = DEFAULT_V_REQ,
                     secant_iterations: int = 8) -> ControlAction:
    """Pick the closest VVC able to lift the weak bus to ``v_req``.

    The weak bus's own VVC is tried first, then VVC buses in priority-index order.
    Each candidate's sensitivity comes from the chain rule on the reduced Jacobian
    and, unless ``secant_iterations`` is 0, is refined to the large-signal value on
    the group model.
    """
    if report.weak_bus is None:
        raise ControlError(f"group {report.group_id}: no weak bus to act on")
    if data is None:
        raise ControlError(f"group {report.group_id}: missing PI/Jacobian group data")
    w = report.weak_bus
    v_w = abs(snap.v_phasor[w])
    sens = group_sensitivity(data, snap)

    def q_for(bus):
        tangent = candidate_sensitivity(data, sens, bus, w)
        sensitivity = secant_sensitivity(data, snap, bus, w, tangent, v_req, secant_iterations)
        return required_reactive(sensitivity, v_req, v_w)

    if v_w >= v_req:
        return ControlAction(data.group_id, w, None, None, 0.0, NO_ACTION, v_req, v_w)
    q_req = q_for(w)
    idx = _usable(resources, w, q_req)
    if idx is not None:
        return ControlAction(data.group_id, w, w, idx, q_req, APPLIED, v_req, v_w)
    vvc_buses = {v.bus for v in resources if v.active}
    for bus in data.pi.ranking[w]:
        if bus == w or bus not in vvc_buses:
            continue
        q_req = q_for(bus)
        idx = _usable(resources, bus, q_req)
        if idx is not None:
            return ControlAction(data.group_id, w, bus, idx, q_req, APPLIED, v_req, v_w)
    return ControlAction(data.group_id, w, None, None, q_req, INSUFFICIENT, v_req, v_w)


def total_available(resources: Sequence[VvcRecord], bus_ids) -> float:
    return sum(v.q_available for v in resources if v.active and v.bus in bus_ids)


def global_controller(requesting: str, groups: Mapping[str, Group],
                      resources: Sequence[VvcRecord]) -> Group:
    """Merge the requesting group with the adjacent group holding the most spare VVC capacity."""
    me = groups[requesting]
    adjacent = [g for gid, g in groups.items()
                if gid != requesting and not g.is_merged and g.tie_branches & me.tie_branches]
    if not adjacent:
        raise ControlError(f"group {requesting}: no adjacent group")
    scored = [(total_available(resources, g.bus_ids), g) for g in adjacent]
    scored = [(q, g) for q, g in scored if q > 0]
    if not scored:
        raise ControlError(f"group {requesting}: no adjacent group with available reactive power")
    best = max(q for q, _ in scored)
    partner = min((g for q, g in scored if q == best), key=lambda g: group_sort_key(g.id))
    return merge_pair(me, partner)


def merge_pair(a: Group, b: Group) -> Group:
    first, second = sorted((a, b), key=lambda g: group_sort_key(g.id))
    return Group(id=f"{first.id}+{second.id}", bus_ids=a.bus_ids | b.bus_ids,
                 tie_branches=a.tie_branches ^ b.tie_branches,
                 merged_from=(first.id, second.id))


def split_group(merged: Group, report: VsiReport, groups: Mapping[str, Group]) -> tuple[Group, Group]:
    if not merged.is_merged:
        raise ControlError(f"group {merged.id} is not a merged group")
    if report.min_vsi <= report.threshold:
        raise ControlError(f"group {merged.id} still unstable (min VSI {report.min_vsi:.4f})")
    a, b = merged.merged_from
    return groups[a], groups[b]
