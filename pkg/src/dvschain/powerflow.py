"""Admittance matrices, Newton-Raphson AC power flow and Q-V sensitivities."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .gridcase import (GEN, LOAD, PQ, PV, SLACK, TIE, BranchRecord, BusRecord, GridCase, Group,
                       TieFlow, VirtualizedGroup, virtual_bus_id)

CLASS_ORDER = (GEN, TIE, LOAD)


class PowerFlowError(RuntimeError):
    pass


class SingularJacobian(PowerFlowError):
    pass


@dataclass
class AdmittanceMatrix:
    entries: np.ndarray
    bus_ids: list[int]
    bus_index: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.bus_index:
            self.bus_index = {b: i for i, b in enumerate(self.bus_ids)}

    @property
    def order(self) -> int:
        return len(self.bus_ids)

    def __getitem__(self, pair) -> complex:
        i, j = pair
        return self.entries[self.bus_index[i], self.bus_index[j]]

    def submatrix(self, bus_ids: Sequence[int]) -> "AdmittanceMatrix":
        idx = [self.bus_index[b] for b in bus_ids]
        return AdmittanceMatrix(self.entries[np.ix_(idx, idx)].copy(), list(bus_ids))

    def scaled(self, k: float) -> "AdmittanceMatrix":
        return AdmittanceMatrix(self.entries * k, list(self.bus_ids))


def _as_branch_list(branches) -> list[tuple[int, BranchRecord]]:
    out = []
    for k, item in enumerate(branches):
        if isinstance(item, BranchRecord):
            out.append((k, item))
        else:
            out.append((int(item[0]), item[1]))
    return out


def build_admittance(buses: Iterable[BusRecord], branches) -> AdmittanceMatrix:
    """Nodal admittance matrix from in-service branches (pi model) and bus shunts."""
    buses = list(buses)
    ids = [b.id for b in buses]
    index = {b: i for i, b in enumerate(ids)}
    y = np.zeros((len(ids), len(ids)), dtype=complex)
    for i, b in enumerate(buses):
        y[i, i] += complex(b.g_shunt, b.b_shunt)
    for k, br in _as_branch_list(branches):
        if not br.status:
            continue
        if br.r == 0.0 and br.x == 0.0:
            raise ValueError(f"branch {k} ({br.from_bus}-{br.to_bus}) has zero impedance")
        f, t = index[br.from_bus], index[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_charging
        y[f, f] += ys + ysh
        y[t, t] += ys + ysh
        y[f, t] -= ys
        y[t, f] -= ys
    return AdmittanceMatrix(y, ids, index)


def case_admittance(case: GridCase) -> AdmittanceMatrix:
    return build_admittance(case.buses, case.in_service())


def group_network_admittance(case: GridCase, group: Group) -> AdmittanceMatrix:
    """Admittance of a group with each tie line cut at its midpoint.

    Interior branches are kept whole.  A tie line contributes its half series
    impedance between the inner endpoint and a virtual midpoint bus, plus half its
    charging at the inner endpoint, so the two halves of a tie in series reproduce
    the full pi model exactly.
    """
    inner = sorted(group.bus_ids)
    ties = sorted(group.tie_branches)
    ids = inner + [virtual_bus_id(k) for k in ties]
    index = {b: i for i, b in enumerate(ids)}
    y = np.zeros((len(ids), len(ids)), dtype=complex)
    for b in inner:
        rec = case.bus(b)
        y[index[b], index[b]] += complex(rec.g_shunt, rec.b_shunt)
    inside = group.bus_ids
    for k, br in case.in_service():
        if br.from_bus in inside and br.to_bus in inside:
            f, t = index[br.from_bus], index[br.to_bus]
            ys = 1.0 / br.z
            y[f, f] += ys + 0.5j * br.b_charging
            y[t, t] += ys + 0.5j * br.b_charging
            y[f, t] -= ys
            y[t, f] -= ys
    for k in ties:
        br = case.branches[k]
        a = index[br.from_bus if br.from_bus in inside else br.to_bus]
        m = index[virtual_bus_id(k)]
        ys = 2.0 / br.z
        y[a, a] += ys + 0.5j * br.b_charging
        y[m, m] += ys
        y[a, m] -= ys
        y[m, a] -= ys
    return AdmittanceMatrix(y, ids, index)


@dataclass
class PartitionedY:
    blocks: dict[tuple[str, str], np.ndarray]
    order: dict[str, list[int]]

    @property
    def class_index(self) -> dict[int, tuple[str, int]]:
        return {b: (c, pos) for c in CLASS_ORDER for pos, b in enumerate(self.order[c])}

    def reassemble(self) -> np.ndarray:
        return np.block([[self.blocks[(r, c)] for c in CLASS_ORDER] for r in CLASS_ORDER])

    def permuted_ids(self) -> list[int]:
        return [b for c in CLASS_ORDER for b in self.order[c]]


def partition_admittance(y: AdmittanceMatrix, classes: Mapping[int, str]) -> PartitionedY:
    unclassified = [b for b in y.bus_ids if b not in classes]
    if unclassified:
        raise ValueError(f"unclassified bus(es) {unclassified}")
    order = {c: sorted(b for b in y.bus_ids if classes[b] == c) for c in CLASS_ORDER}
    idx = {c: [y.bus_index[b] for b in order[c]] for c in CLASS_ORDER}
    blocks = {(r, c): y.entries[np.ix_(idx[r], idx[c])] for r in CLASS_ORDER for c in CLASS_ORDER}
    return PartitionedY(blocks, order)


# -- power flow ------------------------------------------------------------

@dataclass
class PowerFlowSolution:
    bus_ids: list[int]
    v: np.ndarray
    s_injection: np.ndarray
    mismatch: float
    iterations: int
    converged: bool

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.v)

    @property
    def va(self) -> np.ndarray:
        return np.angle(self.v)

    @property
    def index(self) -> dict[int, int]:
        return {b: i for i, b in enumerate(self.bus_ids)}

    def voltage(self, bus: int) -> complex:
        return complex(self.v[self.bus_ids.index(bus)])

    def voltages(self) -> dict[int, complex]:
        return {b: complex(x) for b, x in zip(self.bus_ids, self.v)}


def dS_dV(y: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of complex injections S = V conj(Y V) w.r.t. |V| and angle."""
    ibus = y @ v
    vnorm = v / np.abs(v)
    ds_dvm = np.diag(v) @ np.conj(y @ np.diag(vnorm)) + np.diag(np.conj(ibus) * vnorm)
    ds_dva = 1j * np.diag(v) @ np.conj(np.diag(ibus) - y @ np.diag(v))
    return ds_dvm, ds_dva


def specified_injection(case: GridCase) -> np.ndarray:
    s = np.array([complex(-b.p_demand, -b.q_demand) for b in case.buses])
    idx = {b.id: i for i, b in enumerate(case.buses)}
    for g in case.gens:
        s[idx[g.bus]] += complex(g.p_gen, g.q_gen)
    return s


def _setpoints(case: GridCase) -> dict[int, float]:
    vset = {}
    for g in case.gens:
        vset.setdefault(g.bus, g.v_set)
    return vset


def solve_powerflow(case: GridCase, tolerance: float = 1e-8, max_iterations: int = 30,
                    flat_start: bool = True, v0: np.ndarray | None = None) -> PowerFlowSolution:
    """Newton-Raphson on the polar power-mismatch equations (generator Q limits not enforced)."""
    y = case_admittance(case).entries
    ids = case.bus_ids
    kinds = [b.kind for b in case.buses]
    ref = [i for i, k in enumerate(kinds) if k == SLACK]
    if len(ref) != 1:
        raise PowerFlowError(f"expected exactly one slack bus, found {len(ref)}")
    pv = [i for i, k in enumerate(kinds) if k == PV]
    pq = [i for i, k in enumerate(kinds) if k == PQ]
    pvpq = pv + pq
    vset = _setpoints(case)

    if v0 is not None:
        v = np.array(v0, dtype=complex)
    elif flat_start:
        vm = np.ones(len(ids))
        va = np.zeros(len(ids))
        va[ref[0]] = case.buses[ref[0]].v_ang
    else:
        vm = np.array([b.v_mag for b in case.buses])
        va = np.array([b.v_ang for b in case.buses])
    if v0 is None:
        for i in ref + pv:
            vm[i] = vset.get(ids[i], case.buses[i].v_mag)
        v = vm * np.exp(1j * va)
    else:
        vm, va = np.abs(v), np.angle(v)
        for i in ref + pv:
            vm[i] = vset.get(ids[i], case.buses[i].v_mag)
        v = vm * np.exp(1j * va)

    sbus = specified_injection(case)
    npvpq, npq = len(pvpq), len(pq)

    def residual(v):
        mis = v * np.conj(y @ v) - sbus
        return np.r_[mis[pvpq].real, mis[pq].imag]

    f = residual(v)
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    it = 0
    converged = norm <= tolerance
    while not converged and it < max_iterations:
        ds_dvm, ds_dva = dS_dV(y, v)
        jac = np.block([
            [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
            [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
        ])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(f"singular Jacobian at iteration {it}") from exc
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:npvpq + npq]
        v = vm * np.exp(1j * va)
        it += 1
        f = residual(v)
        norm = float(np.max(np.abs(f)))
        if not math.isfinite(norm):
            break
        converged = norm <= tolerance

    s_inj = v * np.conj(y @ v)
    return PowerFlowSolution(list(ids), v, s_inj, norm, it, bool(converged))


def branch_flows(case: GridCase, sol: PowerFlowSolution, k: int) -> tuple[complex, complex]:
    """(S entering at from end, S entering at to end) for branch k, pi model."""
    br = case.branches[k]
    idx = sol.index
    vf, vt = sol.v[idx[br.from_bus]], sol.v[idx[br.to_bus]]
    i_s = (vf - vt) / br.z
    ych = 0.5j * br.b_charging
    sf = vf * np.conj(i_s + ych * vf)
    st = vt * np.conj(-i_s + ych * vt)
    return complex(sf), complex(st)


def midpoint_flow(case: GridCase, sol: PowerFlowSolution, k: int) -> tuple[complex, complex]:
    """(midpoint voltage, power crossing the midpoint from the from-side to the to-side)."""
    br = case.branches[k]
    idx = sol.index
    vf, vt = sol.v[idx[br.from_bus]], sol.v[idx[br.to_bus]]
    i_s = (vf - vt) / br.z
    v_mid = 0.5 * (vf + vt)
    return complex(v_mid), complex(v_mid * np.conj(i_s))


# -- sensitivities ---------------------------------------------------------

def _voltage_vector(v, y: AdmittanceMatrix) -> np.ndarray:
    if isinstance(v, PowerFlowSolution):
        v = v.voltages()
    if isinstance(v, Mapping):
        return np.array([complex(v[b]) for b in y.bus_ids])
    return np.asarray(v, dtype=complex)


def jacobian_dqdv(v, y: AdmittanceMatrix) -> np.ndarray:
    """dQ_i/d|V_j| over all buses of ``y`` at the given voltages (angles held)."""
    ds_dvm, _ = dS_dV(y.entries, _voltage_vector(v, y))
    return ds_dvm.imag


@dataclass
class QVSensitivity:
    """Reduced dQ/dV over the free-voltage buses, with active power held constant."""
    bus_ids: list[int]
    dqdv: np.ndarray

    def __post_init__(self):
        self.index = {b: i for i, b in enumerate(self.bus_ids)}
        self.dvdq = np.linalg.inv(self.dqdv) if self.dqdv.size else self.dqdv

    def dv_dq(self, bus_v: int, bus_q: int) -> float:
        return float(self.dvdq[self.index[bus_v], self.index[bus_q]])


def reduced_dqdv(v, y: AdmittanceMatrix, fixed_v: Iterable[int],
                 fixed_angle: Iterable[int]) -> QVSensitivity:
    """Eliminate the P-angle coupling: J_QV - J_Qa J_Pa^-1 J_PV over buses with free |V|."""
    vv = _voltage_vector(v, y)
    fixed_v, fixed_angle = set(fixed_v), set(fixed_angle)
    ang = [i for i, b in enumerate(y.bus_ids) if b not in fixed_angle]
    mag = [i for i, b in enumerate(y.bus_ids) if b not in fixed_v]
    ds_dvm, ds_dva = dS_dV(y.entries, vv)
    j_pa = ds_dva[np.ix_(ang, ang)].real
    j_pv = ds_dvm[np.ix_(ang, mag)].real
    j_qa = ds_dva[np.ix_(mag, ang)].imag
    j_qv = ds_dvm[np.ix_(mag, mag)].imag
    if ang:
        reduced = j_qv - j_qa @ np.linalg.solve(j_pa, j_pv)
    else:
        reduced = j_qv
    return QVSensitivity([y.bus_ids[i] for i in mag], reduced)


def case_sensitivity(case: GridCase, sol: PowerFlowSolution) -> QVSensitivity:
    y = case_admittance(case)
    slack = [b.id for b in case.buses if b.kind == SLACK]
    gens = [b.id for b in case.buses if b.kind in (SLACK, PV)]
    return reduced_dqdv(sol, y, fixed_v=gens, fixed_angle=slack)


def sensitivity_chain(sens: QVSensitivity, source: int, weak: int,
                      path: Sequence[int] | None = None,
                      adjacency: Mapping[int, set[int]] | None = None) -> float:
    """Effective dQ_source/dV_weak through the chain rule along ``path``.

    Each link dV_{k+1}/dV_k is the ratio of the voltage responses of consecutive
    path buses to an injection at ``source``; the product is dV_weak/dV_source, and
    dividing the source's own stiffness by it gives the injection needed per unit
    rise at the weak bus.  A buses outside ``sens`` (fixed voltage) yields inf.
    """
    if path is None or len(path) == 0:
        path = [weak] if source == weak else [source, weak]
    if path[0] != source or path[-1] != weak:
        raise ValueError(f"path {list(path)} does not run from {source} to {weak}")
    if adjacency is not None:
        for a, b in zip(path, path[1:]):
            if b not in adjacency.get(a, ()):
                raise ValueError(f"broken path: {a} and {b} are not adjacent")
    if source not in sens.index or weak not in sens.index:
        return math.inf
    self_term = sens.dv_dq(source, source)
    if self_term <= 0:
        return math.inf
    direct = 1.0 / self_term
    if source == weak:
        return direct
    ratio = 1.0
    for a, b in zip(path, path[1:]):
        if b not in sens.index:
            return math.inf
        num, den = sens.dv_dq(b, source), sens.dv_dq(a, source)
        if den == 0:
            return math.inf
        ratio *= num / den
    if ratio <= 0:
        return math.inf
    return direct / ratio


def branch_adjacency(branches) -> dict[int, dict[int, float]]:
    """bus -> {neighbour: |z| of the lowest-impedance parallel branch}."""
    adj: dict[int, dict[int, float]] = {}
    for _, br in _as_branch_list(branches):
        if not br.status:
            continue
        for a, b in ((br.from_bus, br.to_bus), (br.to_bus, br.from_bus)):
            row = adj.setdefault(a, {})
            row[b] = min(row.get(b, math.inf), abs(br.z))
    return adj


def electrical_path(adjacency: Mapping[int, Mapping[int, float]], source: int, target: int,
                    allowed: set[int] | None = None) -> list[int]:
    """Fewest-hop path, ties broken by smaller cumulative |z| then by bus ids."""
    if source == target:
        return [source]
    best = {source: (0, 0.0)}
    heap = [(0, 0.0, [source])]
    while heap:
        hops, dist, path = heapq.heappop(heap)
        node = path[-1]
        if node == target:
            return path
        if best.get(node, (math.inf, math.inf)) < (hops, dist):
            continue
        for nb, z in sorted(adjacency.get(node, {}).items()):
            if allowed is not None and nb not in allowed:
                continue
            cand = (hops + 1, dist + z)
            if cand < best.get(nb, (math.inf, math.inf)):
                best[nb] = cand
                heapq.heappush(heap, (cand[0], cand[1], path + [nb]))
    raise ValueError(f"no path from {source} to {target}")


# -- measurements ----------------------------------------------------------

@dataclass(frozen=True)
class PmuSnapshot:
    group_id: str
    timestamp: float
    v_phasor: Mapping[int, complex]
    s_load: Mapping[int, complex]
    tie_flows: Mapping[int, TieFlow]

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "timestamp": self.timestamp,
            "v_phasor": {str(b): [v.real, v.imag] for b, v in sorted(self.v_phasor.items())},
            "s_load": {str(b): [s.real, s.imag] for b, s in sorted(self.s_load.items())},
            "tie_flows": {str(k): {"s_import": [f.s_import.real, f.s_import.imag],
                                   "v_mid": [f.v_mid.real, f.v_mid.imag]}
                          for k, f in sorted(self.tie_flows.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PmuSnapshot":
        return cls(
            group_id=str(d["group_id"]), timestamp=float(d["timestamp"]),
            v_phasor={int(b): complex(*v) for b, v in d["v_phasor"].items()},
            s_load={int(b): complex(*s) for b, s in d["s_load"].items()},
            tie_flows={int(k): TieFlow(complex(*f["s_import"]), complex(*f["v_mid"]))
                       for k, f in d["tie_flows"].items()})


def make_snapshot(case: GridCase, sol: PowerFlowSolution, group, timestamp: float) -> PmuSnapshot:
    if not sol.converged:
        raise PowerFlowError("snapshot requested from a non-converged solution")
    if isinstance(group, VirtualizedGroup):
        group = group.group
    idx = sol.index
    v = {b: complex(sol.v[idx[b]]) for b in sorted(group.bus_ids)}
    s_load = {b: complex(case.bus(b).p_demand, case.bus(b).q_demand) for b in sorted(group.bus_ids)}
    ties = {}
    for k in sorted(group.tie_branches):
        br = case.branches[k]
        v_mid, s_fwd = midpoint_flow(case, sol, k)
        # s_fwd flows from the from-side towards the to-side
        s_import = s_fwd if br.to_bus in group.bus_ids else -s_fwd
        ties[k] = TieFlow(s_import, v_mid)
    return PmuSnapshot(group.id, float(timestamp), v, s_load, ties)


def scale_load(case: GridCase, buses: Iterable[int], factor: float) -> GridCase:
    if factor < 0:
        raise ValueError("load scale factor must be non-negative")
    targets = set(buses)
    unknown = targets - set(case.bus_ids)
    if unknown:
        raise KeyError(f"unknown bus(es) {sorted(unknown)}")
    new = tuple(replace(b, p_demand=b.p_demand * factor, q_demand=b.q_demand * factor)
                if b.id in targets else b for b in case.buses)
    return replace(case, buses=new)


def inject_reactive(case: GridCase, bus: int, q: float) -> GridCase:
    """Reactive injection at a bus, modelled as a reduction of its reactive demand."""
    new = tuple(replace(b, q_demand=b.q_demand - q) if b.id == bus else b for b in case.buses)
    return replace(case, buses=new)
