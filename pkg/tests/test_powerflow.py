import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from dvschain.gridcase import GEN, LOAD, TIE, BranchRecord, BusRecord, parse_case
from dvschain.powerflow import (PmuSnapshot, PowerFlowError, build_admittance, case_admittance,
                                case_sensitivity, electrical_path, branch_adjacency, group_network_admittance,
                                inject_reactive, jacobian_dqdv, make_snapshot, partition_admittance,
                                scale_load, sensitivity_chain, solve_powerflow)
from oracles import finite_difference_dqdv, incidence_admittance, two_bus_voltage


def two_bus(r, x, p, q, e=1.0, b_charging=0.0):
    return parse_case(json.dumps({
        "base_mva": 100.0,
        "buses": [{"id": 1, "kind": "slack", "v_mag": e}, {"id": 2, "kind": "PQ",
                                                           "p_demand": 100 * p, "q_demand": 100 * q}],
        "branches": [{"from_bus": 1, "to_bus": 2, "r": r, "x": x, "b_charging": b_charging}],
        "gens": [{"bus": 1, "v_set": e}],
    }))


def four_bus():
    return parse_case(json.dumps({
        "base_mva": 100.0,
        "buses": [{"id": 1, "kind": "slack"}, {"id": 2, "kind": "PV"},
                  {"id": 3, "kind": "PQ", "p_demand": 60, "q_demand": 25, "b_shunt": 5},
                  {"id": 4, "kind": "PQ", "p_demand": 40, "q_demand": 15}],
        "branches": [{"from_bus": 1, "to_bus": 2, "r": 0.01, "x": 0.05, "b_charging": 0.02},
                     {"from_bus": 1, "to_bus": 3, "r": 0.02, "x": 0.08, "b_charging": 0.01},
                     {"from_bus": 2, "to_bus": 4, "r": 0.03, "x": 0.10},
                     {"from_bus": 3, "to_bus": 4, "r": 0.01, "x": 0.04}],
        "gens": [{"bus": 1, "v_set": 1.02}, {"bus": 2, "p_gen": 30, "v_set": 1.01}],
    }))


# -- admittance --------------------------------------------------------------

def test_case30_admittance_matches_incidence_builder(case30):
    y = case_admittance(case30).entries
    assert np.max(np.abs(y - incidence_admittance(case30))) <= 1e-12
    assert np.max(np.abs(y - y.T)) == 0.0


def test_zero_shunt_rows_sum_to_zero(case30):
    stripped = [BusRecord(b.id, b.kind) for b in case30.buses]
    lines = [(k, BranchRecord(br.from_bus, br.to_bus, br.r, br.x)) for k, br in case30.in_service()]
    y = build_admittance(stripped, lines).entries
    assert np.max(np.abs(y.sum(axis=1))) <= 1e-12


def test_out_of_service_branch_is_ignored(case30):
    from dataclasses import replace
    off = replace(case30, branches=tuple(replace(br, status=(k != 3)) for k, br in enumerate(case30.branches)))
    diff = case_admittance(case30).entries - case_admittance(off).entries
    br = case30.branches[3]
    nz = {(i, j) for i, j in zip(*np.nonzero(np.abs(diff) > 0))}
    f, t = br.from_bus - 1, br.to_bus - 1
    assert nz == {(f, f), (t, t), (f, t), (t, f)}


def test_zero_impedance_branch_raises():
    with pytest.raises(ValueError, match="zero impedance"):
        build_admittance([BusRecord(1, "slack"), BusRecord(2, "PQ")], [BranchRecord(1, 2, 0.0, 0.0)])


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 7), data=st.data())
def test_random_networks_match_incidence_builder(n, data):
    edges = [(i, i + 1) for i in range(1, n)]
    extra = data.draw(st.lists(st.tuples(st.integers(1, n), st.integers(1, n)), max_size=4))
    edges += [(a, b) for a, b in extra if a != b]
    imp = st.floats(0.001, 1.0)
    buses = [{"id": i, "kind": "slack" if i == 1 else "PQ",
              "b_shunt": data.draw(st.floats(-50, 50))} for i in range(1, n + 1)]
    branches = [{"from_bus": a, "to_bus": b, "r": data.draw(imp), "x": data.draw(imp),
                 "b_charging": data.draw(st.floats(0, 0.5))} for a, b in edges]
    case = parse_case(json.dumps({"base_mva": 100, "buses": buses, "branches": branches}))
    y = case_admittance(case).entries
    assert np.allclose(y, incidence_admittance(case), atol=1e-12, rtol=0)
    assert np.array_equal(y, y.T)


def test_partition_reassembles(case30, groups30):
    g = groups30["1"]
    y = group_network_admittance(case30, g)
    classes = {b: (GEN if b in (1, 2) else TIE if b in (6, 9, 28) else LOAD) for b in y.bus_ids}
    part = partition_admittance(y, classes)
    ids = part.permuted_ids()
    assert sorted(ids) == sorted(y.bus_ids)
    assert np.array_equal(part.reassemble(), y.submatrix(ids).entries)
    assert part.order[GEN] == [1, 2]


def test_split_tie_halves_reproduce_the_full_line(case30, groups30):
    # joining the two half-lines of every tie recovers the full admittance matrix
    ga, gb = groups30["1"], groups30["2"]
    ya, yb = group_network_admittance(case30, ga), group_network_admittance(case30, gb)
    shared = ga.tie_branches & gb.tie_branches
    k = sorted(shared)[0]
    br = case30.branches[k]
    ya_half = ya[br.from_bus if br.from_bus in ga.bus_ids else br.to_bus, -(k + 1)]
    yb_half = yb[br.from_bus if br.from_bus in gb.bus_ids else br.to_bus, -(k + 1)]
    # two series halves of admittance -2/z each give -1/z end to end
    assert 1 / (1 / ya_half + 1 / yb_half) == pytest.approx(-1 / br.z, rel=1e-12)


# -- power flow ----------------------------------------------------------------

def test_case30_converges_quickly(case30):
    sol = solve_powerflow(case30, tolerance=1e-8)
    assert sol.converged
    assert sol.mismatch <= 1e-8
    assert sol.iterations <= 10
    assert abs(sol.voltage(1)) == 1.0


# (|V|, angle in degrees) from PYPOWER's runpf on its case30, tolerance 1e-10, no Q limits
REFERENCE_30 = {3: (0.9831382891, -1.52207394), 8: (0.9606237083, -2.72576944),
                12: (0.9854683170, -1.53691158), 19: (0.9652870396, -3.95820470),
                26: (0.9721941498, -2.13934599), 30: (0.9678828792, -3.04152358)}


def test_case30_matches_reference_solution(case30):
    sol = solve_powerflow(case30, tolerance=1e-10)
    for bus, (vm, va) in REFERENCE_30.items():
        assert abs(sol.voltage(bus)) == pytest.approx(vm, abs=1e-9)
        assert math.degrees(np.angle(sol.voltage(bus))) == pytest.approx(va, abs=1e-7)


def test_flat_and_warm_start_agree(case30):
    a = solve_powerflow(case30)
    b = solve_powerflow(case30, v0=a.v)
    assert b.iterations == 0
    c = solve_powerflow(case30, flat_start=False)
    assert np.max(np.abs(a.v - c.v)) < 1e-8


@settings(max_examples=80, deadline=None)
@given(r=st.floats(0.001, 0.2), x=st.floats(0.01, 0.5), p=st.floats(0.0, 1.5), q=st.floats(-0.5, 1.0),
       e=st.floats(0.95, 1.1))
def test_two_bus_matches_bisection_oracle(r, x, p, q, e):
    try:
        expected = two_bus_voltage(e, r, x, p, q)
    except ValueError:
        assume(False)
    # stay clear of the nose where both branches meet
    assume(abs(expected) > 0.6 * e)
    sol = solve_powerflow(two_bus(r, x, p, q, e))
    assert sol.converged
    assert abs(sol.voltage(2) - expected) <= 1e-6


def test_non_convergence_is_reported():
    sol = solve_powerflow(two_bus(0.05, 0.5, 3.0, 2.0), max_iterations=15)
    assert not sol.converged


def test_no_slack_raises(case30):
    from dataclasses import replace
    bad = replace(case30, buses=tuple(replace(b, kind="PQ") if b.kind == "slack" else b for b in case30.buses))
    with pytest.raises(PowerFlowError):
        solve_powerflow(bad)


# -- Jacobian ------------------------------------------------------------------

@pytest.mark.parametrize("builder", [lambda: two_bus(0.02, 0.1, 0.8, 0.4), four_bus],
                         ids=["2-bus", "4-bus"])
def test_dqdv_matches_finite_differences_small(builder):
    case = builder()
    sol = solve_powerflow(case)
    y = case_admittance(case)
    analytic = jacobian_dqdv(sol, y)
    numeric = finite_difference_dqdv(y.entries, sol.v)
    scale = np.maximum(np.abs(numeric), 1e-9)
    mask = np.abs(numeric) > 1e-9
    assert np.max(np.abs(analytic - numeric)[mask] / scale[mask]) < 1e-3
    assert np.all(np.abs(analytic[~mask]) < 1e-6)


def test_dqdv_matches_finite_differences_case30(case30):
    sol = solve_powerflow(case30)
    y = case_admittance(case30)
    analytic = jacobian_dqdv(sol, y)
    numeric = finite_difference_dqdv(y.entries, sol.v)
    mask = np.abs(numeric) > 1e-9
    rel = np.abs(analytic - numeric)[mask] / np.abs(numeric)[mask]
    assert rel.max() < 1e-3


def test_sensitivity_is_positive_and_direct_for_self(case30):
    sol = solve_powerflow(case30)
    sens = case_sensitivity(case30, sol)
    for b in (26, 29, 30):
        s = sensitivity_chain(sens, b, b)
        assert s > 0
        assert s == pytest.approx(1 / sens.dv_dq(b, b))


def test_chain_rule_collapses_to_ratio(case30):
    sol = solve_powerflow(case30)
    sens = case_sensitivity(case30, sol)
    adj = branch_adjacency(case30.in_service())
    path = electrical_path(adj, 24, 26)
    assert path == [24, 25, 26]
    chained = sensitivity_chain(sens, 24, 26, path, adjacency=adj)
    # the product of link ratios telescopes to dV_26/dV_24 under an injection at 24
    direct = (1 / sens.dv_dq(24, 24)) * sens.dv_dq(24, 24) / sens.dv_dq(26, 24)
    assert chained == pytest.approx(direct, rel=1e-12)


def test_chain_rejects_broken_path(case30):
    sol = solve_powerflow(case30)
    sens = case_sensitivity(case30, sol)
    with pytest.raises(ValueError, match="not adjacent"):
        sensitivity_chain(sens, 29, 26, [29, 14, 26], adjacency=branch_adjacency(case30.in_service()))


def test_fixed_voltage_bus_gives_no_finite_sensitivity(case30):
    sens = case_sensitivity(case30, solve_powerflow(case30))
    adj = branch_adjacency(case30.in_service())
    assert math.isinf(sensitivity_chain(sens, 2, 30))
    # a generator bus on the path holds its voltage, so nothing propagates past it
    assert math.isinf(sensitivity_chain(sens, 29, 26, electrical_path(adj, 29, 26), adjacency=adj))


# -- measurements and perturbations -----------------------------------------------

def test_snapshot_round_trip(case30, groups30):
    sol = solve_powerflow(case30)
    snap = make_snapshot(case30, sol, groups30["2"], 12.5)
    again = PmuSnapshot.from_dict(json.loads(json.dumps(snap.to_dict())))
    assert again == snap
    assert set(snap.tie_flows) == set(groups30["2"].tie_branches)


def test_tie_imports_balance_across_groups(case30, groups30):
    sol = solve_powerflow(case30)
    a = make_snapshot(case30, sol, groups30["1"], 0.0)
    b = make_snapshot(case30, sol, groups30["2"], 0.0)
    for k in groups30["1"].tie_branches & groups30["2"].tie_branches:
        assert a.tie_flows[k].s_import == pytest.approx(-b.tie_flows[k].s_import, abs=1e-12)
        assert a.tie_flows[k].v_mid == pytest.approx(b.tie_flows[k].v_mid, abs=1e-15)


def test_snapshot_from_diverged_solution_raises(groups30):
    case = two_bus(0.05, 0.5, 3.0, 2.0)
    sol = solve_powerflow(case, max_iterations=5)
    from dvschain.gridcase import Group
    with pytest.raises(PowerFlowError):
        make_snapshot(case, sol, Group("x", frozenset({1, 2})), 0.0)


def test_scale_load(case30):
    scaled = scale_load(case30, [30], 2.0)
    assert scaled.bus(30).p_demand == 2 * case30.bus(30).p_demand
    assert scaled.bus(29).p_demand == case30.bus(29).p_demand
    assert scale_load(case30, [30], 1.0) == case30
    with pytest.raises(ValueError):
        scale_load(case30, [30], -1.0)
    with pytest.raises(KeyError):
        scale_load(case30, [99], 2.0)


def test_reactive_injection_raises_local_voltage(case30):
    base = solve_powerflow(case30)
    after = solve_powerflow(inject_reactive(case30, 30, 0.05))
    assert abs(after.voltage(30)) > abs(base.voltage(30))
