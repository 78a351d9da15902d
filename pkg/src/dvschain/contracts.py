"""DVS contract logic hosted by the ledger.

``VSIContract`` runs monitoring (and, when a weak bus is flagged, local
control) for one group; it lives on the group's shard channel.
``GlobalContract`` lives on the mainchain and owns topology records, the VVC
registry, merge bookkeeping and monitoring of merged groups.

Ledger keys (all on the mainchain unless noted):

    group/<gid>          GroupData of a group or adjacent pair ("a+b")
    groups/index         base groups: bus sets and tie branches
    vvc/<gid>            VVC registry of a base group
    merge/<gid>          id of the merged group a base group belongs to, or ""
    merged/<a+b>         "active" or "split"
    vsi/<gid>/<tx>       VSI summary written by each ComputeVSI (group's channel)
    action/<gid>/<tx>    control action recorded by LocalController (group's channel)
"""
from __future__ import annotations

import json
from functools import lru_cache
from typing import Any, Mapping

from .dvs import (DEFAULT_THRESHOLD, DEFAULT_V_REQ, ControlError, GroupData, StaleGroupState,
                  VsiReport, build_group_data, compute_vsi, global_controller, local_controller, merge_pair,
                  split_group)
from .gridcase import GridCase, Group, VvcRecord, adjacent_groups, group_sort_key, parse_case
from .ledger import (MAINCHAIN, VALID, Contract, ContractError, JsonText, LedgerError, Network,
                     NetworkConfig, TxContext, canonical_json)
from .powerflow import PmuSnapshot, case_admittance

CACHE_SIZE = 4096
_caching = True


def set_caching(enabled: bool) -> None:
    """Memoization of pure contract computations; off when timing real execution."""
    global _caching
    _caching = enabled
    _evaluate_cached.cache_clear()
    _group_data.cache_clear()


def vsi_units(n_nodes: int) -> float:
    """Cost units of one ComputeVSI: a dense factorization of the group network,
    normalized so a 16-node group costs one unit."""
    return (n_nodes / 16.0) ** 3


def control_units(n_nodes: int, candidates: int, secant_iterations: int) -> float:
    """Each candidate needs a reduced Jacobian solve plus secant refinements, each on
    a real system twice the network size."""
    return candidates * (1 + secant_iterations) * (2 * n_nodes / 16.0) ** 3 / 4.0


@lru_cache(maxsize=64)
def _group_data(text: str) -> GroupData:
    return GroupData.from_dict(json.loads(text))


def _resources(text: str | None) -> list[VvcRecord]:
    if not text:
        return []
    return [VvcRecord(**r) for r in json.loads(text)]


def resources_to_json(vvcs) -> str:
    return canonical_json([{"bus": v.bus, "q_available": v.q_available,
                            "q_injected": v.q_injected, "active": v.active} for v in vvcs])


def _candidates_tried(data: GroupData, action, resources) -> int:
    vvc_buses = {v.bus for v in resources if v.active}
    ranked = [b for b in data.pi.ranking.get(action["weak_bus"], ()) if b in vvc_buses
              and b != action["weak_bus"]]
    if action["vvc_bus"] is None or action["vvc_bus"] == action["weak_bus"]:
        return 1 + (0 if action["vvc_bus"] is not None else len(ranked))
    return 2 + ranked.index(action["vvc_bus"])


def _evaluate(group_text: str, payload: str, resources_text: str | None) -> tuple[str, float, str, str | None]:
    """Pure DVS computation for one ComputeVSI payload.

    Returns (result JSON, cost units, VSI summary JSON, action JSON or None).
    """
    args = json.loads(payload)
    data = _group_data(group_text) if _caching else GroupData.from_dict(json.loads(group_text))
    snap = PmuSnapshot.from_dict(args["snapshot"])
    threshold = float(args.get("threshold", DEFAULT_THRESHOLD))
    v_req = float(args.get("v_req", DEFAULT_V_REQ))
    secant_iterations = int(args.get("secant_iterations", 8))
    try:
        report = compute_vsi(snap, data, threshold)
    except StaleGroupState as exc:
        raise ContractError(str(exc)) from exc
    units = vsi_units(len(data.y_net.bus_ids))
    action = None
    if bool(args.get("control", True)) and report.flagged:
        resources = _resources(resources_text)
        try:
            action = local_controller(report, resources, data, snap, v_req, secant_iterations).to_dict()
        except ControlError as exc:
            raise ContractError(str(exc)) from exc
        units += control_units(len(data.y_net.bus_ids),
                               _candidates_tried(data, action, resources), secant_iterations)
    summary = {"timestamp": snap.timestamp, "min_vsi": report.min_vsi, "weak_bus": report.weak_bus,
               "flagged": report.flagged}
    result = dict(summary, group_id=report.group_id, sorted_buses=list(report.sorted_buses),
                  vsi={str(b): s.vsi for b, s in sorted(report.buses.items())}, action=action)
    return (canonical_json(result), units, canonical_json(summary),
            None if action is None else canonical_json(action))


_evaluate_cached = lru_cache(maxsize=CACHE_SIZE)(_evaluate)


def _monitor(ctx: TxContext, gid: str, args: Mapping, resources_text: str | None) -> str:
    group_text = ctx.get_global(f"group/{gid}")
    if group_text is None:
        raise ContractError(f"no group record for {gid}")
    if str(args["snapshot"].get("group_id")) != gid:
        raise ContractError(f"snapshot belongs to group {args['snapshot'].get('group_id')}, not {gid}")
    run = _evaluate_cached if _caching else _evaluate
    result, units, summary, action = run(group_text, ctx.payload, resources_text)
    ctx.charge(units)
    ctx.put(f"vsi/{gid}/{ctx.tx_id}", summary)
    if action is not None:
        ctx.put(f"action/{gid}/{ctx.tx_id}", action)
    return result


class VSIContract(Contract):
    """Per-shard monitoring with embedded local control."""
    name = "VSIContract"

    def invoke(self, ctx: TxContext, op: str, args: Any) -> Any:
        if op != "ComputeVSI":
            raise ContractError(f"VSIContract has no operation {op}")
        gid = str(args["group_id"])
        merged = ctx.get_global(f"merge/{gid}")
        if merged:
            # traffic for a merged group is served by the mainchain until it splits
            return {"group_id": gid, "deferred_to": merged}
        resources = ctx.get_global(f"vvc/{gid}")
        return JsonText(_monitor(ctx, gid, args, resources))


def _index(ctx: TxContext) -> dict[str, Group]:
    text = ctx.get("groups/index")
    if text is None:
        raise ContractError("group index not initialized")
    return {gid: Group(id=gid, bus_ids=frozenset(rec["bus_ids"]),
                       tie_branches=frozenset(rec["tie_branches"]))
            for gid, rec in json.loads(text).items()}


class GlobalContract(Contract):
    """Mainchain logic: initialization, VVC registry, merge and split."""
    name = "GlobalContract"

    def invoke(self, ctx: TxContext, op: str, args: Any) -> Any:
        handler = getattr(self, f"_op_{op}", None)
        if handler is None:
            raise ContractError(f"GlobalContract has no operation {op}")
        return handler(ctx, args)

    def _op_InitGroups(self, ctx: TxContext, args):
        """Compute and record per-group and per-adjacent-pair topology data."""
        try:
            case = parse_case(args["case"])
        except ValueError as exc:
            raise ContractError(f"case rejected: {exc}") from exc
        groups = {gid: Group(id=gid, bus_ids=frozenset(b["bus_ids"]),
                             tie_branches=frozenset(b["tie_branches"]))
                  for gid, b in args["groups"].items()}
        full_y = case_admittance(case)
        written = []
        units = 0.0
        for gid in sorted(groups, key=group_sort_key):
            data = build_group_data(case, groups[gid], full_y)
            ctx.put(f"group/{gid}", canonical_json(data.to_dict()))
            units += vsi_units(len(data.y_net.bus_ids)) * 2
            written.append(gid)
        for pair in args.get("pairs", []):
            a, b = (groups[g] for g in pair)
            merged = merge_pair(a, b)
            data = build_group_data(case, merged, full_y)
            ctx.put(f"group/{merged.id}", canonical_json(data.to_dict()))
            units += vsi_units(len(data.y_net.bus_ids)) * 2
            written.append(merged.id)
        ctx.put("groups/index", canonical_json(
            {gid: {"bus_ids": sorted(g.bus_ids), "tie_branches": sorted(g.tie_branches)}
             for gid, g in groups.items()}))
        for gid in groups:
            ctx.put(f"merge/{gid}", "")
        ctx.charge(units)
        return {"records": written}

    def _op_InitVVC(self, ctx: TxContext, args):
        gid = str(args["group_id"])
        vvcs = [VvcRecord(**v) for v in args["vvcs"]]
        ctx.put(f"vvc/{gid}", resources_to_json(vvcs))
        ctx.charge(0.01)
        return {"group_id": gid, "count": len(vvcs)}

    def _op_UpdateVVC(self, ctx: TxContext, args):
        """Draw ``q`` from the VVC at ``bus`` and record the new balance."""
        gid, bus, q = str(args["group_id"]), int(args["bus"]), float(args["q"])
        vvcs = _resources(ctx.get(f"vvc/{gid}"))
        for i, v in enumerate(vvcs):
            if v.bus == bus and v.active:
                if v.q_available < q:
                    raise ContractError(f"VVC at bus {bus} has {v.q_available:.6g} < {q:.6g}")
                vvcs[i] = VvcRecord(v.bus, v.q_available - q, v.q_injected + q, v.active)
                break
        else:
            raise ContractError(f"no active VVC at bus {bus} in group {gid}")
        ctx.put(f"vvc/{gid}", resources_to_json(vvcs))
        ctx.charge(0.01)
        return {"group_id": gid, "bus": bus, "q": q}

    def _registry(self, ctx: TxContext, groups) -> list[VvcRecord]:
        out = []
        for gid in sorted(groups, key=group_sort_key):
            out.extend(_resources(ctx.get(f"vvc/{gid}")))
        return out

    def _op_Merge(self, ctx: TxContext, args):
        """GlobalController: merge with the adjacent group holding the most spare VVC capacity."""
        gid = str(args["group_id"])
        groups = _index(ctx)
        if gid not in groups:
            raise ContractError(f"unknown group {gid}")
        if ctx.get(f"merge/{gid}"):
            raise ContractError(f"group {gid} is already merged")
        groups = {g: grp for g, grp in groups.items() if g == gid or not ctx.get(f"merge/{g}")}
        try:
            merged = global_controller(gid, groups, self._registry(ctx, groups))
        except ControlError as exc:
            raise ContractError(str(exc)) from exc
        if ctx.get(f"group/{merged.id}") is None:
            raise ContractError(f"no combination record for {merged.id}")
        for part in merged.merged_from:
            ctx.put(f"merge/{part}", merged.id)
        ctx.put(f"merged/{merged.id}", "active")
        ctx.charge(0.1)
        partner = next(p for p in merged.merged_from if p != gid)
        return {"merged": merged.id, "partner": partner, "parts": list(merged.merged_from)}

    def _op_ComputeVSI(self, ctx: TxContext, args):
        """Monitoring of a merged group; splits it once every load bus is above threshold."""
        gid = str(args["group_id"])
        if ctx.get(f"merged/{gid}") != "active":
            raise ContractError(f"{gid} is not an active merged group")
        parts = gid.split("+")
        resources = resources_to_json(self._registry(ctx, parts))
        result = json.loads(_monitor(ctx, gid, args, resources))
        result["split"] = False
        report = VsiReport(gid, {}, tuple(result["sorted_buses"]), result["min_vsi"], result["weak_bus"],
                           float(args.get("threshold", DEFAULT_THRESHOLD)))
        if not report.flagged and report.weak_bus is not None:
            index = _index(ctx)
            split_group(merge_pair(index[parts[0]], index[parts[1]]), report, index)
            for part in parts:
                ctx.put(f"merge/{part}", "")
            ctx.put(f"merged/{gid}", "split")
            result["split"] = True
        return result


def owner_group(groups: Mapping[str, Group], bus: int) -> str:
    for gid, g in groups.items():
        if bus in g.bus_ids and not g.is_merged:
            return gid
    raise KeyError(bus)


def snapshot_payload(snap: PmuSnapshot, threshold: float = DEFAULT_THRESHOLD,
                     v_req: float = DEFAULT_V_REQ, control: bool = True) -> dict:
    return {"group_id": snap.group_id, "snapshot": snap.to_dict(), "threshold": threshold,
            "v_req": v_req, "control": control}



def bootstrap_network(config: NetworkConfig, **kwargs) -> Network:
    """Network with GlobalContract on the mainchain and VSIContract wherever a group is hosted."""
    net = Network(config, **kwargs)
    net.deploy_contract(MAINCHAIN, GlobalContract())
    hosts = set(config.group_shard.values()) | set(config.shards)
    for cid in sorted(hosts):
        net.deploy_contract(cid, VSIContract())
    return net


def initialize_network(net: Network, case: GridCase, groups, vvcs=None) -> list[str]:
    """Initial-grouping transactions: topology records for every group and adjacent pair,
    then one VVC registry record per group.  Runs the network until they commit."""
    groups = list(groups)
    for g in groups:
        net.config.channel_of_group(g.id)
    vvcs = case.vvcs if vvcs is None else vvcs
    doc = {"case": canonical_json(case.to_dict()),
           "groups": {g.id: {"bus_ids": sorted(g.bus_ids), "tie_branches": sorted(g.tie_branches)}
                      for g in groups},
           "pairs": [list(p) for p in adjacent_groups(case, groups)]}
    tx_ids = [net.submit_tx(MAINCHAIN, GlobalContract.name, "InitGroups", doc)]
    net.run()
    for g in groups:
        mine = [v for v in vvcs if v.bus in g.bus_ids]
        tx_ids.append(net.submit_tx(MAINCHAIN, GlobalContract.name, "InitVVC", {
            "group_id": g.id, "vvcs": [{"bus": v.bus, "q_available": v.q_available,
                                        "q_injected": v.q_injected, "active": v.active} for v in mine]}))
    net.run()
    for tx_id in tx_ids:
        tx = net.transactions[tx_id]
        if tx.status != VALID:
            raise LedgerError(f"initialization tx {tx_id} ({tx.op}) failed: {tx.status} {tx.reason}")
    return tx_ids
