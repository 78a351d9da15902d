"""Closed-loop DVS scenarios driven through the ledger."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .contracts import GlobalContract, VSIContract, bootstrap_network, initialize_network, snapshot_payload
from .dvs import APPLIED, DEFAULT_THRESHOLD, DEFAULT_V_REQ, INSUFFICIENT, merge_pair
from .gridcase import (CaseFormatError, GridCase, Group, VvcRecord, apply_grouping, group_sort_key,
                       load_case, load_grouping, validate_case)
from .ledger import MAINCHAIN, VALID, LedgerError, Network, NetworkConfigError, TxRecord, load_network_config
from .powerflow import PmuSnapshot, PowerFlowError, inject_reactive, make_snapshot, scale_load, solve_powerflow

DATA_DIR = Path(__file__).resolve().parent / "data"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Disturbance:
    at: float
    buses: tuple[int, ...]
    factor: float


@dataclass(frozen=True)
class ScenarioConfig:
    case: Path
    grouping: Path
    network: Path
    threshold: float = DEFAULT_THRESHOLD
    v_req: float = DEFAULT_V_REQ
    pmu_period_ms: float = 100.0
    duration_ms: float = 2000.0
    disturbances: tuple[Disturbance, ...] = ()
    max_rounds: int = 10
    vvcs: tuple[VvcRecord, ...] | None = None      # overrides the case's VVC table (p.u.)
    secant_iterations: int = 8
    pmu_noise: float = 0.0
    seed: int = 0
    name: str = "scenario"

    def __post_init__(self):
        if not self.pmu_period_ms > 0:
            raise ConfigError("pmu period must be positive")
        if not self.duration_ms > 0:
            raise ConfigError("duration must be positive")
        for d in self.disturbances:
            if not 0 <= d.at <= self.duration_ms:
                raise ConfigError(f"disturbance at {d.at} ms lies outside the {self.duration_ms} ms run")
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")


def resolve_path(value, base: Path) -> Path:
    p = Path(value)
    if p.is_absolute():
        return p
    for root in (base, DATA_DIR, DATA_DIR / "scenarios"):
        if (root / p).exists():
            return root / p
    return base / p


def parse_scenario(doc: Mapping, base_dir: Path | None = None, **overrides) -> ScenarioConfig:
    """Build a ScenarioConfig from JSON; VVC sizes are in MVAr like the case file."""
    base = Path(base_dir or ".")
    try:
        paths = {k: resolve_path(overrides.get(k) or doc[k], base) for k in ("case", "grouping", "network")}
        vvcs = None
        if doc.get("vvcs") is not None:
            base_mva = float(doc.get("base_mva", 100.0))
            vvcs = tuple(VvcRecord(int(v["bus"]), float(v["q_available"]) / base_mva,
                                   float(v.get("q_injected", 0.0)) / base_mva, bool(v.get("active", True)))
                         for v in doc["vvcs"])
        return ScenarioConfig(
            **paths,
            threshold=float(doc.get("threshold", DEFAULT_THRESHOLD)),
            v_req=float(doc.get("v_req", DEFAULT_V_REQ)),
            pmu_period_ms=float(doc.get("pmu_period_ms", 100.0)),
            duration_ms=float(doc.get("duration_ms", 2000.0)),
            disturbances=tuple(Disturbance(float(d["at"]), tuple(int(b) for b in d["buses"]),
                                           float(d["factor"])) for d in doc.get("disturbances", [])),
            max_rounds=int(doc.get("max_rounds", 10)),
            vvcs=vvcs,
            secant_iterations=int(doc.get("secant_iterations", 8)),
            pmu_noise=float(doc.get("pmu_noise", 0.0)),
            seed=int(overrides.get("seed") if overrides.get("seed") is not None else doc.get("seed", 0)),
            name=str(doc.get("name", "scenario")),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed scenario: {exc}") from exc


def load_scenario(path, **overrides) -> ScenarioConfig:
    path = resolve_path(path, Path.cwd())
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"scenario file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return parse_scenario(doc, Path(path).parent, **overrides)


@dataclass
class World:
    """Everything ``init`` produces: the case, its groups and the initialized ledger."""
    config: ScenarioConfig
    case: GridCase
    groups: dict[str, Group]
    network: Network
    init_txs: list[str] = field(default_factory=list)


def cmd_init(cfg: ScenarioConfig, wall_clock: bool = False) -> World:
    """Parse and validate every input, then record group data and VVC budgets on the mainchain."""
    try:
        case = load_case(cfg.case)
        grouping = load_grouping(cfg.grouping)
        net_cfg = load_network_config(cfg.network)
    except FileNotFoundError as exc:
        raise ConfigError(f"missing input file: {exc.filename}") from exc
    except (CaseFormatError, NetworkConfigError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.vvcs is not None:
        case = case.with_vvcs(cfg.vvcs)
    problems = validate_case(case)
    if problems:
        raise ConfigError("; ".join(f"{v.record}: {v.rule}" for v in problems))
    try:
        groups = apply_grouping(case, grouping)
        for g in groups:
            net_cfg.channel_of_group(g.id)
    except (CaseFormatError, NetworkConfigError) as exc:
        raise ConfigError(str(exc)) from exc
    net = bootstrap_network(net_cfg, wall_clock=wall_clock)
    init_txs = initialize_network(net, case, groups)
    return World(cfg, case, {g.id: g for g in groups}, net, init_txs)


@dataclass
class ScenarioResult:
    log: list[dict]
    collapsed: bool
    chain_hashes: dict[str, str]
    trajectory: list[dict]

    def events(self, kind: str) -> list[dict]:
        return [e for e in self.log if e["event"] == kind]


class _Runner:
    def __init__(self, world: World):
        self.w = world
        self.cfg = world.config
        self.net = world.network
        self.case = world.case
        self.monitored: dict[str, Group] = dict(world.groups)
        self.in_flight: dict[str, str] = {}          # unit id -> tx id it waits for
        self.rounds: dict[str, int] = {}
        self.tx_unit: dict[str, str] = {}
        self.log: list[dict] = []
        self.trajectory: list[dict] = []
        self.rng = np.random.default_rng(self.cfg.seed)
        self.net.commit_hooks.append(self.on_commit)

    def emit(self, t: float, event: str, **fields) -> None:
        self.log.append({"t": round(t - self.t0, 9), "event": event, **fields})

    # ---- submission

    def channel_for(self, uid: str) -> str:
        return MAINCHAIN if "+" in uid else self.net.config.channel_of_group(uid)

    def measure(self, sol, group: Group, stamp: float) -> PmuSnapshot:
        snap = make_snapshot(self.case, sol, group, stamp)
        if self.cfg.pmu_noise <= 0:
            return snap
        noisy = {}
        for b, v in snap.v_phasor.items():
            e = self.rng.normal(0.0, self.cfg.pmu_noise, 2)
            noisy[b] = v * (1 + e[0]) * np.exp(1j * e[1])
        return PmuSnapshot(snap.group_id, snap.timestamp, noisy, snap.s_load, snap.tie_flows)

    def submit(self, uid: str, channel: str, contract: str, op: str, args, t: float) -> str:
        tx_id = self.net.submit_tx(channel, contract, op, args, at=t)
        self.tx_unit[tx_id] = uid
        self.in_flight[uid] = tx_id
        return tx_id

    def submit_vsi(self, uid: str, group: Group, sol, t: float) -> None:
        stamp = round(t - self.t0, 9)
        payload = snapshot_payload(self.measure(sol, group, stamp), self.cfg.threshold, self.cfg.v_req)
        payload["secant_iterations"] = self.cfg.secant_iterations
        contract = GlobalContract.name if "+" in uid else VSIContract.name
        self.submit(uid, self.channel_for(uid), contract, "ComputeVSI", payload, t)

    # ---- commit handling

    def on_commit(self, tx: TxRecord) -> None:
        uid = self.tx_unit.pop(tx.tx_id, None)
        if uid is None:
            return
        if self.in_flight.get(uid) == tx.tx_id:
            del self.in_flight[uid]
        now = self.net.now
        self.emit(now, "tx", tx_id=tx.tx_id, channel=tx.channel, op=tx.op, unit=uid, status=tx.status)
        if tx.status != VALID:
            self.emit(now, "tx-failed", unit=uid, op=tx.op, reason=tx.reason)
            return
        getattr(self, f"_after_{tx.op}", lambda *a: None)(uid, tx, now)

    def _after_ComputeVSI(self, uid: str, tx: TxRecord, now: float) -> None:
        res = tx.result
        if "deferred_to" in res:
            return
        self.trajectory.append({"t": res["timestamp"], "unit": uid, "min_vsi": res["min_vsi"],
                                "weak_bus": res["weak_bus"]})
        self.emit(now, "vsi", unit=uid, timestamp=res["timestamp"], min_vsi=res["min_vsi"],
                  weak_bus=res["weak_bus"], flagged=res["flagged"])
        action = res["action"]
        if res.get("split"):
            self.emit(now, "stable", unit=uid, min_vsi=res["min_vsi"])
            self.emit(now, "split", unit=uid, parts=uid.split("+"))
            del self.monitored[uid]
            for part in uid.split("+"):
                self.monitored[part] = self.w.groups[part]
                self.rounds[part] = 0
            return
        if action is None:
            return
        self.rounds[uid] = self.rounds.get(uid, 0) + 1
        if action["status"] == APPLIED and self.rounds[uid] > self.cfg.max_rounds:
            self.emit(now, "round-limit", unit=uid, rounds=self.cfg.max_rounds)
            self.escalate(uid, now)
        elif action["status"] == APPLIED:
            self.apply(uid, action, now, tx.tx_id)
        elif action["status"] == INSUFFICIENT:
            self.emit(now, "insufficient", unit=uid, weak_bus=action["weak_bus"], q_req=action["q_req"],
                      round=self.rounds[uid], tx_id=tx.tx_id)
            self.escalate(uid, now)

    def apply(self, uid: str, action: dict, now: float, source_tx: str) -> None:
        bus, q = action["vvc_bus"], action["q_req"]
        self.case = inject_reactive(self.case, bus, q)
        owner = next(g for g, grp in self.w.groups.items() if bus in grp.bus_ids)
        self.emit(now, "action", unit=uid, weak_bus=action["weak_bus"], vvc_bus=bus, q_req=q,
                  v_weak=action["v_weak"], v_req=action["v_req"], round=self.rounds[uid], tx_id=source_tx)
        self.submit(uid, MAINCHAIN, GlobalContract.name, "UpdateVVC",
                    {"group_id": owner, "bus": bus, "q": q}, now)

    def escalate(self, uid: str, now: float) -> None:
        if "+" in uid:
            self.emit(now, "escalation-exhausted", unit=uid)
            return
        self.submit(uid, MAINCHAIN, GlobalContract.name, "Merge", {"group_id": uid}, now)

    def _after_Merge(self, uid: str, tx: TxRecord, now: float) -> None:
        merged_id, parts = tx.result["merged"], tx.result["parts"]
        a, b = (self.w.groups[p] for p in parts)
        for p in parts:
            self.monitored.pop(p, None)
            self.in_flight.pop(p, None)
        self.monitored[merged_id] = merge_pair(a, b)
        self.rounds[merged_id] = 0
        self.emit(now, "merge", unit=uid, partner=tx.result["partner"], merged=merged_id)

    # ---- main loop

    def run(self) -> ScenarioResult:
        cfg = self.cfg
        self.t0 = self.net.now
        pending = sorted(cfg.disturbances, key=lambda d: d.at)
        collapsed = False
        steps = int(cfg.duration_ms // cfg.pmu_period_ms) + 1
        for k in range(steps):
            t = self.t0 + k * cfg.pmu_period_ms
            self.net.run(until=t)
            while pending and pending[0].at <= k * cfg.pmu_period_ms:
                d = pending.pop(0)
                self.case = scale_load(self.case, d.buses, d.factor)
                for uid in list(self.rounds):
                    self.rounds[uid] = 0
                self.emit(t, "disturbance", buses=list(d.buses), factor=d.factor)
            try:
                sol = solve_powerflow(self.case)
                if not sol.converged:
                    raise PowerFlowError("did not converge")
            except PowerFlowError as exc:
                self.emit(t, "collapse", reason=str(exc))
                collapsed = True
                break
            for uid in sorted(self.monitored, key=group_sort_key):
                if uid in self.in_flight:
                    continue
                self.submit_vsi(uid, self.monitored[uid], sol, t)
        self.net.run()
        self.net.commit_hooks.remove(self.on_commit)
        return ScenarioResult(self.log, collapsed, self.net.chain_hashes(), self.trajectory)


def cmd_simulate(world: World) -> ScenarioResult:
    """Run the closed loop on an initialized world; mutates its network and case."""
    runner = _Runner(world)
    result = runner.run()
    world.case = runner.case
    return result


def write_log(result: ScenarioResult, path) -> None:
    lines = [json.dumps(e, sort_keys=True) for e in result.log]
    Path(path).write_text("\n".join(lines) + "\n")


def write_trajectory(result: ScenarioResult, path) -> None:
    rows = ["t,unit,min_vsi,weak_bus"]
    rows += [f"{r['t']},{r['unit']},{r['min_vsi']!r},{r['weak_bus']}" for r in result.trajectory]
    Path(path).write_text("\n".join(rows) + "\n")


def event_sequence(result: ScenarioResult, kinds: Sequence[str]) -> list[str]:
    return [e["event"] for e in result.log if e["event"] in kinds]
