"""Simulated permissioned ledger: channels as shards, committee endorsement,
a single block-cutting orderer and read/write-set validation.

Everything runs on a discrete-event clock measured in logical milliseconds.
Peers are single FIFO servers shared by endorsement and block validation, so
saturation emerges from the cost model rather than being imposed.
"""
from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

HASH_ALGORITHM = "sha256"
MAINCHAIN = "mainchain"
SHARD = "shard"

VALID = "valid"
PENDING = "pending"
MVCC_CONFLICT = "invalid(mvcc-conflict)"
ENDORSEMENT_FAILURE = "invalid(endorsement)"
DROPPED = "invalid(dropped)"
CONTRACT_FAILURE = "invalid(contract)"


class NetworkConfigError(ValueError):
    pass


class LedgerError(RuntimeError):
    pass


class ContractError(RuntimeError):
    """Raised by contract logic to reject an invocation during endorsement."""


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


class JsonText(str):
    """A contract result that is already canonical JSON, so it is not re-encoded."""


def digest(text: str) -> str:
    return hashlib.new(HASH_ALGORITHM, text.encode()).hexdigest()


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class CostModel:
    base_ms: float = 0.5
    per_op_ms: float = 2.0
    validate_ms: float = 0.8
    block_ms: float = 0.5
    order_ms: float = 0.02
    worker_contention: float = 0.05

    def endorsement_ms(self, units: float, workers: int = 1) -> float:
        return (self.base_ms + self.per_op_ms * units) * (1.0 + self.worker_contention * (workers - 1))


@dataclass(frozen=True)
class OrdererConfig:
    batch_size: int = 50
    batch_timeout_ms: float = 100.0
    queue_bound: int = 10_000


@dataclass(frozen=True)
class EndorsementPolicy:
    """``all`` members, a ``majority-orgs`` quorum, or ``n-of`` members."""
    kind: str = "all"
    n: int = 0

    def __post_init__(self):
        if self.kind not in ("all", "majority-orgs", "n-of"):
            raise NetworkConfigError(f"unknown endorsement policy {self.kind!r}")
        if self.kind == "n-of" and self.n < 1:
            raise NetworkConfigError("n-of policy needs n >= 1")


@dataclass(frozen=True)
class NetworkConfig:
    name: str
    peers: tuple[tuple[str, str], ...]              # (peer id, org id)
    shards: Mapping[str, tuple[str, ...]]           # shard id -> committee
    group_shard: Mapping[str, str]                  # group id -> shard id or mainchain
    mainchain_policy: EndorsementPolicy = EndorsementPolicy("majority-orgs")
    shard_policy: EndorsementPolicy = EndorsementPolicy("all")
    cost: CostModel = CostModel()
    orderer: OrdererConfig = OrdererConfig()

    @property
    def peer_ids(self) -> tuple[str, ...]:
        return tuple(p for p, _ in self.peers)

    def channel_of_group(self, group_id: str) -> str:
        if "+" in group_id:
            return MAINCHAIN
        try:
            return self.group_shard[group_id]
        except KeyError:
            raise NetworkConfigError(f"group {group_id} is assigned to no shard") from None


def _policy(doc) -> EndorsementPolicy:
    if isinstance(doc, str):
        return EndorsementPolicy(doc)
    return EndorsementPolicy(doc.get("type", "all"), int(doc.get("n", 0)))


def parse_network_config(doc: Mapping) -> NetworkConfig:
    try:
        peers = tuple((str(p["id"]), str(p["org"])) for p in doc["peers"])
        shards = {str(k): tuple(map(str, v)) for k, v in doc.get("shards", {}).items()}
        group_shard = {str(k): str(v) for k, v in doc.get("group_shard", {}).items()}
        policies = doc.get("policies", {})
        cfg = NetworkConfig(
            name=str(doc.get("name", "network")),
            peers=peers,
            shards=shards,
            group_shard=group_shard,
            mainchain_policy=_policy(policies.get("mainchain", "majority-orgs")),
            shard_policy=_policy(policies.get("shard", "all")),
            cost=CostModel(**doc.get("cost", {})),
            orderer=OrdererConfig(**doc.get("orderer", {})),
        )
    except (KeyError, TypeError) as exc:
        raise NetworkConfigError(f"malformed network config: {exc}") from exc
    ids = cfg.peer_ids
    if not ids or len(set(ids)) != len(ids):
        raise NetworkConfigError("peer ids must be nonempty and unique")
    for sid, committee in shards.items():
        if sid == MAINCHAIN:
            raise NetworkConfigError("shard id 'mainchain' is reserved")
        if not committee:
            raise NetworkConfigError(f"shard {sid}: empty committee")
        unknown = set(committee) - set(ids)
        if unknown:
            raise NetworkConfigError(f"shard {sid}: unknown peers {sorted(unknown)}")
    for gid, sid in group_shard.items():
        if sid != MAINCHAIN and sid not in shards:
            raise NetworkConfigError(f"group {gid}: unknown shard {sid}")
    return cfg


def load_network_config(path) -> NetworkConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise NetworkConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return parse_network_config(doc)


# --------------------------------------------------------------------------
# state

Version = tuple[int, int]


class WorldState:
    """Versioned key-value store; a version is (block number, tx index)."""

    def __init__(self):
        self._data: dict[str, tuple[str, Version]] = {}
        self.digest = digest("")

    def get(self, key: str) -> tuple[str, Version] | None:
        return self._data.get(key)

    def value(self, key: str) -> str | None:
        item = self._data.get(key)
        return None if item is None else item[0]

    def version(self, key: str) -> Version | None:
        item = self._data.get(key)
        return None if item is None else item[1]

    def apply(self, writes: Iterable[tuple[str, str]], version: Version) -> None:
        for key, value in writes:
            self._data[key] = (value, version)

    def chain_digest(self, block_number: int, applied: list) -> None:
        self.digest = digest(self.digest + canonical_json([block_number, applied]))

    def keys(self) -> list[str]:
        return sorted(self._data)

    def to_bytes(self) -> bytes:
        return canonical_json([[k, v, list(ver)] for k, (v, ver) in sorted(self._data.items())]).encode()

    def __len__(self):
        return len(self._data)


@dataclass
class TxRecord:
    tx_id: str
    channel: str
    contract: str
    op: str
    payload: str
    reads: tuple = ()
    writes: tuple = ()
    endorsements: tuple = ()
    result: Any = None
    cost_units: float = 0.0
    submitted: float = 0.0
    endorsed: float | None = None
    ordered: float | None = None
    committed: float | None = None
    status: str = PENDING
    reason: str = ""

    def content(self) -> dict:
        return {"tx_id": self.tx_id, "channel": self.channel, "contract": self.contract, "op": self.op,
                "payload": self.payload, "reads": [[k, list(v) if v else None] for k, v in self.reads],
                "writes": [list(w) for w in self.writes],
                "endorsements": [list(e) for e in self.endorsements],
                "result": self.result, "status": self.status}

    def to_dict(self) -> dict:
        out = self.content()
        out.update(submitted=self.submitted, endorsed=self.endorsed, ordered=self.ordered,
                   committed=self.committed, reason=self.reason, cost_units=self.cost_units)
        return out


@dataclass
class Block:
    number: int
    channel: str
    previous_hash: str
    transactions: list[TxRecord]
    header: dict = field(default_factory=dict)
    hash: str = ""

    def content_hash(self) -> str:
        body = {"number": self.number, "channel": self.channel, "previous_hash": self.previous_hash,
                "header": self.header, "transactions": [tx.content() for tx in self.transactions]}
        return digest(canonical_json(body))

    def to_dict(self) -> dict:
        return {"number": self.number, "channel": self.channel, "previous_hash": self.previous_hash,
                "header": self.header, "hash": self.hash,
                "transactions": [tx.to_dict() for tx in self.transactions]}


# --------------------------------------------------------------------------
# contracts

class TxContext:
    """What contract logic sees while executing on one peer."""

    def __init__(self, tx_id: str, channel: str, state: WorldState, mainchain: WorldState | None,
                 payload: str = "null"):
        self.tx_id = tx_id
        self.payload = payload
        self.channel = channel
        self._state = state
        self._mainchain = mainchain
        self.reads: dict[str, Version | None] = {}
        self.writes: dict[str, str] = {}
        self.units = 0.0

    def get(self, key: str) -> str | None:
        if key in self.writes:
            return self.writes[key]
        item = self._state.get(key)
        if key not in self.reads:
            self.reads[key] = None if item is None else item[1]
        return None if item is None else item[0]

    def put(self, key: str, value: str) -> None:
        if not isinstance(value, str):
            raise ContractError(f"value for {key} must be a string")
        self.writes[key] = value

    def get_global(self, key: str) -> str | None:
        """Read-only view of mainchain state; not part of the MVCC read set."""
        if self._mainchain is None:
            raise ContractError("peer holds no mainchain state")
        if self._mainchain is self._state:
            return self.get(key)
        return self._mainchain.value(key)

    def charge(self, units: float) -> None:
        self.units += units


class Contract:
    name = "contract"

    def invoke(self, ctx: TxContext, op: str, args: Any) -> Any:
        raise NotImplementedError


# --------------------------------------------------------------------------
# network

@dataclass
class Peer:
    id: str
    org: str
    channels: set[str] = field(default_factory=set)
    states: dict[str, WorldState] = field(default_factory=dict)
    queue: deque = field(default_factory=deque)
    busy: bool = False
    busy_ms: float = 0.0
    faulty: bool = False
    state_log: dict[str, list[tuple[int, str]]] = field(default_factory=dict)


@dataclass
class Channel:
    id: str
    kind: str
    members: tuple[str, ...]
    policy: EndorsementPolicy
    contracts: dict[str, Contract] = field(default_factory=dict)
    blocks: list[Block] = field(default_factory=list)
    state: WorldState = field(default_factory=WorldState)
    pending: deque = field(default_factory=deque)      # (enqueue time, tx)
    in_flight: int = 0
    next_block: int = 1


@dataclass
class _EndorseJob:
    tx: TxRecord
    args: Any
    outstanding: int
    responses: list = field(default_factory=list)


class Network:
    """Discrete-event execute-order-validate ledger."""

    def __init__(self, config: NetworkConfig, wall_clock: bool = False, audit_replication: bool = False):
        self.config = config
        self.wall_clock = wall_clock
        self.audit_replication = audit_replication
        self.now = 0.0
        self.workers = 1
        self._events: list = []
        self._seq = itertools.count()
        self._tx_seq = itertools.count()
        self._orderer_free = 0.0
        self.transactions: dict[str, TxRecord] = {}
        self.commit_hooks: list[Callable[[TxRecord], None]] = []
        self.replica_states: list[tuple[str, int, str, bytes]] = []
        self.peers = {pid: Peer(pid, org) for pid, org in config.peers}
        self.channels: dict[str, Channel] = {}
        self._add_channel(MAINCHAIN, MAINCHAIN, config.peer_ids, config.mainchain_policy)
        for sid, committee in sorted(config.shards.items()):
            self._add_channel(sid, SHARD, committee, config.shard_policy)

    def _add_channel(self, cid, kind, members, policy):
        ch = Channel(cid, kind, tuple(members), policy)
        genesis = Block(0, cid, "0" * 64, [], header={
            "hash_algorithm": HASH_ALGORITHM, "kind": kind, "members": list(members),
            "policy": {"type": policy.kind, "n": policy.n},
            "orderer": {"batch_size": self.config.orderer.batch_size,
                        "batch_timeout_ms": self.config.orderer.batch_timeout_ms}})
        genesis.hash = genesis.content_hash()
        ch.blocks.append(genesis)
        for pid in members:
            peer = self.peers[pid]
            peer.channels.add(cid)
            peer.states[cid] = WorldState()
            peer.state_log[cid] = []
        self.channels[cid] = ch

    # ---- contracts and queries

    def deploy_contract(self, channel: str, contract: Contract) -> None:
        ch = self._channel(channel)
        if contract.name in ch.contracts:
            raise LedgerError(f"contract {contract.name} already deployed on {channel}")
        ch.contracts[contract.name] = contract

    def _channel(self, cid: str) -> Channel:
        try:
            return self.channels[cid]
        except KeyError:
            raise LedgerError(f"unknown channel {cid}") from None

    def query_state(self, channel: str, key: str) -> str | None:
        ch = self._channel(channel)
        return self.peers[ch.members[0]].states[channel].value(key)

    def committed_blocks(self, channel: str) -> list[Block]:
        return list(self._channel(channel).blocks)

    # ---- event loop

    def _at(self, t: float, fn: Callable, *args) -> None:
        heapq.heappush(self._events, (t, next(self._seq), fn, args))

    def run(self, until: float | None = None) -> None:
        """Process events up to ``until`` (inclusive), or until idle."""
        while self._events:
            t = self._events[0][0]
            if until is not None and t > until:
                break
            _, _, fn, args = heapq.heappop(self._events)
            self.now = max(self.now, t)
            fn(*args)
        if until is not None:
            self.now = max(self.now, until)

    @property
    def idle(self) -> bool:
        return not self._events

    # ---- submission and endorsement

    def endorsers(self, ch: Channel, seq: int) -> tuple[str, ...]:
        pol = ch.policy
        if pol.kind == "all":
            return ch.members
        if pol.kind == "n-of":
            if pol.n > len(ch.members):
                raise LedgerError(f"{ch.id}: policy needs {pol.n} endorsers, channel has {len(ch.members)}")
            k = seq % len(ch.members)
            rot = ch.members[k:] + ch.members[:k]
            return tuple(sorted(rot[:pol.n]))
        orgs: dict[str, list[str]] = {}
        for pid in ch.members:
            orgs.setdefault(self.peers[pid].org, []).append(pid)
        names = sorted(orgs)
        need = len(names) // 2 + 1
        k = seq % len(names)
        chosen = (names[k:] + names[:k])[:need]
        return tuple(sorted(orgs[o][(seq // len(names)) % len(orgs[o])] for o in chosen))

    def required_endorsements(self, ch: Channel) -> int:
        if ch.policy.kind == "all":
            return len(ch.members)
        if ch.policy.kind == "n-of":
            return ch.policy.n
        return len({self.peers[p].org for p in ch.members}) // 2 + 1

    def submit_tx(self, channel: str, contract: str, op: str, args: Any = None,
                  at: float | None = None) -> str:
        ch = self._channel(channel)
        if contract not in ch.contracts:
            raise LedgerError(f"contract {contract} is not deployed on {channel}")
        at = self.now if at is None else at
        if at < self.now:
            raise LedgerError(f"submission at {at} precedes the clock ({self.now})")
        if isinstance(args, JsonText):
            payload, args = args, json.loads(args)
        else:
            payload = canonical_json(args)
        seq = next(self._tx_seq)
        tx = TxRecord(tx_id=f"tx{seq:07d}", channel=channel, contract=contract, op=op,
                      payload=payload, submitted=at)
        self.transactions[tx.tx_id] = tx
        self._at(at, self._arrive, tx, args, seq)
        return tx.tx_id

    def _arrive(self, tx: TxRecord, args, seq: int) -> None:
        ch = self.channels[tx.channel]
        if ch.in_flight >= self.config.orderer.queue_bound:
            self._finish(tx, DROPPED, "queue bound reached")
            return
        ch.in_flight += 1
        endorsers = self.endorsers(ch, seq)
        job = _EndorseJob(tx, args, len(endorsers))
        for pid in endorsers:
            self._enqueue(self.peers[pid], ("endorse", job))

    def _enqueue(self, peer: Peer, task) -> None:
        peer.queue.append(task)
        if not peer.busy:
            self._start_next(peer)

    def _start_next(self, peer: Peer) -> None:
        if not peer.queue:
            peer.busy = False
            return
        peer.busy = True
        kind, item = peer.queue.popleft()
        if kind == "endorse":
            cost = self._endorse_on(peer, item)
        else:
            cost = self._validate_on(peer, item)
        peer.busy_ms += cost
        self._at(self.now + cost, self._task_done, peer, kind, item)

    def _task_done(self, peer: Peer, kind: str, item) -> None:
        if kind == "endorse":
            item.outstanding -= 1
            if item.outstanding == 0:
                self._endorsed(item)
        else:
            self._peer_committed(peer, item)
        self._start_next(peer)

    def _endorse_on(self, peer: Peer, job: _EndorseJob) -> float:
        tx = job.tx
        ch = self.channels[tx.channel]
        ctx = TxContext(tx.tx_id, tx.channel, peer.states[tx.channel], peer.states.get(MAINCHAIN),
                        tx.payload)
        t0 = time.perf_counter()
        try:
            result = ch.contracts[tx.contract].invoke(ctx, tx.op, job.args)
            error = None
        except ContractError as exc:
            result, error = None, str(exc)
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        reads = tuple(sorted(ctx.reads.items()))
        writes = tuple(sorted(ctx.writes.items()))
        if not isinstance(result, JsonText):
            result = JsonText(canonical_json(result))
        rw = canonical_json([[k, list(v) if v else None] for k, v in reads] + [list(w) for w in writes]
                            + [error])
        d = digest(rw + result + ("#faulty" + peer.id if peer.faulty else ""))
        job.responses.append((peer.id, d, reads, writes, result, error, ctx.units))
        if self.wall_clock:
            return self.config.cost.base_ms + elapsed_ms
        return self.config.cost.endorsement_ms(ctx.units, self.workers)

    def _endorsed(self, job: _EndorseJob) -> None:
        tx = job.tx
        ch = self.channels[tx.channel]
        tx.endorsed = self.now
        responses = sorted(job.responses)
        tx.endorsements = tuple((pid, d) for pid, d, *_ in responses)
        _, _, reads, writes, result, error, units = responses[0]
        tx.reads, tx.writes, tx.cost_units = reads, writes, units
        tx.result = json.loads(result)
        if error is not None:
            self._finish(tx, CONTRACT_FAILURE, error)
            ch.in_flight -= 1
            return
        if len({d for _, d in tx.endorsements}) != 1 or len(tx.endorsements) < self.required_endorsements(ch):
            self._finish(tx, ENDORSEMENT_FAILURE, "endorsement digests differ")
            ch.in_flight -= 1
            return
        ch.pending.append((self.now, tx))
        if len(ch.pending) == 1:
            self._at(self.now + self.config.orderer.batch_timeout_ms, self._timer, ch.id)
        if len(ch.pending) >= self.config.orderer.batch_size:
            self._deliver(self.cut_block(ch.id, self.now))

    # ---- ordering

    def cut_block(self, channel: str, now: float) -> Block | None:
        """Cut a block when the batch is full or the oldest tx has waited out the timeout."""
        ch = self._channel(channel)
        cfg = self.config.orderer
        if not ch.pending:
            return None
        if len(ch.pending) < cfg.batch_size and ch.pending[0][0] + cfg.batch_timeout_ms > now:
            return None
        batch = [ch.pending.popleft()[1] for _ in range(min(cfg.batch_size, len(ch.pending)))]
        block = Block(ch.next_block, ch.id, "", batch)
        ch.next_block += 1
        if ch.pending:
            self._at(ch.pending[0][0] + cfg.batch_timeout_ms, self._timer, ch.id)
        return block

    def _timer(self, channel: str) -> None:
        block = self.cut_block(channel, self.now)
        if block is not None:
            self._deliver(block)
        else:
            ch = self.channels[channel]
            if ch.pending and ch.pending[0][0] + self.config.orderer.batch_timeout_ms > self.now:
                self._at(ch.pending[0][0] + self.config.orderer.batch_timeout_ms, self._timer, channel)

    def _deliver(self, block: Block) -> None:
        start = max(self.now, self._orderer_free)
        ready = start + self.config.cost.order_ms * len(block.transactions)
        self._orderer_free = ready
        for tx in block.transactions:
            tx.ordered = self.now
        self._at(ready, self._validate_block, block)

    # ---- validation and commit

    def _validate(self, state: WorldState, block: Block) -> list[str]:
        statuses = []
        written: set[str] = set()
        for idx, tx in enumerate(block.transactions):
            ok = all(state.version(k) == (tuple(v) if v else None) for k, v in tx.reads)
            ok = ok and not any(k in written for k, _ in tx.writes)
            if ok:
                statuses.append(VALID)
                written.update(k for k, _ in tx.writes)
                state.apply(tx.writes, (block.number, idx))
            else:
                statuses.append(MVCC_CONFLICT)
        return statuses

    def validate_and_commit(self, block: Block) -> list[str]:
        """Canonical validation of an ordered block; appends it to the chain."""
        ch = self.channels[block.channel]
        if block.number != len(ch.blocks):
            raise LedgerError(f"{ch.id}: block {block.number} out of order")
        statuses = self._validate(ch.state, block)
        for tx, st in zip(block.transactions, statuses):
            tx.status = st
            if st != VALID:
                tx.reason = "read set or write key superseded within the block or by an earlier block"
        block.previous_hash = ch.blocks[-1].hash
        block.hash = block.content_hash()
        ch.blocks.append(block)
        return statuses

    def _validate_block(self, block: Block) -> None:
        ch = self.channels[block.channel]
        statuses = self.validate_and_commit(block)
        job = {"block": block, "statuses": statuses, "outstanding": len(ch.members)}
        for pid in ch.members:
            self._enqueue(self.peers[pid], ("validate", job))

    def _validate_on(self, peer: Peer, job) -> float:
        block = job["block"]
        state = peer.states[block.channel]
        statuses = self._validate(state, block)
        if statuses != job["statuses"]:
            raise LedgerError(f"peer {peer.id} diverged on {block.channel} block {block.number}")
        applied = [[tx.tx_id, list(tx.writes)] for tx, st in zip(block.transactions, statuses) if st == VALID]
        state.chain_digest(block.number, applied)
        peer.state_log[block.channel].append((block.number, state.digest))
        if self.audit_replication:
            self.replica_states.append((block.channel, block.number, peer.id, state.to_bytes()))
        cost = self.config.cost
        return cost.block_ms + cost.validate_ms * len(block.transactions)

    def _peer_committed(self, peer: Peer, job) -> None:
        job["outstanding"] -= 1
        if job["outstanding"]:
            return
        ch = self.channels[job["block"].channel]
        for tx in job["block"].transactions:
            ch.in_flight -= 1
            self._finish(tx, tx.status, tx.reason)

    def _finish(self, tx: TxRecord, status: str, reason: str = "") -> None:
        tx.status = status
        tx.reason = reason
        tx.committed = self.now
        for hook in self.commit_hooks:
            hook(tx)

    # ---- audit

    def verify_chain(self, channel: str) -> tuple[bool, int | None]:
        return verify_blocks(self._channel(channel).blocks)

    def chain_hashes(self) -> dict[str, str]:
        return {cid: ch.blocks[-1].hash for cid, ch in sorted(self.channels.items())}

    def export_jsonl(self, path) -> int:
        lines = [canonical_json(b.to_dict()) for cid in sorted(self.channels)
                 for b in self.channels[cid].blocks]
        Path(path).write_text("\n".join(lines) + "\n")
        return len(lines)


def verify_blocks(blocks: list[Block]) -> tuple[bool, int | None]:
    """True when every hash and previous-hash link checks; otherwise the first bad block."""
    prev = None
    for block in blocks:
        if block.hash != block.content_hash():
            return False, block.number
        if prev is not None and block.previous_hash != prev.hash:
            return False, block.number
        prev = block
    return True, None


def _block_from_dict(doc: Mapping) -> Block:
    txs = []
    for t in doc["transactions"]:
        txs.append(TxRecord(
            tx_id=t["tx_id"], channel=t["channel"], contract=t["contract"], op=t["op"],
            payload=t["payload"], reads=tuple((k, tuple(v) if v else None) for k, v in t["reads"]),
            writes=tuple(tuple(w) for w in t["writes"]),
            endorsements=tuple(tuple(e) for e in t["endorsements"]),
            result=t["result"], status=t["status"]))
    return Block(doc["number"], doc["channel"], doc["previous_hash"], txs, doc["header"], doc["hash"])


def verify_export(path) -> dict[str, tuple[bool, int | None]]:
    """Re-verify a JSON-lines ledger dump per channel."""
    chains: dict[str, list[Block]] = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            block = _block_from_dict(json.loads(line))
            chains.setdefault(block.channel, []).append(block)
    return {cid: verify_blocks(blocks) for cid, blocks in sorted(chains.items())}


def capacity_tps(config: NetworkConfig, units: float, workers: int = 1) -> float:
    """Analytic saturation bound for a shard-local workload spread evenly over the
    channels that host groups: each committee peer serves endorse + validate per tx."""
    hosts = sorted(set(config.group_shard.values())) or [MAINCHAIN]
    cost = config.cost
    per_tx = cost.endorsement_ms(units, workers) + cost.validate_ms
    total = 0.0
    for cid in hosts:
        members = config.peer_ids if cid == MAINCHAIN else config.shards[cid]
        policy = config.mainchain_policy if cid == MAINCHAIN else config.shard_policy
        if policy.kind == "all":
            endorse = len(members)
        elif policy.kind == "n-of":
            endorse = policy.n
        else:
            endorse = len({org for pid, org in config.peers if pid in members}) // 2 + 1
        busiest = endorse / len(members) * cost.endorsement_ms(units, workers) + cost.validate_ms
        total += 1000.0 / busiest
    return total if math.isfinite(total) else 0.0
