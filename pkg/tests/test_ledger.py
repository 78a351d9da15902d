import copy
import json
from collections import defaultdict

import pytest
from hypothesis import given, settings, strategies as st

from dvschain.ledger import (CONTRACT_FAILURE, DROPPED, ENDORSEMENT_FAILURE, MAINCHAIN, MVCC_CONFLICT, VALID,
                             Block, Contract, ContractError, LedgerError, Network, NetworkConfigError,
                             TxRecord, capacity_tps, parse_network_config, verify_blocks, verify_export)


class KV(Contract):
    """Toy key-value contract: blind writes, read-modify-write increments and failures."""
    name = "kv"

    def invoke(self, ctx, op, args):
        if op == "set":
            ctx.put(args["key"], str(args["value"]))
            ctx.charge(1)
            return args["value"]
        if op == "incr":
            n = int(ctx.get(args["key"]) or 0) + 1
            ctx.put(args["key"], str(n))
            ctx.charge(1)
            return n
        if op == "fail":
            raise ContractError("refused")
        raise ContractError(f"unknown op {op}")


def config(peers=4, orgs=2, shards=None, policy="all", **orderer):
    doc = {
        "name": "t",
        "peers": [{"id": f"p{i}", "org": f"o{i % orgs}"} for i in range(peers)],
        "shards": shards or {},
        "group_shard": {},
        "policies": {"mainchain": policy, "shard": "all"},
        "orderer": orderer,
    }
    return parse_network_config(doc)


def network(channel=MAINCHAIN, audit=False, **kw):
    net = Network(config(**kw), audit_replication=audit)
    net.deploy_contract(channel, KV())
    return net


def test_same_key_writes_in_one_block_invalidate_exactly_one():
    net = network()
    a = net.submit_tx(MAINCHAIN, "kv", "set", {"key": "k", "value": 1})
    b = net.submit_tx(MAINCHAIN, "kv", "set", {"key": "k", "value": 2})
    net.run()
    blocks = net.committed_blocks(MAINCHAIN)
    assert len(blocks) == 2 and len(blocks[1].transactions) == 2
    statuses = sorted(net.transactions[t].status for t in (a, b))
    assert statuses == sorted([VALID, MVCC_CONFLICT])
    assert net.query_state(MAINCHAIN, "k") == "1"


def test_read_modify_write_race_loses_one_update():
    net = network()
    ids = [net.submit_tx(MAINCHAIN, "kv", "incr", {"key": "n"}) for _ in range(2)]
    net.run()
    assert [net.transactions[t].status for t in ids].count(VALID) == 1
    assert net.query_state(MAINCHAIN, "n") == "1"


def test_stale_read_across_blocks_is_invalid():
    # the second increment endorses against the pre-first state but commits one block later
    net = network(batch_size=1)
    first = net.submit_tx(MAINCHAIN, "kv", "incr", {"key": "n"})
    second = net.submit_tx(MAINCHAIN, "kv", "incr", {"key": "n"})
    net.run()
    assert net.transactions[first].status == VALID
    assert net.transactions[second].status == MVCC_CONFLICT
    assert len(net.committed_blocks(MAINCHAIN)) == 3


def test_sequential_increments_all_commit():
    net = network()
    for i in range(5):
        net.submit_tx(MAINCHAIN, "kv", "incr", {"key": "n"}, at=i * 1000.0)
    net.run()
    assert net.query_state(MAINCHAIN, "n") == "5"
    assert all(tx.status == VALID for tx in net.transactions.values())


def test_replicas_hold_identical_bytes_after_every_block():
    shards = {"s1": ["p0", "p1", "p2"], "s2": ["p3", "p4", "p5"]}
    net = Network(config(peers=6, orgs=3, shards=shards), audit_replication=True)
    for ch in ("s1", "s2", MAINCHAIN):
        net.deploy_contract(ch, KV())
    for i in range(120):
        ch = ("s1", "s2", MAINCHAIN)[i % 3]
        op = "incr" if i % 2 else "set"
        net.submit_tx(ch, "kv", op, {"key": f"k{i % 7}", "value": i}, at=i * 3.0)
    net.run()
    seen = defaultdict(dict)
    for channel, number, peer, state in net.replica_states:
        seen[(channel, number)][peer] = state
    assert len(seen) == sum(len(net.committed_blocks(c)) - 1 for c in net.channels)
    for (channel, _), states in seen.items():
        assert set(states) == set(net.channels[channel].members)
        assert len(set(states.values())) == 1
    for ch in net.channels.values():
        logs = {tuple(net.peers[p].state_log[ch.id]) for p in ch.members}
        assert len(logs) == 1


def _committed_chain():
    net = network(batch_size=3)
    for i in range(10):
        net.submit_tx(MAINCHAIN, "kv", "set", {"key": f"k{i % 4}", "value": i}, at=i * 50.0)
    net.run()
    return net, net.committed_blocks(MAINCHAIN)


def test_untouched_chain_verifies():
    net, blocks = _committed_chain()
    assert net.verify_chain(MAINCHAIN) == (True, None)
    assert len(blocks) > 3


def _mutations(block: Block):
    """Every single-value tamper site in a block, as (description, mutator)."""
    sites = [("header", lambda b: b.header.__setitem__("forged", True)),
             ("previous_hash", lambda b: setattr(b, "previous_hash", "f" * 64))]
    for i, tx in enumerate(block.transactions):
        sites.append((f"payload {i}", lambda b, i=i: setattr(b.transactions[i], "payload", b.transactions[i].payload + " ")))
        sites.append((f"status {i}", lambda b, i=i: setattr(b.transactions[i], "status", "invalid(x)"
                                                             if b.transactions[i].status == VALID else VALID)))
        sites.append((f"result {i}", lambda b, i=i: setattr(b.transactions[i], "result", "forged")))
        for j, (k, v) in enumerate(tx.writes):
            sites.append((f"write {i}.{j}", lambda b, i=i, j=j: setattr(
                b.transactions[i], "writes",
                tuple((kk, vv + "0" if n == j else vv) for n, (kk, vv) in enumerate(b.transactions[i].writes)))))
    return sites


@settings(max_examples=60, deadline=None)
@given(data=st.data())
def test_any_single_mutation_is_detected(data):
    _, blocks = _committed_chain()
    blocks = copy.deepcopy(blocks)
    target = data.draw(st.integers(0, len(blocks) - 1), label="block")
    sites = _mutations(blocks[target])
    label, mutate = sites[data.draw(st.integers(0, len(sites) - 1), label="site")]
    mutate(blocks[target])
    ok, bad = verify_blocks(blocks)
    assert not ok, label
    assert bad == target


def test_mutated_export_is_detected(tmp_path):
    net, _ = _committed_chain()
    path = tmp_path / "ledger.jsonl"
    assert net.export_jsonl(path) == sum(len(c.blocks) for c in net.channels.values())
    assert verify_export(path) == {MAINCHAIN: (True, None)}
    lines = path.read_text().splitlines()
    doc = json.loads(lines[2])
    doc["transactions"][0]["writes"][0][1] = "999"
    lines[2] = json.dumps(doc)
    path.write_text("\n".join(lines) + "\n")
    assert verify_export(path) == {MAINCHAIN: (False, 2)}


def test_hash_chain_links_blocks():
    _, blocks = _committed_chain()
    for prev, block in zip(blocks, blocks[1:]):
        assert block.previous_hash == prev.hash
        assert len(block.hash) == 64


def test_batch_size_cuts_full_blocks():
    net = network(batch_size=5)
    for _ in range(12):
        net.submit_tx(MAINCHAIN, "kv", "incr", {"key": "x"})
    net.run()
    assert [len(b.transactions) for b in net.committed_blocks(MAINCHAIN)[1:]] == [5, 5, 2]


def test_batch_timeout_cuts_a_partial_block():
    net = network(batch_size=50, batch_timeout_ms=100.0)
    tx = net.submit_tx(MAINCHAIN, "kv", "set", {"key": "a", "value": 1})
    net.run()
    rec = net.transactions[tx]
    assert rec.ordered == pytest.approx(rec.endorsed + 100.0)
    assert len(net.committed_blocks(MAINCHAIN)) == 2


def test_queue_bound_drops_excess():
    net = network(queue_bound=2)
    ids = [net.submit_tx(MAINCHAIN, "kv", "set", {"key": f"k{i}", "value": i}) for i in range(5)]
    net.run()
    statuses = [net.transactions[t].status for t in ids]
    assert statuses.count(DROPPED) == 3
    assert statuses.count(VALID) == 2


def test_contract_error_marks_tx_invalid():
    net = network()
    tx = net.submit_tx(MAINCHAIN, "kv", "fail", {})
    net.run()
    assert net.transactions[tx].status == CONTRACT_FAILURE
    assert len(net.committed_blocks(MAINCHAIN)) == 1


def test_divergent_endorser_fails_policy():
    net = network()
    net.peers["p1"].faulty = True
    tx = net.submit_tx(MAINCHAIN, "kv", "set", {"key": "a", "value": 1})
    net.run()
    assert net.transactions[tx].status == ENDORSEMENT_FAILURE
    assert net.query_state(MAINCHAIN, "a") is None


def test_majority_orgs_policy_selects_one_peer_per_org():
    net = network(peers=6, orgs=3, policy="majority-orgs")
    ch = net.channels[MAINCHAIN]
    for seq in range(6):
        chosen = net.endorsers(ch, seq)
        assert len(chosen) == 2
        assert len({net.peers[p].org for p in chosen}) == 2


def test_n_of_policy_larger_than_channel_is_rejected():
    net = Network(config(policy={"type": "n-of", "n": 9}))
    net.deploy_contract(MAINCHAIN, KV())
    net.submit_tx(MAINCHAIN, "kv", "set", {"key": "a", "value": 1})
    with pytest.raises(LedgerError):
        net.run()


@pytest.mark.parametrize("doc", [
    {"peers": []},
    {"peers": [{"id": "a", "org": "x"}, {"id": "a", "org": "x"}]},
    {"peers": [{"id": "a", "org": "x"}], "shards": {"s": ["b"]}},
    {"peers": [{"id": "a", "org": "x"}], "shards": {"mainchain": ["a"]}},
    {"peers": [{"id": "a", "org": "x"}], "group_shard": {"1": "nowhere"}},
    {"peers": [{"id": "a", "org": "x"}], "policies": {"shard": "some"}},
])
def test_bad_network_configs_are_rejected(doc):
    with pytest.raises(NetworkConfigError):
        parse_network_config(doc)


def test_unknown_contract_or_channel_is_an_error():
    net = network()
    with pytest.raises(LedgerError):
        net.submit_tx(MAINCHAIN, "nope", "set", {})
    with pytest.raises(LedgerError):
        net.submit_tx("ghost", "kv", "set", {})
    with pytest.raises(LedgerError):
        net.deploy_contract(MAINCHAIN, KV())


def test_submission_in_the_past_is_rejected():
    net = network()
    net.run(until=50.0)
    with pytest.raises(LedgerError):
        net.submit_tx(MAINCHAIN, "kv", "set", {"key": "a", "value": 1}, at=10.0)


def test_replay_is_deterministic():
    a, _ = _committed_chain()
    b, _ = _committed_chain()
    assert a.chain_hashes() == b.chain_hashes()
    assert [tx.to_dict() for tx in a.transactions.values()] == [tx.to_dict() for tx in b.transactions.values()]


def test_capacity_grows_with_shards(network_configs):
    caps = {n: capacity_tps(c, units=1.0) for n, c in network_configs.items()}
    assert caps["noshard"] < caps["shard2"] < caps["shard3"]


def test_tx_record_content_excludes_timing():
    tx = TxRecord("t", MAINCHAIN, "kv", "set", "{}")
    later = TxRecord("t", MAINCHAIN, "kv", "set", "{}", submitted=5.0, committed=9.0)
    assert tx.content() == later.content()
