import random

import pytest
from hypothesis import given, settings, strategies as st

from edgesim.catalog import scaffold
from edgesim.contracts import encode_args
from edgesim.ledger import Block, EndorsementPolicy, KeyRing, genesis_block
from edgesim.peer import (
    COMMITTER, ENDORSER, ChannelError, Consortium, DivergenceError, Endorsement, EndorsementRefused, PeerNode,
    PolicyError, Proposal, assemble_transaction,
)
from edgesim.scenario import build_world, load_config, run_scenario, stage_end_time
from edgesim.simnet import ScenarioError

from helpers import sequential_oracle


def consortium(n=3, contracts=("kv",)):
    kr = KeyRing(7)
    cons = Consortium(kr)
    for i in range(n):
        cons.add_peer(PeerNode(f"p{i}", (ENDORSER, COMMITTER), contracts, kr))
    return cons


def proposal(args, channel="ch", i=1, contract="kv"):
    return Proposal(i.to_bytes(16, "big"), contract, channel, encode_args(args), "p0", 1000)


KV2 = {"kv": EndorsementPolicy(frozenset({"p0", "p1"}), 2)}


class TestChannels:
    def test_two_member_channel_privacy_of_genesis(self):
        cons = consortium()
        cons.create_channel("ch", ["p0", "p1"], KV2)
        assert cons.peers["p0"].ledger("ch").height == 1
        assert cons.peers["p1"].ledger("ch").head.block_hash == genesis_block().block_hash
        assert "ch" not in cons.peers["p2"].ledgers
        with pytest.raises(ChannelError):
            cons.peers["p2"].ledger("ch")

    def test_single_member_channel(self):
        cons = consortium()
        cons.create_channel("solo", ["p2"], {"kv": EndorsementPolicy(frozenset({"p2"}), 1)})
        assert cons.peers["p2"].channel_memberships == {"solo"}

    def test_policy_outside_membership(self):
        cons = consortium()
        with pytest.raises(ChannelError, match="non-member"):
            cons.create_channel("ch", ["p0"], KV2)

    def test_duplicate_channel(self):
        cons = consortium()
        cons.create_channel("ch", ["p0", "p1"], KV2)
        with pytest.raises(ChannelError, match="duplicate"):
            cons.create_channel("ch", ["p0", "p1"], KV2)

    def test_policy_endorser_needs_role(self):
        kr = KeyRing(1)
        cons = Consortium(kr)
        cons.add_peer(PeerNode("a", (COMMITTER,), (), kr))
        with pytest.raises(ChannelError, match="not an endorser"):
            cons.create_channel("ch", ["a"], {"kv": EndorsementPolicy(frozenset({"a"}), 1)})

    def test_empty_membership(self):
        with pytest.raises(ChannelError):
            consortium().create_channel("ch", [], {})


class TestEndorsement:
    def setup_method(self):
        self.cons = consortium()
        self.cons.create_channel("ch", ["p0", "p1"], KV2)
        self.p0, self.p1, self.p2 = (self.cons.peers[f"p{i}"] for i in range(3))

    def test_identical_state_identical_rw_sets(self):
        prop = proposal({"op": "put", "key": "a", "value": 5})
        e0, e1 = self.p0.endorse(prop), self.p1.endorse(prop)
        assert (e0.read_set, e0.write_set) == (e1.read_set, e1.write_set) == ((("a", 0),), (("a", b"5"),))
        assert e0.tag != e1.tag

    def test_missing_contract(self):
        kr = self.cons.keyring
        bare = self.cons.add_peer(PeerNode("bare", (ENDORSER, COMMITTER), (), kr))
        self.cons.create_channel("ch2", ["bare", "p0"], {"kv": EndorsementPolicy(frozenset({"p0"}), 1)})
        with pytest.raises(EndorsementRefused, match="missing contract"):
            bare.endorse(proposal({"op": "get", "key": "a"}, channel="ch2"))

    def test_not_a_member(self):
        with pytest.raises(EndorsementRefused, match="not a member"):
            self.p2.endorse(proposal({"op": "get", "key": "a"}))

    def test_contract_rejection(self):
        with pytest.raises(EndorsementRefused, match="contract rejected"):
            self.p0.endorse(proposal({"op": "explode", "key": "a"}))

    def test_endorsement_leaves_state_untouched(self):
        ledger = self.p0.ledger("ch")
        before = ledger.state.digest()
        self.p0.endorse(proposal({"op": "put", "key": "a", "value": 1}))
        assert ledger.state.digest() == before


class TestAssembly:
    def setup_method(self):
        self.cons = consortium()
        self.cons.create_channel("ch", ["p0", "p1"], KV2)
        self.prop = proposal({"op": "put", "key": "a", "value": 1})
        self.e = [self.cons.peers[p].endorse(self.prop) for p in ("p0", "p1")]

    def test_two_matching_under_two_of_two(self):
        tx = assemble_transaction(self.prop, self.e, KV2["kv"], self.cons.keyring)
        assert [n for n, _ in tx.endorsements] == ["p0", "p1"]
        assert tx.submit_ns == self.prop.submit_ns

    def test_one_endorsement_is_policy_error(self):
        with pytest.raises(PolicyError):
            assemble_transaction(self.prop, self.e[:1], KV2["kv"], self.cons.keyring)

    def test_divergent_write_sets(self):
        forged = Endorsement("p1", self.e[1].read_set, (("a", b"other"),), self.e[1].tag)
        with pytest.raises(DivergenceError):
            assemble_transaction(self.prop, [self.e[0], forged], KV2["kv"], self.cons.keyring)

    def test_bad_tag_is_policy_error(self):
        forged = Endorsement("p1", self.e[1].read_set, self.e[1].write_set, bytes(32))
        with pytest.raises(PolicyError):
            assemble_transaction(self.prop, [self.e[0], forged], KV2["kv"], self.cons.keyring)


def _signed_blocks(cons, channel, count, rng):
    """A valid block stream for ``channel`` built from real endorsements."""
    from edgesim.peer import assemble_transaction as assemble
    policy = cons.channels[channel].policy_table["kv"]
    endorsers = sorted(policy.required_endorsers)
    blocks = [genesis_block()]
    n = 0
    for _ in range(count):
        txs = []
        for _ in range(rng.randint(1, 3)):
            n += 1
            prop = Proposal(n.to_bytes(16, "big") if channel == "a" else (10 ** 6 + n).to_bytes(16, "big"),
                            "kv", channel, encode_args({"op": "put", "key": f"k{rng.randint(0, 2)}", "value": n}),
                            "client", n)
            es = [cons.peers[e].endorse(prop) for e in endorsers]
            txs.append(assemble(prop, es, policy, cons.keyring))
        blocks.append(Block.build(len(blocks), blocks[-1].block_hash, txs))
    return blocks[1:]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32))
def test_commit_order_permutations_converge(seed):
    rng = random.Random(seed)
    cons = consortium(4)
    cons.create_channel("a", ["p0", "p1", "p2"], {"kv": EndorsementPolicy(frozenset({"p0"}), 1)})
    cons.create_channel("b", ["p1", "p2", "p3"], {"kv": EndorsementPolicy(frozenset({"p3"}), 1)})
    stream = [("a", b) for b in _signed_blocks(cons, "a", 6, rng)] + \
             [("b", b) for b in _signed_blocks(cons, "b", 6, rng)]
    for peer in ("p1", "p2"):
        order = list(stream)
        rng.shuffle(order)
        for channel, block in order:
            cons.peers[peer].commit_block(channel, block)
    for channel in ("a", "b"):
        l1, l2 = cons.peers["p1"].ledger(channel), cons.peers["p2"].ledger(channel)
        assert l1.height == l2.height == 7
        assert l1.head.block_hash == l2.head.block_hash
        assert l1.state == l2.state
        assert [b.validity for b in l1.blocks] == [b.validity for b in l2.blocks]


class TestCommit:
    def setup_method(self):
        self.cons = consortium()
        self.cons.create_channel("a", ["p0", "p1"], {"kv": EndorsementPolicy(frozenset({"p0"}), 1)})
        self.blocks = _signed_blocks(self.cons, "a", 4, random.Random(1))
        self.peer = self.cons.peers["p1"]

    def test_gap_is_buffered_then_applied(self):
        self.peer.commit_block("a", self.blocks[1])
        assert self.peer.ledger("a").height == 1 and 2 in self.peer.ledger("a").reorder
        self.peer.commit_block("a", self.blocks[0])
        assert self.peer.ledger("a").height == 3

    def test_tampered_block_halts_channel(self):
        bad = Block(1, self.blocks[0].prev_hash, self.blocks[1].txs, self.blocks[0].block_hash)
        self.peer.commit_block("a", bad, now_ns=5)
        ledger = self.peer.ledger("a")
        assert ledger.halted and ledger.height == 1
        assert self.peer.alarms[0]["height"] == 1
        self.peer.commit_block("a", self.blocks[0])
        assert ledger.height == 1

    def test_reorder_overflow_is_fatal(self):
        ghost = genesis_block().block_hash
        with pytest.raises(ScenarioError):
            for seq in range(2, 2 + 66):
                self.peer.commit_block("a", Block(seq, ghost, (), ghost))

    def test_commit_events_carry_time(self):
        seen = []
        self.peer.commit_listeners.append(lambda c, tx, ok, t: seen.append((c, ok, t)))
        self.peer.commit_block("a", self.blocks[0], now_ns=99)
        assert seen and all(c == "a" and t == 99 for c, _, t in seen)

    def test_non_member_cannot_commit(self):
        with pytest.raises(ChannelError):
            self.cons.peers["p2"].commit_block("a", self.blocks[0])


def test_end_to_end_flags_match_sequential_oracle():
    cfg = load_config(scaffold("fault_free"))
    world = build_world(cfg)
    world.sim.run_until(stage_end_time(cfg, world))
    policies = world.consortium.channels["bench"].policy_table
    for name in ("peer0", "peer1", "peer2"):
        ledger = world.peers[name].ledger("bench")
        txs = [tx for b in ledger.blocks for tx in b.txs]
        flags = [f for b in ledger.blocks for f in (b.validity or [])]
        want, state = sequential_oracle(txs, {}, world.consortium.keyring, policies)
        assert flags == want
        assert ledger.state.entries == state
        assert any(flags) and not all(flags)


def test_orderer_role_on_peers_changes_nothing():
    base = scaffold("fault_free")
    with_role = scaffold("fault_free")
    for node in with_role["nodes"]:
        node["roles"] = node["roles"] + ["orderer"]
    a = run_scenario(load_config(base))
    b = run_scenario(load_config(with_role))
    assert a.summary_csv == b.summary_csv
    assert a.stages[0].trace_jsonl == b.stages[0].trace_jsonl
