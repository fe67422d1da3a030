import hashlib
import random
import struct

import pytest
from hypothesis import given, settings, strategies as st

from edgesim.ledger import (
    ZERO_HASH, Block, EndorsementPolicy, KeyRing, LedgerError, Transaction, WorldState, apply_block,
    genesis_block, hash_block, ledger_dump, ledger_load, validate_block, verify_chain,
)

from helpers import POLICIES, build_chain, endorsed, mutate_block, random_tx, sequential_oracle, tx_id


def u32(n):
    return struct.pack(">I", n)


def u64(n):
    return struct.pack(">Q", n)


def lp(b):
    return u32(len(b)) + b


class TestCanonicalEncoding:
    def test_transaction_bytes_match_hand_layout(self):
        tx = Transaction(
            tx_id=bytes(range(16)), channel_id="ch", contract_id="kv",
            read_set=(("a", 3),), write_set=(("b", b"\x01\x02"),),
            endorsements=(("p0", b"\xff" * 4),), submit_ns=7, client_node_id="c",
        )
        expected = (
            lp(bytes(range(16))) + lp(b"ch") + lp(b"kv")
            + u32(1) + lp(b"a") + u64(3)
            + u32(1) + lp(b"b") + lp(b"\x01\x02")
            + u32(1) + lp(b"p0") + lp(b"\xff" * 4)
            + u64(7) + lp(b"c")
        )
        assert tx.encoded == expected

    def test_block_hash_matches_hand_layout(self):
        tx = Transaction(tx_id=bytes(16), channel_id="x", contract_id="kv")
        prev = bytes([9]) * 32
        expected = hashlib.sha256(u64(5) + lp(prev) + u32(1) + lp(tx.encoded)).digest()
        assert hash_block(5, prev, [tx]) == expected

    def test_genesis(self):
        g = genesis_block()
        assert g.seq == 0 and g.prev_hash == ZERO_HASH and g.txs == ()
        assert g.block_hash == hashlib.sha256(u64(0) + lp(ZERO_HASH) + u32(0)).digest()

    def test_endorsements_not_part_of_body_digest(self):
        kr = KeyRing(1)
        tx = Transaction(tx_id=tx_id(1), channel_id="ch", contract_id="kv", write_set=(("k", b"v"),))
        assert endorsed(kr, tx, ["alice"]).body_digest == tx.body_digest
        assert endorsed(kr, tx, ["alice"]).encoded != tx.encoded

    def test_json_round_trip(self):
        rng = random.Random(3)
        chain = build_chain(rng, KeyRing(3), 6)
        again = ledger_load(ledger_dump(chain))
        assert [b.block_hash for b in again] == [b.block_hash for b in chain]
        assert verify_chain(again) is None


class TestTransactionInvariants:
    def test_duplicate_read_keys_rejected(self):
        with pytest.raises(LedgerError):
            Transaction(tx_id=tx_id(1), channel_id="c", contract_id="kv", read_set=(("a", 0), ("a", 1)))

    def test_duplicate_endorsers_rejected(self):
        with pytest.raises(LedgerError):
            Transaction(tx_id=tx_id(1), channel_id="c", contract_id="kv",
                        endorsements=(("p", b"1"), ("p", b"2")))

    def test_tx_id_length(self):
        with pytest.raises(LedgerError):
            Transaction(tx_id=b"short", channel_id="c", contract_id="kv")


class TestValidation:
    def setup_method(self):
        self.kr = KeyRing(11)

    def _tx(self, i, reads=(), writes=(), endorsers=("alice",)):
        tx = Transaction(tx_id=tx_id(i), channel_id="ch", contract_id="kv",
                         read_set=tuple(reads), write_set=tuple(writes))
        return endorsed(self.kr, tx, endorsers)

    def test_later_tx_sees_earlier_write_in_same_block(self):
        t1 = self._tx(1, reads=[("a", 0)], writes=[("a", b"1")])
        t2 = self._tx(2, reads=[("a", 0)], writes=[("a", b"2")])
        t3 = self._tx(3, reads=[("a", 1)], writes=[("a", b"3")])
        block = Block.build(1, genesis_block().block_hash, [t1, t2, t3])
        assert validate_block(block, WorldState(), POLICIES, self.kr) == [True, False, True]

    def test_policy_failure(self):
        t = self._tx(1, writes=[("a", b"1")], endorsers=("mallory",))
        block = Block.build(1, ZERO_HASH, [t])
        assert validate_block(block, WorldState(), POLICIES, self.kr) == [False]

    def test_threshold_two(self):
        policies = {"kv": EndorsementPolicy(frozenset({"alice", "bob"}), 2)}
        one = self._tx(1, writes=[("a", b"1")], endorsers=("alice",))
        two = self._tx(2, writes=[("a", b"1")], endorsers=("alice", "bob"))
        block = Block.build(1, ZERO_HASH, [one, two])
        assert validate_block(block, WorldState(), policies, self.kr) == [False, True]

    def test_validate_does_not_mutate_state(self):
        state = WorldState({"a": (b"x", 1)})
        before = state.digest()
        block = Block.build(1, ZERO_HASH, [self._tx(1, reads=[("a", 1)], writes=[("a", b"y")])])
        validate_block(block, state, POLICIES, self.kr)
        assert state.digest() == before

    def test_apply_requires_validation(self):
        block = Block.build(1, ZERO_HASH, [self._tx(1, writes=[("a", b"y")])])
        with pytest.raises(LedgerError):
            WorldState().apply(block)

    def test_apply_skips_invalid_and_bumps_versions(self):
        t1 = self._tx(1, writes=[("a", b"1"), ("b", b"1")])
        t2 = self._tx(2, reads=[("a", 5)], writes=[("a", b"2")])
        block = Block.build(1, ZERO_HASH, [t1, t2])
        block.validity = validate_block(block, WorldState(), POLICIES, self.kr)
        state = apply_block(WorldState(), block)
        assert state.entries == {"a": (b"1", 1), "b": (b"1", 1)}

    def test_policy_threshold_bounds(self):
        with pytest.raises(LedgerError):
            EndorsementPolicy(frozenset({"a"}), 2)
        with pytest.raises(LedgerError):
            EndorsementPolicy(frozenset({"a"}), 0)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2 ** 32), n=st.integers(0, 20), preload=st.booleans())
def test_mvcc_matches_sequential_oracle(seed, n, preload):
    rng = random.Random(seed)
    kr = KeyRing(seed)
    start = {k: (b"init", rng.randint(1, 2)) for k in ("k0", "k2")} if preload else {}
    txs = [random_tx(rng, kr, i) for i in range(n)]
    block = Block.build(1, genesis_block().block_hash, txs)
    state = WorldState(start)
    flags = validate_block(block, state, POLICIES, kr)
    block.validity = flags
    state.apply(block)
    want_flags, want_state = sequential_oracle(txs, start, kr)
    assert flags == want_flags
    assert state.entries == want_state


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32), length=st.integers(1, 30))
def test_tamper_detected_at_or_before_mutated_block(seed, length):
    rng = random.Random(seed)
    chain = build_chain(rng, KeyRing(seed), length)
    assert verify_chain(chain) is None
    target = rng.randrange(length)
    tampered = list(chain)
    tampered[target] = mutate_block(chain[target], rng)
    height = verify_chain(tampered)
    assert height is not None and height <= target


def test_verify_chain_reports_swapped_blocks():
    rng = random.Random(5)
    chain = build_chain(rng, KeyRing(5), 5)
    swapped = [chain[0], chain[2], chain[1], chain[3], chain[4]]
    assert verify_chain(swapped) == 1


def test_empty_chain_is_intact():
    assert verify_chain([]) is None
