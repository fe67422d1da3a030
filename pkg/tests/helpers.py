"""Shared builders and independent oracles for the test suite."""
from __future__ import annotations

import copy
import random

from edgesim.ledger import (
    ENDORSE, Block, EndorsementPolicy, KeyRing, Transaction, genesis_block,
)

KEYS = ("k0", "k1", "k2", "k3", "k4")
ENDORSERS = ("alice", "bob")


def tx_id(i: int) -> bytes:
    return i.to_bytes(16, "big")


def endorsed(keyring: KeyRing, tx: Transaction, endorsers) -> Transaction:
    tags = tuple((e, keyring.tag(e, ENDORSE, tx.body_digest)) for e in sorted(endorsers))
    return Transaction(tx.tx_id, tx.channel_id, tx.contract_id, tx.read_set, tx.write_set, tags,
                       tx.submit_ns, tx.client_node_id)


def random_tx(rng: random.Random, keyring: KeyRing, i: int, max_version: int = 3) -> Transaction:
    reads = rng.sample(KEYS, rng.randint(0, 3))
    writes = rng.sample(KEYS, rng.randint(0, 3))
    tx = Transaction(
        tx_id=tx_id(i),
        channel_id="ch",
        contract_id=rng.choice(["kv", "kv", "kv", "unknown"]),
        read_set=tuple(sorted((k, rng.randint(0, max_version)) for k in reads)),
        write_set=tuple(sorted((k, rng.randbytes(rng.randint(0, 4))) for k in writes)),
        submit_ns=rng.randint(0, 10 ** 12),
        client_node_id="client",
    )
    mode = rng.random()
    if mode < 0.7:
        return endorsed(keyring, tx, [rng.choice(ENDORSERS)])
    if mode < 0.85:
        # tag from an endorser outside the policy
        return endorsed(keyring, tx, ["mallory"])
    if mode < 0.95:
        bad = endorsed(keyring, tx, ["alice"])
        return Transaction(bad.tx_id, bad.channel_id, bad.contract_id, bad.read_set, bad.write_set,
                           (("alice", bytes(32)),), bad.submit_ns, bad.client_node_id)
    return tx


POLICIES = {"kv": EndorsementPolicy(frozenset(ENDORSERS), 1)}


def sequential_oracle(txs, start: dict[str, tuple[bytes, int]], keyring: KeyRing, policies=POLICIES):
    """Re-execute transactions one at a time against a plain dict."""
    state = dict(start)
    valid = []
    for tx in txs:
        policy = policies.get(tx.contract_id)
        ok = policy is not None
        if ok:
            good = {n for n, t in tx.endorsements
                    if n in policy.required_endorsers and keyring.verify(n, ENDORSE, tx.body_digest, t)}
            ok = len(good) >= policy.threshold
        if ok:
            ok = all(state.get(k, (b"", 0))[1] == v for k, v in tx.read_set)
        if ok:
            for k, value in tx.write_set:
                state[k] = (value, state.get(k, (b"", 0))[1] + 1)
        valid.append(ok)
    return valid, state


def build_chain(rng: random.Random, keyring: KeyRing, length: int) -> list[Block]:
    chain = [genesis_block()]
    counter = 0
    for _ in range(length - 1):
        txs = []
        for _ in range(rng.randint(0, 3)):
            txs.append(random_tx(rng, keyring, counter))
            counter += 1
        chain.append(Block.build(len(chain), chain[-1].block_hash, txs))
    return chain


# -- byte-level mutation that bypasses constructors -----------------------------------------

def _tx_fields(tx: Transaction):
    """(getter, setter, kind) for every byte-carrying field of a transaction."""
    yield "tx_id", "bytes", None
    yield "channel_id", "str", None
    yield "contract_id", "str", None
    for i in range(len(tx.read_set)):
        yield "read_set", "key", i
        yield "read_set", "ver", i
    for i in range(len(tx.write_set)):
        yield "write_set", "key", i
        yield "write_set", "val", i
    for i in range(len(tx.endorsements)):
        yield "endorsements", "key", i
        yield "endorsements", "val", i
    yield "submit_ns", "u64", None
    yield "client_node_id", "str", None


def _as_bytes(value, kind) -> bytes:
    if kind in ("u64", "ver"):
        return value.to_bytes(8, "big")
    if kind in ("str", "key"):
        return value.encode()
    return value


def _from_bytes(raw: bytes, kind):
    if kind in ("u64", "ver"):
        return int.from_bytes(raw, "big")
    if kind in ("str", "key"):
        return raw.decode()
    return raw


def _flip(raw: bytes, pos: int, rng: random.Random, ascii_only: bool) -> bytes:
    delta = rng.randint(1, 0x7F) if ascii_only else rng.randint(1, 0xFF)
    return raw[:pos] + bytes([raw[pos] ^ delta]) + raw[pos + 1:]


def mutate_block(block: Block, rng: random.Random) -> Block | None:
    """Flip one uniformly chosen byte of the block's content; None if the block has no bytes."""
    slots = [("seq", None, None, 8), ("prev_hash", None, None, 32), ("block_hash", None, None, 32)]
    for t_index, tx in enumerate(block.txs):
        for name, kind, i in _tx_fields(tx):
            if kind in ("key", "ver", "val"):
                pair = getattr(tx, name)[i]
                value = pair[0] if kind == "key" else pair[1]
            else:
                value = getattr(tx, name)
            size = len(_as_bytes(value, kind))
            if size:
                slots.append((name, (t_index, kind, i), value, size))
    weights = [s[3] for s in slots]
    name, where, value, size = rng.choices(slots, weights)[0]
    pos = rng.randrange(size)
    mutated = copy.copy(block)
    if where is None:
        raw = block.seq.to_bytes(8, "big") if name == "seq" else getattr(block, name)
        raw = _flip(raw, pos, rng, False)
        setattr(mutated, name, int.from_bytes(raw, "big") if name == "seq" else raw)
        return mutated
    t_index, kind, i = where
    tx = block.txs[t_index]
    raw = _flip(_as_bytes(value, kind), pos, rng, kind in ("str", "key"))
    new_value = _from_bytes(raw, kind)
    new_tx = copy.copy(tx)
    new_tx.__dict__.pop("encoded", None)
    new_tx.__dict__.pop("body_digest", None)
    if i is None:
        object.__setattr__(new_tx, name, new_value)
    else:
        items = list(getattr(tx, name))
        k, v = items[i]
        items[i] = (new_value, v) if kind == "key" else (k, new_value)
        object.__setattr__(new_tx, name, tuple(items))
    txs = list(block.txs)
    txs[t_index] = new_tx
    mutated.txs = tuple(txs)
    return mutated
