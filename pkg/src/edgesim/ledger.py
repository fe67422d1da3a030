"""Hash-chained block store, versioned world state and block validation.

Everything that gets hashed goes through one canonical, length-prefixed
encoding: unsigned integers are 8-byte big-endian, strings and byte
strings carry a 4-byte big-endian length, and sequences carry a 4-byte
count. Fields are encoded in declaration order.
"""
from __future__ import annotations

import hashlib
import hmac
import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

DIGEST_SIZE = 32
TX_ID_SIZE = 16
ZERO_HASH = bytes(DIGEST_SIZE)

_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class LedgerError(Exception):
    """Raised when a ledger operation is called outside its contract."""


# -- canonical encoding -------------------------------------------------------

def enc_uint(value: int) -> bytes:
    return _U64.pack(value)


def enc_bytes(value: bytes) -> bytes:
    return _U32.pack(len(value)) + value


def enc_str(value: str) -> bytes:
    return enc_bytes(value.encode("utf-8"))


def enc_seq(items: Iterable[bytes]) -> bytes:
    items = list(items)
    return _U32.pack(len(items)) + b"".join(items)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# -- authenticated tags -------------------------------------------------------

class KeyRing:
    """Per-node secrets used to produce and check authenticated tags.

    Tags stand in for signatures: a node can only tag with its own secret,
    and anyone holding the ring can check a tag by table lookup.
    """

    def __init__(self, seed: int = 0):
        self._seed = seed
        self._secrets: dict[str, bytes] = {}

    def secret(self, node_id: str) -> bytes:
        key = self._secrets.get(node_id)
        if key is None:
            key = sha256(b"edgesim-key" + enc_uint(self._seed) + enc_str(node_id))
            self._secrets[node_id] = key
        return key

    def tag(self, node_id: str, purpose: bytes, digest: bytes) -> bytes:
        return hmac.new(self.secret(node_id), purpose + digest, hashlib.sha256).digest()

    def verify(self, node_id: str, purpose: bytes, digest: bytes, tag: bytes) -> bool:
        return hmac.compare_digest(self.tag(node_id, purpose, digest), tag)


ENDORSE = b"endorse:"


# -- domain types -------------------------------------------------------------

@dataclass(frozen=True)
class Transaction:
    """An endorsed transaction.

    ``submit_ns`` is simulation time in integer nanoseconds; read and write
    sets are kept sorted by key so that identical simulations produce
    byte-identical transactions.
    """

    tx_id: bytes
    channel_id: str
    contract_id: str
    read_set: tuple[tuple[str, int], ...] = ()
    write_set: tuple[tuple[str, bytes], ...] = ()
    endorsements: tuple[tuple[str, bytes], ...] = ()
    submit_ns: int = 0
    client_node_id: str = ""

    def __post_init__(self):
        if len(self.tx_id) != TX_ID_SIZE:
            raise LedgerError(f"tx_id must be {TX_ID_SIZE} bytes")
        if len({k for k, _ in self.read_set}) != len(self.read_set):
            raise LedgerError("read_set keys must be distinct")
        if len({k for k, _ in self.write_set}) != len(self.write_set):
            raise LedgerError("write_set keys must be distinct")
        if len({e for e, _ in self.endorsements}) != len(self.endorsements):
            raise LedgerError("endorsements must reference distinct endorsers")
        if any(v < 0 for _, v in self.read_set):
            raise LedgerError("read versions must be non-negative")

    @property
    def submit_time(self) -> float:
        return self.submit_ns / 1e9

    def _rw_bytes(self) -> tuple[bytes, bytes]:
        reads = enc_seq(enc_str(k) + enc_uint(v) for k, v in self.read_set)
        writes = enc_seq(enc_str(k) + enc_bytes(v) for k, v in self.write_set)
        return reads, writes

    @cached_property
    def body_digest(self) -> bytes:
        """Digest of everything except the endorsements; what endorsers tag."""
        reads, writes = self._rw_bytes()
        return sha256(
            enc_bytes(self.tx_id) + enc_str(self.channel_id) + enc_str(self.contract_id)
            + reads + writes + enc_uint(self.submit_ns) + enc_str(self.client_node_id)
        )

    @cached_property
    def encoded(self) -> bytes:
        reads, writes = self._rw_bytes()
        endorsements = enc_seq(enc_str(n) + enc_bytes(t) for n, t in self.endorsements)
        return (
            enc_bytes(self.tx_id) + enc_str(self.channel_id) + enc_str(self.contract_id)
            + reads + writes + endorsements + enc_uint(self.submit_ns)
            + enc_str(self.client_node_id)
        )

    def to_json(self) -> dict:
        return {
            "tx_id": self.tx_id.hex(),
            "channel_id": self.channel_id,
            "contract_id": self.contract_id,
            "read_set": [[k, v] for k, v in self.read_set],
            "write_set": [[k, v.hex()] for k, v in self.write_set],
            "endorsements": [[n, t.hex()] for n, t in self.endorsements],
            "submit_ns": self.submit_ns,
            "client_node_id": self.client_node_id,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "Transaction":
        return cls(
            tx_id=bytes.fromhex(data["tx_id"]),
            channel_id=data["channel_id"],
            contract_id=data["contract_id"],
            read_set=tuple((k, int(v)) for k, v in data["read_set"]),
            write_set=tuple((k, bytes.fromhex(v)) for k, v in data["write_set"]),
            endorsements=tuple((n, bytes.fromhex(t)) for n, t in data["endorsements"]),
            submit_ns=int(data["submit_ns"]),
            client_node_id=data["client_node_id"],
        )


def hash_block(seq: int, prev_hash: bytes, txs: Sequence[Transaction]) -> bytes:
    if len(prev_hash) != DIGEST_SIZE:
        raise LedgerError("prev_hash must be 32 bytes")
    return sha256(enc_uint(seq) + enc_bytes(prev_hash) + enc_seq(enc_bytes(tx.encoded) for tx in txs))


@dataclass
class Block:
    seq: int
    prev_hash: bytes
    txs: tuple[Transaction, ...]
    block_hash: bytes
    validity: list[bool] | None = None

    @classmethod
    def build(cls, seq: int, prev_hash: bytes, txs: Sequence[Transaction]) -> "Block":
        txs = tuple(txs)
        return cls(seq, prev_hash, txs, hash_block(seq, prev_hash, txs))

    @property
    def validated(self) -> bool:
        return self.validity is not None and len(self.validity) == len(self.txs)

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "prev_hash": self.prev_hash.hex(),
            "block_hash": self.block_hash.hex(),
            "validity": self.validity,
            "txs": [tx.to_json() for tx in self.txs],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "Block":
        return cls(
            seq=int(data["seq"]),
            prev_hash=bytes.fromhex(data["prev_hash"]),
            txs=tuple(Transaction.from_json(t) for t in data["txs"]),
            block_hash=bytes.fromhex(data["block_hash"]),
            validity=None if data.get("validity") is None else list(data["validity"]),
        )


def genesis_block() -> Block:
    return Block.build(0, ZERO_HASH, ())


def verify_chain(blocks: Sequence[Block]) -> int | None:
    """Return the first height whose block breaks the chain, or None if intact."""
    expected_prev = ZERO_HASH
    for height, block in enumerate(blocks):
        if block.seq != height or block.prev_hash != expected_prev:
            return height
        if len(block.prev_hash) != DIGEST_SIZE:
            return height
        try:
            digest = hash_block(block.seq, block.prev_hash, block.txs)
        except LedgerError:
            return height
        if digest != block.block_hash:
            return height
        expected_prev = block.block_hash
    return None


def ledger_dump(blocks: Sequence[Block]) -> str:
    """One JSON object per block, newline separated."""
    return "".join(json.dumps(b.to_json(), sort_keys=True) + "\n" for b in blocks)


def ledger_load(text: str) -> list[Block]:
    return [Block.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]


def chain_digest(blocks: Sequence[Block]) -> bytes:
    return blocks[-1].block_hash if blocks else ZERO_HASH


# -- world state --------------------------------------------------------------

class WorldState:
    """Flat key -> (value, version) map.

    A key's version counts the committed valid writes to it; absent keys
    read as version 0.
    """

    def __init__(self, entries: Mapping[str, tuple[bytes, int]] | None = None):
        self.entries: dict[str, tuple[bytes, int]] = dict(entries or {})

    def get(self, key: str) -> bytes | None:
        entry = self.entries.get(key)
        return None if entry is None else entry[0]

    def version(self, key: str) -> int:
        entry = self.entries.get(key)
        return 0 if entry is None else entry[1]

    def copy(self) -> "WorldState":
        return WorldState(self.entries)

    def keys(self, prefix: str = "") -> list[str]:
        return sorted(k for k in self.entries if k.startswith(prefix))

    def apply(self, block: Block) -> None:
        """Apply a validated block in place."""
        if not block.validated:
            raise LedgerError(f"block {block.seq} has not been validated")
        entries = self.entries
        for tx, valid in zip(block.txs, block.validity):
            if not valid:
                continue
            for key, value in tx.write_set:
                old = entries.get(key)
                entries[key] = (value, (old[1] if old else 0) + 1)

    def digest(self) -> bytes:
        return sha256(enc_seq(
            enc_str(k) + enc_bytes(v) + enc_uint(ver)
            for k, (v, ver) in sorted(self.entries.items())
        ))

    def to_json(self) -> dict:
        return {k: [v.hex(), ver] for k, (v, ver) in sorted(self.entries.items())}

    @classmethod
    def from_json(cls, data: Mapping) -> "WorldState":
        return cls({k: (bytes.fromhex(v), int(ver)) for k, (v, ver) in data.items()})

    def __eq__(self, other):
        return isinstance(other, WorldState) and self.entries == other.entries

    def __repr__(self):
        return f"WorldState({len(self.entries)} keys)"


@dataclass(frozen=True)
class EndorsementPolicy:
    required_endorsers: frozenset[str]
    threshold: int = field(default=1)

    def __post_init__(self):
        object.__setattr__(self, "required_endorsers", frozenset(self.required_endorsers))
        if self.threshold < 1:
            raise LedgerError("policy threshold must be >= 1")
        if self.threshold > len(self.required_endorsers):
            raise LedgerError("policy threshold exceeds the number of required endorsers")

    def satisfied_by(self, tx: Transaction, keyring: KeyRing) -> bool:
        good = 0
        digest = tx.body_digest
        for node_id, tag in tx.endorsements:
            if node_id in self.required_endorsers and keyring.verify(node_id, ENDORSE, digest, tag):
                good += 1
        return good >= self.threshold

    def to_json(self) -> dict:
        return {"endorsers": sorted(self.required_endorsers), "threshold": self.threshold}


# -- validation ---------------------------------------------------------------

def validate_block(
    block: Block,
    world_state: WorldState,
    policy_table: Mapping[str, EndorsementPolicy],
    keyring: KeyRing,
) -> list[bool]:
    """Validity flag per transaction: endorsement policy plus serial MVCC.

    Writes of earlier valid transactions in the same block are visible to
    the version checks of later ones. ``world_state`` is not modified.
    """
    overlay: dict[str, int] = {}
    flags = []
    for tx in block.txs:
        policy = policy_table.get(tx.contract_id)
        ok = policy is not None and policy.satisfied_by(tx, keyring)
        if ok:
            for key, version in tx.read_set:
                current = overlay[key] if key in overlay else world_state.version(key)
                if current != version:
                    ok = False
                    break
        if ok:
            for key, _ in tx.write_set:
                overlay[key] = (overlay[key] if key in overlay else world_state.version(key)) + 1
        flags.append(ok)
    return flags


def apply_block(world_state: WorldState, block: Block) -> WorldState:
    """Pure variant of :meth:`WorldState.apply`."""
    new = world_state.copy()
    new.apply(block)
    return new
