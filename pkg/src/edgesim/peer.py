"""Peers, channels and the execute-order-validate flow.

Endorsers simulate a contract against their own world state without
changing it and tag the resulting read/write sets. Clients assemble the
matching endorsements into a transaction and hand it to the ordering
service. Committers accept an ordered block once f+1 orderers delivered
identical copies, validate it, apply it and append it to the channel ledger.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .contracts import ContractRejected, simulate
from .ledger import (
    ENDORSE, Block, EndorsementPolicy, KeyRing, Transaction, WorldState, enc_str, enc_uint,
    genesis_block, hash_block, sha256, validate_block,
)
from .pbft import BlockDelivery, OrderingService, Request
from .simnet import ScenarioError, Simulator, to_ns

log = logging.getLogger(__name__)

ENDORSER = "endorser"
COMMITTER = "committer"
ORDERER = "orderer"
ROLES = (ENDORSER, COMMITTER, ORDERER)
REORDER_LIMIT = 64


class PeerError(Exception):
    pass


class ChannelError(PeerError):
    pass


class EndorsementRefused(PeerError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class DivergenceError(PeerError):
    """Endorsers returned different read/write sets for the same proposal."""


class PolicyError(PeerError):
    """The collected endorsements do not satisfy the endorsement policy."""


@dataclass(frozen=True)
class Channel:
    channel_id: str
    members: frozenset[str]
    policy_table: Mapping[str, EndorsementPolicy]
    ordering: OrderingService | None = None


@dataclass(frozen=True)
class Proposal:
    tx_id: bytes
    contract_id: str
    channel_id: str
    args: bytes
    client_node_id: str
    submit_ns: int

    @property
    def submit_time(self) -> float:
        return self.submit_ns / 1e9


@dataclass(frozen=True)
class Endorsement:
    endorser: str
    read_set: tuple[tuple[str, int], ...]
    write_set: tuple[tuple[str, bytes], ...]
    tag: bytes


# -- wire messages ----------------------------------------------------------------

@dataclass(frozen=True)
class ProposalMsg:
    proposal: Proposal
    kind: str = "Proposal"


@dataclass(frozen=True)
class EndorsementReply:
    tx_id: bytes
    endorser: str
    endorsement: Endorsement | None
    refusal: str | None = None
    kind: str = "Endorsement"


@dataclass(frozen=True)
class QueryMsg:
    query_id: int
    channel_id: str
    key: str
    kind: str = "Query"


@dataclass(frozen=True)
class QueryReply:
    query_id: int
    value: bytes | None
    version: int
    kind: str = "QueryReply"


def unsigned_tx(proposal: Proposal, read_set, write_set) -> Transaction:
    return Transaction(
        tx_id=proposal.tx_id,
        channel_id=proposal.channel_id,
        contract_id=proposal.contract_id,
        read_set=tuple(read_set),
        write_set=tuple(write_set),
        submit_ns=proposal.submit_ns,
        client_node_id=proposal.client_node_id,
    )


@dataclass
class ChannelLedger:
    channel: Channel
    blocks: list[Block] = field(default_factory=lambda: [genesis_block()])
    state: WorldState = field(default_factory=WorldState)
    reorder: dict[int, Block] = field(default_factory=dict)
    halted: bool = False
    votes: dict[tuple[int, bytes], set[str]] = field(default_factory=lambda: defaultdict(set))

    @property
    def height(self) -> int:
        return len(self.blocks)

    @property
    def head(self) -> Block:
        return self.blocks[-1]


CommitListener = Callable[[str, Transaction, bool, int], None]


class PeerNode:
    """A peer holding per-channel ledgers and world states."""

    def __init__(
        self,
        node_id: str,
        roles: Iterable[str] = (ENDORSER, COMMITTER),
        installed_contracts: Iterable[str] = (),
        keyring: KeyRing | None = None,
        block_quorum: int = 1,
    ):
        roles = frozenset(roles)
        unknown = roles - set(ROLES)
        if unknown:
            raise PeerError(f"unknown roles {sorted(unknown)}")
        self.node_id = node_id
        self.roles = roles
        self.installed_contracts = set(installed_contracts)
        self.keyring = keyring or KeyRing()
        self.block_quorum = block_quorum
        self.ledgers: dict[str, ChannelLedger] = {}
        self.commit_listeners: list[CommitListener] = []
        self.alarms: list[dict] = []
        self.guard: Callable[[Proposal, dict], str | None] | None = None

    # -- channel membership -------------------------------------------------------

    @property
    def channel_memberships(self) -> set[str]:
        return set(self.ledgers)

    def join(self, channel: Channel) -> None:
        self.ledgers[channel.channel_id] = ChannelLedger(channel)

    def ledger(self, channel_id: str) -> ChannelLedger:
        try:
            return self.ledgers[channel_id]
        except KeyError:
            raise ChannelError(f"{self.node_id} is not a member of {channel_id!r}") from None

    # -- endorsement --------------------------------------------------------------

    def endorse(self, proposal: Proposal) -> Endorsement:
        """Simulate ``proposal`` on this peer's state; the state is left untouched."""
        if ENDORSER not in self.roles:
            raise EndorsementRefused("not an endorser")
        if proposal.contract_id not in self.installed_contracts:
            raise EndorsementRefused("missing contract")
        ledger = self.ledgers.get(proposal.channel_id)
        if ledger is None:
            raise EndorsementRefused("not a member")
        if ledger.halted:
            raise EndorsementRefused("channel halted")
        if proposal.contract_id not in ledger.channel.policy_table:
            raise EndorsementRefused("contract not enabled on channel")
        try:
            ctx = simulate(proposal.contract_id, ledger.state, proposal.args)
        except ContractRejected as exc:
            raise EndorsementRefused(f"contract rejected: {exc}") from None
        if self.guard is not None:
            reason = self.guard(proposal, ledger.state)
            if reason:
                raise EndorsementRefused(reason)
        tx = unsigned_tx(proposal, ctx.read_set, ctx.write_set)
        tag = self.keyring.tag(self.node_id, ENDORSE, tx.body_digest)
        return Endorsement(self.node_id, ctx.read_set, ctx.write_set, tag)

    # -- commit -------------------------------------------------------------------

    def commit_block(self, channel_id: str, block: Block, now_ns: int = 0) -> None:
        if COMMITTER not in self.roles:
            raise PeerError(f"{self.node_id} is not a committer")
        ledger = self.ledger(channel_id)
        if ledger.halted or block.seq < ledger.height:
            return
        if block.seq > ledger.height:
            ledger.reorder.setdefault(block.seq, block)
            if len(ledger.reorder) > REORDER_LIMIT:
                raise ScenarioError(f"{self.node_id}: reorder buffer overflow on {channel_id!r}")
            return
        while not ledger.halted:
            self._commit_next(ledger, block, now_ns)
            block = ledger.reorder.pop(ledger.height, None)
            if block is None:
                break

    def _commit_next(self, ledger: ChannelLedger, block: Block, now_ns: int) -> None:
        head = ledger.head
        intact = (
            block.prev_hash == head.block_hash
            and hash_block(block.seq, block.prev_hash, block.txs) == block.block_hash
            and all(tx.channel_id == ledger.channel.channel_id for tx in block.txs)
        )
        if not intact:
            ledger.halted = True
            alarm = {"node": self.node_id, "channel": ledger.channel.channel_id,
                     "height": block.seq, "time_ns": now_ns, "reason": "chain integrity failure"}
            self.alarms.append(alarm)
            log.warning("%s halted channel %s at height %d", self.node_id, alarm["channel"], block.seq)
            return
        flags = validate_block(block, ledger.state, ledger.channel.policy_table, self.keyring)
        stored = Block(block.seq, block.prev_hash, block.txs, block.block_hash, flags)
        ledger.state.apply(stored)
        ledger.blocks.append(stored)
        for tx, valid in zip(stored.txs, flags):
            for listener in self.commit_listeners:
                listener(ledger.channel.channel_id, tx, valid, now_ns)

    def receive_block(self, src: str, delivery: BlockDelivery, now_ns: int) -> None:
        ledger = self.ledgers.get(delivery.channel_id)
        if ledger is None or COMMITTER not in self.roles:
            return
        block = delivery.block
        if block.seq < ledger.height or block.seq in ledger.reorder:
            return
        voters = ledger.votes[(block.seq, block.block_hash)]
        voters.add(src)
        if len(voters) >= self.block_quorum:
            for key in [k for k in ledger.votes if k[0] == block.seq]:
                del ledger.votes[key]
            self.commit_block(delivery.channel_id, block, now_ns)

    def query(self, channel_id: str, key: str) -> tuple[bytes | None, int]:
        state = self.ledger(channel_id).state
        return state.get(key), state.version(key)

    # -- simulator hooks ----------------------------------------------------------

    def on_message(self, sim: Simulator, src: str, msg) -> None:
        if isinstance(msg, BlockDelivery):
            self.receive_block(src, msg, sim.now_ns)
        elif isinstance(msg, ProposalMsg):
            try:
                reply = EndorsementReply(msg.proposal.tx_id, self.node_id, self.endorse(msg.proposal))
            except EndorsementRefused as exc:
                reply = EndorsementReply(msg.proposal.tx_id, self.node_id, None, exc.reason)
            sim.send(self.node_id, src, reply)
        elif isinstance(msg, QueryMsg):
            value, version = self.query(msg.channel_id, msg.key)
            sim.send(self.node_id, src, QueryReply(msg.query_id, value, version))
        else:
            self.on_other_message(sim, src, msg)

    def on_other_message(self, sim: Simulator, src: str, msg) -> None:
        log.debug("%s ignoring %r from %s", self.node_id, msg, src)

    def on_timer(self, sim: Simulator, tag) -> None:
        pass

    # -- inspection ---------------------------------------------------------------

    def ledger_digest(self, channel_id: str) -> bytes:
        return self.ledger(channel_id).head.block_hash

    def dump(self) -> dict:
        return {
            "node_id": self.node_id,
            "roles": sorted(self.roles),
            "contracts": sorted(self.installed_contracts),
            "channels": {
                cid: {
                    "members": sorted(ledger.channel.members),
                    "halted": ledger.halted,
                    "blocks": [b.to_json() for b in ledger.blocks],
                    "world_state": ledger.state.to_json(),
                }
                for cid, ledger in sorted(self.ledgers.items())
            },
            "alarms": self.alarms,
        }


class Consortium:
    """Registry of peers and channels bound to one ordering service."""

    def __init__(self, keyring: KeyRing, ordering: OrderingService | None = None):
        self.keyring = keyring
        self.ordering = ordering
        self.peers: dict[str, PeerNode] = {}
        self.channels: dict[str, Channel] = {}

    def add_peer(self, peer: PeerNode) -> PeerNode:
        if peer.node_id in self.peers:
            raise PeerError(f"duplicate peer {peer.node_id!r}")
        self.peers[peer.node_id] = peer
        return peer

    def create_channel(self, channel_id: str, members: Iterable[str],
                       policy_table: Mapping[str, EndorsementPolicy]) -> Channel:
        members = frozenset(members)
        if channel_id in self.channels:
            raise ChannelError(f"duplicate channel {channel_id!r}")
        if not members:
            raise ChannelError(f"channel {channel_id!r} needs at least one member")
        unknown = sorted(members - set(self.peers))
        if unknown:
            raise ChannelError(f"channel {channel_id!r}: unknown members {unknown}")
        for contract_id, policy in policy_table.items():
            for endorser in sorted(policy.required_endorsers):
                if endorser not in members:
                    raise ChannelError(
                        f"channel {channel_id!r}: policy for {contract_id!r} requires non-member {endorser!r}")
                if ENDORSER not in self.peers[endorser].roles:
                    raise ChannelError(
                        f"channel {channel_id!r}: {endorser!r} in policy for {contract_id!r} is not an endorser")
        channel = Channel(channel_id, members, dict(policy_table), self.ordering)
        self.channels[channel_id] = channel
        for member in sorted(members):
            self.peers[member].join(channel)
        if self.ordering is not None:
            self.ordering.register_channel(
                channel_id, [m for m in sorted(members) if COMMITTER in self.peers[m].roles])
        return channel


def assemble_transaction(proposal: Proposal, endorsements: Iterable[Endorsement],
                         policy: EndorsementPolicy, keyring: KeyRing) -> Transaction:
    """Combine matching endorsements into a transaction, failing fast on problems."""
    endorsements = sorted(endorsements, key=lambda e: e.endorser)
    if not endorsements:
        raise PolicyError("no endorsements")
    first = endorsements[0]
    for e in endorsements[1:]:
        if e.read_set != first.read_set or e.write_set != first.write_set:
            raise DivergenceError(f"endorsers {first.endorser} and {e.endorser} disagree")
    tx = unsigned_tx(proposal, first.read_set, first.write_set)
    tx = Transaction(
        tx.tx_id, tx.channel_id, tx.contract_id, tx.read_set, tx.write_set,
        tuple((e.endorser, e.tag) for e in endorsements), tx.submit_ns, tx.client_node_id,
    )
    if not policy.satisfied_by(tx, keyring):
        raise PolicyError(f"endorsements {[e.endorser for e in endorsements]} do not satisfy policy")
    return tx


@dataclass
class _Inflight:
    proposal: Proposal
    policy: EndorsementPolicy
    on_done: Callable | None
    endorsers: list[str]
    replies: dict[str, Endorsement] = field(default_factory=dict)
    refusals: dict[str, str] = field(default_factory=dict)
    tx: Transaction | None = None
    attempt: int = 0
    finished: bool = False


class TxClient:
    """Drives proposals through endorsement, ordering and commit for one node.

    ``on_done(tx_id, status, commit_ns, detail)`` fires once per invocation
    with status ``valid``, ``invalid`` or ``rejected``.
    """

    def __init__(self, owner_id: str, consortium: Consortium, local_peer: PeerNode | None = None,
                 resubmit_timeout: float = 6.0, entry_orderer: int = 0):
        self.owner_id = owner_id
        self.consortium = consortium
        self.local_peer = local_peer
        self.resubmit_ns = to_ns(resubmit_timeout)
        self.entry_orderer = entry_orderer
        self.inflight: dict[bytes, _Inflight] = {}
        self._counter = 0

    def next_tx_id(self) -> bytes:
        self._counter += 1
        return sha256(b"tx" + enc_str(self.owner_id) + enc_uint(self._counter))[:16]

    def invoke(self, sim: Simulator, channel_id: str, contract_id: str, args: bytes,
               on_done: Callable | None = None, endorsers: Iterable[str] | None = None) -> bytes:
        channel = self.consortium.channels[channel_id]
        policy = channel.policy_table[contract_id]
        proposal = Proposal(self.next_tx_id(), contract_id, channel_id, args, self.owner_id, sim.now_ns)
        chosen = sorted(endorsers if endorsers is not None else policy.required_endorsers)
        job = _Inflight(proposal, policy, on_done, chosen)
        self.inflight[proposal.tx_id] = job
        for endorser in chosen:
            if self.local_peer is not None and endorser == self.local_peer.node_id:
                try:
                    reply = EndorsementReply(proposal.tx_id, endorser, self.local_peer.endorse(proposal))
                except EndorsementRefused as exc:
                    reply = EndorsementReply(proposal.tx_id, endorser, None, exc.reason)
                self.on_reply(sim, reply)
            else:
                sim.send(self.owner_id, endorser, ProposalMsg(proposal))
        return proposal.tx_id

    def on_reply(self, sim: Simulator, reply: EndorsementReply) -> None:
        job = self.inflight.get(reply.tx_id)
        if job is None or job.tx is not None or job.finished:
            return
        if reply.endorsement is None:
            job.refusals[reply.endorser] = reply.refusal or "refused"
        else:
            job.replies[reply.endorser] = reply.endorsement
        outstanding = len(job.endorsers) - len(job.replies) - len(job.refusals)
        if len(job.replies) >= job.policy.threshold:
            try:
                tx = assemble_transaction(job.proposal, job.replies.values(), job.policy, self.consortium.keyring)
            except PeerError as exc:
                self._finish(job, "rejected", sim.now_ns, str(exc))
                return
            job.tx = tx
            ordering = self.consortium.ordering
            sim.send(self.owner_id, ordering.names[self.entry_orderer % ordering.n], Request(tx))
            sim.set_timer(self.owner_id, self.resubmit_ns, ("resubmit", tx.tx_id), ns=True)
        elif len(job.replies) + outstanding < job.policy.threshold:
            self._finish(job, "rejected", sim.now_ns, "; ".join(f"{k}: {v}" for k, v in sorted(job.refusals.items())))

    def on_resubmit(self, sim: Simulator, tx_id: bytes) -> None:
        job = self.inflight.get(tx_id)
        if job is None or job.finished or job.tx is None:
            return
        job.attempt += 1
        ordering = self.consortium.ordering
        sim.broadcast(self.owner_id, ordering.names, Request(job.tx))
        sim.set_timer(self.owner_id, self.resubmit_ns * 2 ** job.attempt, ("resubmit", tx_id), ns=True)

    def on_commit(self, channel_id: str, tx: Transaction, valid: bool, now_ns: int) -> None:
        job = self.inflight.get(tx.tx_id)
        if job is not None and not job.finished:
            self._finish(job, "valid" if valid else "invalid", now_ns, None)

    def _finish(self, job: _Inflight, status: str, now_ns: int, detail: str | None) -> None:
        job.finished = True
        del self.inflight[job.proposal.tx_id]
        if job.on_done is not None:
            job.on_done(job.proposal.tx_id, status, now_ns, detail)


class ClientPeer(PeerNode):
    """A peer that also submits transactions through its own :class:`TxClient`."""

    def __init__(self, node_id: str, consortium: Consortium, roles: Iterable[str] = (ENDORSER, COMMITTER),
                 installed_contracts: Iterable[str] = (), block_quorum: int = 1,
                 resubmit_timeout: float = 6.0):
        super().__init__(node_id, roles, installed_contracts, consortium.keyring, block_quorum)
        self.consortium = consortium
        self.client = TxClient(node_id, consortium, self, resubmit_timeout)
        self.commit_listeners.append(self.client.on_commit)

    def on_other_message(self, sim: Simulator, src: str, msg) -> None:
        if isinstance(msg, EndorsementReply):
            self.client.on_reply(sim, msg)
        else:
            super().on_other_message(sim, src, msg)

    def on_timer(self, sim: Simulator, tag) -> None:
        if isinstance(tag, tuple) and tag[0] == "resubmit":
            self.client.on_resubmit(sim, tag[1])
