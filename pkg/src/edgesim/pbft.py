"""PBFT ordering service.

Replicas are event-driven state machines: every entry point takes the
current time in nanoseconds and returns outbound ``(destination, message)``
pairs, where a destination of ``None`` means all other replicas. Timers are
exposed as ``Replica.timers`` (name -> absolute deadline); the host owns
scheduling and calls :meth:`Replica.on_timer` when one expires.

Normal case: the primary of view ``v`` (``v mod n``) sends PrePrepare, every
replica (the primary included) answers with Prepare, a replica is prepared
once it holds the PrePrepare plus 2f matching Prepares from backups, then
broadcasts Commit and commits locally on 2f+1 matching Commits. Batches are
delivered strictly in sequence order.
"""
from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

from .ledger import (
    Block, KeyRing, Transaction, ZERO_HASH, enc_bytes, enc_seq, enc_str, enc_uint,
    genesis_block, sha256,
)
from .simnet import Simulator, to_ns

log = logging.getLogger(__name__)

PRE_PREPARE = "PrePrepare"
PREPARE = "Prepare"
COMMIT = "Commit"
VIEW_CHANGE = "ViewChange"
NEW_VIEW = "NewView"

PBFT_TAG = b"pbft:"
BYZANTINE_BEHAVIORS = ("equivocate", "bad_digest", "silent")


class ConfigError(ValueError):
    """Invalid ordering-service configuration."""


@dataclass(frozen=True)
class BatchConfig:
    max_batch_txs: int = 50
    batch_timeout: float = 0.5

    def __post_init__(self):
        if self.max_batch_txs <= 0:
            raise ConfigError("max_batch_txs must be positive")
        if self.batch_timeout <= 0:
            raise ConfigError("batch_timeout must be positive")


@dataclass(frozen=True)
class Batch:
    channel_id: str
    txs: tuple[Transaction, ...] = ()

    @cached_property
    def digest(self) -> bytes:
        return sha256(enc_str(self.channel_id) + enc_seq(enc_bytes(tx.encoded) for tx in self.txs))

    @property
    def tx_ids(self) -> list[bytes]:
        return [tx.tx_id for tx in self.txs]


NULL_BATCH = Batch("")


@dataclass(frozen=True)
class PreparedCert:
    pre_prepare: "ProtocolMessage"
    prepares: tuple["ProtocolMessage", ...]

    @property
    def view(self) -> int:
        return self.pre_prepare.view

    @property
    def seq(self) -> int:
        return self.pre_prepare.seq

    @property
    def digest(self) -> bytes:
        return self.pre_prepare.batch_digest


@dataclass(frozen=True)
class ProtocolMessage:
    kind: str
    view: int
    seq: int
    batch_digest: bytes
    sender: int
    batch: Batch | None = None
    certs: tuple[PreparedCert, ...] = ()
    view_changes: tuple["ProtocolMessage", ...] = ()
    pre_prepares: tuple["ProtocolMessage", ...] = ()
    tag: bytes = field(default=b"", compare=False)

    @cached_property
    def signed_digest(self) -> bytes:
        extra = b""
        if self.kind == VIEW_CHANGE:
            extra = enc_seq(c.pre_prepare.tag + b"".join(p.tag for p in c.prepares) for c in self.certs)
        elif self.kind == NEW_VIEW:
            extra = enc_seq(m.tag for m in self.view_changes) + enc_seq(
                m.batch_digest + enc_uint(m.seq) for m in self.pre_prepares)
        return sha256(
            enc_str(self.kind) + enc_uint(self.view) + enc_uint(self.seq)
            + enc_bytes(self.batch_digest) + enc_uint(self.sender) + extra
        )


@dataclass(frozen=True)
class Request:
    """A client transaction handed to an orderer."""

    tx: Transaction
    kind: str = "Request"


@dataclass(frozen=True)
class BlockDelivery:
    channel_id: str
    block: Block
    orderer: str
    kind: str = "BlockDelivery"


Outbound = tuple[int | None, object]


class Replica:
    """One orderer replica's protocol state."""

    def __init__(
        self,
        replica_id: int,
        n: int,
        f: int,
        batch_config: BatchConfig | None = None,
        keyring: KeyRing | None = None,
        names: Sequence[str] | None = None,
        view_change_timeout: float = 2.0,
    ):
        if f < 0 or n != 3 * f + 1:
            raise ConfigError(f"ordering.n must equal 3f+1 (got n={n}, f={f})")
        self.replica_id = replica_id
        self.n = n
        self.f = f
        self.config = batch_config or BatchConfig()
        self.keyring = keyring or KeyRing()
        self.names = list(names) if names else [f"orderer{i}" for i in range(n)]
        self.vc_timeout_ns = to_ns(view_change_timeout)
        self.batch_timeout_ns = to_ns(self.config.batch_timeout)

        self.view = 0
        self.next_seq = 0
        self.view_changing = False
        self.vc_target: int | None = None
        self.vc_backoff = 0

        self.message_log: dict[tuple, ProtocolMessage] = {}
        self.pre_prepares: dict[tuple[int, int], ProtocolMessage] = {}
        self.prepare_votes: dict[tuple, dict[int, ProtocolMessage]] = defaultdict(dict)
        self.commit_votes: dict[tuple, set[int]] = defaultdict(set)
        self.prepared: set[tuple[int, int]] = set()
        self.commit_sent: set[tuple[int, int]] = set()
        self.committed: dict[int, Batch] = {}
        self.certs: dict[int, PreparedCert] = {}
        self.delivered: list[Batch] = []
        self.delivered_tx: set[bytes] = set()

        self.pending: dict[bytes, Transaction] = {}
        self.queues: dict[str, list[Transaction]] = {}
        self.queued: set[bytes] = set()
        self.in_batch: set[bytes] = set()
        self.forwarded: set[tuple[bytes, int]] = set()

        self.vc_log: dict[int, dict[int, ProtocolMessage]] = defaultdict(dict)
        self.new_view_sent: set[int] = set()
        self.future: list[ProtocolMessage] = []
        self.timers: dict[object, int] = {}

        self.dropped: Counter[str] = Counter()
        self.conflicts = 0
        self.pre_prepares_sent = 0
        self._now = 0

    # -- helpers --------------------------------------------------------------

    def primary(self, view: int | None = None) -> int:
        return (self.view if view is None else view) % self.n

    @property
    def is_primary(self) -> bool:
        return self.primary() == self.replica_id

    def make(self, kind: str, view: int, seq: int, digest: bytes, sender: int | None = None, **extra) -> ProtocolMessage:
        sender = self.replica_id if sender is None else sender
        msg = ProtocolMessage(kind, view, seq, digest, sender, **extra)
        tag = self.keyring.tag(self.names[sender], PBFT_TAG, msg.signed_digest)
        object.__setattr__(msg, "tag", tag)
        return msg

    def _authentic(self, msg: ProtocolMessage) -> bool:
        if not 0 <= msg.sender < self.n:
            return False
        return self.keyring.verify(self.names[msg.sender], PBFT_TAG, msg.signed_digest, msg.tag)

    def _arm_view_timer(self, now: int) -> None:
        if self.pending or self.view_changing:
            self.timers["view_change"] = now + self.vc_timeout_ns * (2 ** self.vc_backoff)
        else:
            self.timers.pop("view_change", None)

    # -- client requests and batching -----------------------------------------

    def submit_tx(self, tx: Transaction, now: int) -> list[Outbound]:
        """Accept a client transaction. Non-primaries forward it to the primary."""
        self._now = now
        if tx.tx_id in self.delivered_tx:
            return []
        self.pending.setdefault(tx.tx_id, tx)
        if "view_change" not in self.timers:
            self._arm_view_timer(now)
        if self.view_changing:
            return []
        if self.is_primary:
            return self._enqueue(tx, now)
        key = (tx.tx_id, self.view)
        if key in self.forwarded:
            return []
        self.forwarded.add(key)
        return [(self.primary(), Request(tx))]

    handle_request = submit_tx

    def _enqueue(self, tx: Transaction, now: int) -> list[Outbound]:
        if tx.tx_id in self.queued or tx.tx_id in self.in_batch or tx.tx_id in self.delivered_tx:
            return []
        queue = self.queues.setdefault(tx.channel_id, [])
        queue.append(tx)
        self.queued.add(tx.tx_id)
        if len(queue) >= self.config.max_batch_txs:
            return self._propose(tx.channel_id)
        if len(queue) == 1:
            self.timers[("batch", tx.channel_id)] = now + self.batch_timeout_ns
        return []

    def _propose(self, channel_id: str) -> list[Outbound]:
        queue = self.queues.pop(channel_id, [])
        self.timers.pop(("batch", channel_id), None)
        txs = []
        for tx in queue:
            self.queued.discard(tx.tx_id)
            if tx.tx_id not in self.delivered_tx and tx.tx_id not in self.in_batch:
                txs.append(tx)
                self.in_batch.add(tx.tx_id)
        if not txs:
            return []
        batch = Batch(channel_id, tuple(txs))
        seq = self.next_seq
        self.next_seq += 1
        msg = self.make(PRE_PREPARE, self.view, seq, batch.digest, batch=batch)
        self.pre_prepares_sent += 1
        return [(None, msg)] + self._accept_pre_prepare(msg)

    # -- normal case ----------------------------------------------------------

    def handle_message(self, msg: ProtocolMessage, now: int) -> list[Outbound]:
        self._now = now
        kind = msg.kind
        if kind == VIEW_CHANGE:
            return self._on_view_change(msg, now)
        if kind == NEW_VIEW:
            return self._on_new_view(msg, now)
        if kind not in (PRE_PREPARE, PREPARE, COMMIT) or not 0 <= msg.sender < self.n:
            self.dropped["malformed"] += 1
            return []
        if msg.view < self.view:
            self.dropped["wrong_view"] += 1
            return []
        if msg.view > self.view:
            self.future.append(msg)
            return []
        if self.view_changing:
            self.dropped["wrong_view"] += 1
            return []
        if kind == PRE_PREPARE:
            return self._on_pre_prepare(msg, now)
        if kind == PREPARE:
            return self._on_prepare(msg, now)
        return self._on_commit(msg, now)

    def _on_pre_prepare(self, msg: ProtocolMessage, now: int) -> list[Outbound]:
        if msg.sender != self.primary(msg.view) or msg.batch is None or msg.batch.digest != msg.batch_digest:
            self.dropped["malformed"] += 1
            return []
        existing = self.pre_prepares.get((msg.view, msg.seq))
        if existing is not None:
            if existing.batch_digest != msg.batch_digest:
                self.conflicts += 1
                log.debug("replica %d: conflicting PrePrepare v=%d s=%d", self.replica_id, msg.view, msg.seq)
            return []
        outs = self._accept_pre_prepare(msg)
        if "view_change" not in self.timers:
            self._arm_view_timer(now)
        return outs

    def _accept_pre_prepare(self, msg: ProtocolMessage) -> list[Outbound]:
        view, seq = msg.view, msg.seq
        self.pre_prepares[(view, seq)] = msg
        self.message_log[(PRE_PREPARE, view, seq, msg.sender)] = msg
        for tx in msg.batch.txs:
            if tx.tx_id not in self.delivered_tx:
                self.pending.setdefault(tx.tx_id, tx)
                self.in_batch.add(tx.tx_id)
        prepare = self.make(PREPARE, view, seq, msg.batch_digest)
        outs: list[Outbound] = [(None, prepare)]
        outs += self._record_prepare(prepare)
        return outs

    def _on_prepare(self, msg: ProtocolMessage, now: int) -> list[Outbound]:
        return self._record_prepare(msg)

    def _record_prepare(self, msg: ProtocolMessage) -> list[Outbound]:
        key = (PREPARE, msg.view, msg.seq, msg.sender)
        if key in self.message_log:
            return []
        self.message_log[key] = msg
        if msg.sender != self.primary(msg.view):
            self.prepare_votes[(msg.view, msg.seq, msg.batch_digest)][msg.sender] = msg
        return self._check(msg.view, msg.seq)

    def _on_commit(self, msg: ProtocolMessage, now: int) -> list[Outbound]:
        key = (COMMIT, msg.view, msg.seq, msg.sender)
        if key in self.message_log:
            return []
        self.message_log[key] = msg
        self.commit_votes[(msg.view, msg.seq, msg.batch_digest)].add(msg.sender)
        return self._check(msg.view, msg.seq)

    def _check(self, view: int, seq: int) -> list[Outbound]:
        pp = self.pre_prepares.get((view, seq))
        if pp is None:
            return []
        digest = pp.batch_digest
        outs: list[Outbound] = []
        vs = (view, seq)
        if vs not in self.prepared:
            votes = self.prepare_votes.get((view, seq, digest), {})
            if len(votes) < 2 * self.f:
                return outs
            self.prepared.add(vs)
            cert = PreparedCert(pp, tuple(votes[s] for s in sorted(votes)))
            old = self.certs.get(seq)
            if old is None or old.view < view:
                self.certs[seq] = cert
            if vs not in self.commit_sent:
                self.commit_sent.add(vs)
                commit = self.make(COMMIT, view, seq, digest)
                self.message_log[(COMMIT, view, seq, self.replica_id)] = commit
                self.commit_votes[(view, seq, digest)].add(self.replica_id)
                outs.append((None, commit))
        if seq not in self.committed and len(self.commit_votes.get((view, seq, digest), ())) >= 2 * self.f + 1:
            self.committed[seq] = pp.batch
            self._deliver_ready()
        return outs

    def _deliver_ready(self) -> None:
        progressed = False
        while len(self.delivered) in self.committed:
            batch = self.committed[len(self.delivered)]
            fresh = tuple(tx for tx in batch.txs if tx.tx_id not in self.delivered_tx)
            for tx in fresh:
                self.delivered_tx.add(tx.tx_id)
                self.pending.pop(tx.tx_id, None)
            for tx in batch.txs:
                self.in_batch.discard(tx.tx_id)
            self.delivered.append(batch if len(fresh) == len(batch.txs) else Batch(batch.channel_id, fresh))
            progressed = True
        if progressed:
            self.vc_backoff = 0
            if not self.view_changing:
                self._arm_view_timer(self._now)

    # -- timers ---------------------------------------------------------------

    def on_timer(self, name, now: int) -> list[Outbound]:
        self._now = now
        self.timers.pop(name, None)
        if name == "view_change":
            if not self.pending and not self.view_changing:
                return []
            target = (self.vc_target if self.view_changing else self.view) + 1
            return self.trigger_view_change(now, target)
        if isinstance(name, tuple) and name[0] == "batch":
            if self.is_primary and not self.view_changing:
                return self._propose(name[1])
        return []

    # -- view change ----------------------------------------------------------

    def trigger_view_change(self, now: int, target: int | None = None) -> list[Outbound]:
        """Move to view ``target`` (default: next view) and broadcast ViewChange."""
        self._now = now
        if target is None:
            target = (self.vc_target if self.view_changing else self.view) + 1
        self.view_changing = True
        self.vc_target = target
        self.vc_backoff += 1
        for name in [k for k in self.timers if isinstance(k, tuple) and k[0] == "batch"]:
            del self.timers[name]
        certs = tuple(self.certs[s] for s in sorted(self.certs))
        msg = self.make(VIEW_CHANGE, target, len(self.delivered), ZERO_HASH, certs=certs)
        self.vc_log[target][self.replica_id] = msg
        self._arm_view_timer(now)
        outs: list[Outbound] = [(None, msg)]
        outs += self._maybe_new_view(target, now)
        return outs

    def _valid_cert(self, cert: PreparedCert) -> bool:
        pp = cert.pre_prepare
        if pp.kind != PRE_PREPARE or pp.batch is None or pp.batch.digest != pp.batch_digest:
            return False
        if pp.sender != self.primary(pp.view) or not self._authentic(pp):
            return False
        senders = set()
        for p in cert.prepares:
            if (p.kind != PREPARE or p.view != pp.view or p.seq != pp.seq
                    or p.batch_digest != pp.batch_digest or p.sender == pp.sender):
                return False
            if not self._authentic(p):
                return False
            senders.add(p.sender)
        return len(senders) >= 2 * self.f

    def _valid_view_change(self, msg: ProtocolMessage) -> bool:
        return self._authentic(msg) and all(self._valid_cert(c) for c in msg.certs)

    def _on_view_change(self, msg: ProtocolMessage, now: int) -> list[Outbound]:
        target = msg.view
        if target <= self.view or msg.sender in self.vc_log.get(target, {}):
            self.dropped["wrong_view"] += 1
            return []
        if not self._valid_view_change(msg):
            self.dropped["malformed"] += 1
            return []
        self.vc_log[target][msg.sender] = msg
        outs: list[Outbound] = []
        floor = self.vc_target if self.view_changing else self.view
        higher = {s for v, senders in self.vc_log.items() if v > floor for s in senders if s != self.replica_id}
        if len(higher) >= self.f + 1:
            join = min(v for v, senders in self.vc_log.items() if v > floor and senders)
            outs += self.trigger_view_change(now, join)
        outs += self._maybe_new_view(target, now)
        return outs

    def new_view_plan(self, view: int, view_changes: Sequence[ProtocolMessage]) -> tuple[list[tuple[int, Batch]], int]:
        """Deterministic (seq, batch) list a NewView must carry, plus the next free seq."""
        low = min(vc.seq for vc in view_changes)
        best: dict[int, PreparedCert] = {}
        for vc in view_changes:
            for cert in vc.certs:
                if cert.seq >= low and (cert.seq not in best or best[cert.seq].view < cert.view):
                    best[cert.seq] = cert
        top = max(best) if best else low - 1
        plan = [(s, best[s].pre_prepare.batch if s in best else NULL_BATCH) for s in range(low, top + 1)]
        return plan, max(top + 1, low)

    def _maybe_new_view(self, target: int, now: int) -> list[Outbound]:
        if (self.primary(target) != self.replica_id or target in self.new_view_sent
                or not self.view_changing or self.vc_target != target):
            return []
        log_ = self.vc_log.get(target, {})
        if len(log_) < 2 * self.f + 1:
            return []
        chosen = tuple(log_[s] for s in sorted(log_)[: 2 * self.f + 1])
        plan, _ = self.new_view_plan(target, chosen)
        pps = tuple(self.make(PRE_PREPARE, target, s, b.digest, batch=b) for s, b in plan)
        msg = self.make(NEW_VIEW, target, 0, ZERO_HASH, view_changes=chosen, pre_prepares=pps)
        self.new_view_sent.add(target)
        return [(None, msg)] + self._enter_view(msg, now)

    def _on_new_view(self, msg: ProtocolMessage, now: int) -> list[Outbound]:
        if msg.view <= self.view or msg.sender != self.primary(msg.view) or not self._authentic(msg):
            self.dropped["wrong_view" if msg.view <= self.view else "malformed"] += 1
            return []
        senders = {vc.sender for vc in msg.view_changes}
        if (len(senders) < 2 * self.f + 1 or len(senders) != len(msg.view_changes)
                or any(vc.kind != VIEW_CHANGE or vc.view != msg.view or not self._valid_view_change(vc)
                       for vc in msg.view_changes)):
            self.dropped["malformed"] += 1
            return []
        plan, _ = self.new_view_plan(msg.view, msg.view_changes)
        carried = [(pp.seq, pp.batch_digest) for pp in msg.pre_prepares]
        if carried != [(s, b.digest) for s, b in plan] or any(
                pp.sender != msg.sender or pp.view != msg.view or pp.batch is None
                or pp.batch.digest != pp.batch_digest for pp in msg.pre_prepares):
            self.dropped["malformed"] += 1
            return []
        return self._enter_view(msg, now)

    def _enter_view(self, nv: ProtocolMessage, now: int) -> list[Outbound]:
        view = nv.view
        plan, next_seq = self.new_view_plan(view, nv.view_changes)
        self.view = view
        self.view_changing = False
        self.vc_target = None
        self.next_seq = next_seq
        self.queues.clear()
        self.queued.clear()
        self.forwarded.clear()
        self.in_batch = set()
        for name in [k for k in self.timers if isinstance(k, tuple)]:
            del self.timers[name]
        for v in [v for v in self.vc_log if v <= view]:
            del self.vc_log[v]
        self.message_log[(NEW_VIEW, view, 0, nv.sender)] = nv

        outs: list[Outbound] = []
        for pp in nv.pre_prepares:
            if (view, pp.seq) not in self.pre_prepares:
                outs += self._accept_pre_prepare(pp)
        buffered, self.future = self.future, []
        for msg in buffered:
            if msg.view == view:
                outs += self.handle_message(msg, now)
            elif msg.view > view:
                self.future.append(msg)
        for tx in list(self.pending.values()):
            if tx.tx_id in self.in_batch or tx.tx_id in self.delivered_tx:
                continue
            outs += self.submit_tx(tx, now)
        self._arm_view_timer(now)
        return outs


def new_ordering_service(n: int, f: int, batch_config: BatchConfig | None = None, **kwargs) -> "OrderingService":
    return OrderingService(n, f, batch_config or BatchConfig(), **kwargs)


class OrderingService:
    """The replica set plus the channel -> block subscriber registry."""

    def __init__(
        self,
        n: int,
        f: int,
        batch_config: BatchConfig,
        keyring: KeyRing | None = None,
        view_change_timeout: float = 2.0,
        prefix: str = "orderer",
    ):
        if f < 0 or n != 3 * f + 1:
            raise ConfigError(f"ordering.n must equal 3f+1 (got n={n}, f={f})")
        self.n, self.f = n, f
        self.keyring = keyring or KeyRing()
        self.names = [f"{prefix}{i}" for i in range(n)]
        self.replicas = [
            Replica(i, n, f, batch_config, self.keyring, self.names, view_change_timeout) for i in range(n)
        ]
        self.subscribers: dict[str, list[str]] = {}
        self.nodes = [OrdererNode(self, r) for r in self.replicas]

    def register_channel(self, channel_id: str, subscribers: Iterable[str]) -> None:
        self.subscribers[channel_id] = sorted(set(subscribers))

    def primary_name(self, view: int = 0) -> str:
        return self.names[view % self.n]

    def install(self, sim: Simulator) -> None:
        for node in self.nodes:
            sim.add_node(node)

    def honest_nodes(self, sim: Simulator) -> list["OrdererNode"]:
        return [node for node in self.nodes if node.node_id not in sim.byzantine]


class OrdererNode:
    """Simulator adapter around a :class:`Replica`; also cuts per-channel blocks."""

    byzantine_behaviors = BYZANTINE_BEHAVIORS

    def __init__(self, service: OrderingService, replica: Replica):
        self.service = service
        self.replica = replica
        self.node_id = service.names[replica.replica_id]
        self.behavior: str | None = None
        self.chains: dict[str, list[Block]] = {}
        self._scheduled: dict[object, tuple[int, object]] = {}
        self._emitted = 0

    def set_byzantine(self, behavior: str) -> None:
        self.behavior = behavior

    def on_message(self, sim: Simulator, src: str, msg) -> None:
        if isinstance(msg, Request):
            outs = self.replica.submit_tx(msg.tx, sim.now_ns)
        else:
            outs = self.replica.handle_message(msg, sim.now_ns)
        self._flush(sim, outs)

    def on_timer(self, sim: Simulator, tag) -> None:
        _, name, deadline = tag
        if self.replica.timers.get(name) != deadline:
            return
        self._scheduled.pop(name, None)
        self._flush(sim, self.replica.on_timer(name, sim.now_ns))

    def on_recover(self, sim: Simulator) -> None:
        self._scheduled.clear()
        self._sync_timers(sim)

    # -- outbound path --------------------------------------------------------

    def _flush(self, sim: Simulator, outs: list[Outbound]) -> None:
        names = self.service.names
        me = self.node_id
        for dest, msg in self._adversary(outs):
            if dest is None:
                for other in names:
                    if other != me:
                        sim.send(me, other, msg)
            else:
                target = names[dest] if isinstance(dest, int) else dest
                if target != me:
                    sim.send(me, target, msg)
        self._sync_timers(sim)
        self._emit_blocks(sim)

    def _sync_timers(self, sim: Simulator) -> None:
        timers = self.replica.timers
        for name in [k for k in self._scheduled if k not in timers]:
            sim.cancel(self._scheduled.pop(name)[1])
        for name, deadline in timers.items():
            current = self._scheduled.get(name)
            if current is not None and current[0] == deadline:
                continue
            if current is not None:
                sim.cancel(current[1])
            event = sim.set_timer_at(self.node_id, deadline, ("pbft", name, deadline))
            self._scheduled[name] = (deadline, event)

    def _emit_blocks(self, sim: Simulator) -> None:
        delivered = self.replica.delivered
        while self._emitted < len(delivered):
            batch = delivered[self._emitted]
            self._emitted += 1
            if not batch.txs:
                continue
            chain = self.chains.setdefault(batch.channel_id, [genesis_block()])
            block = Block.build(len(chain), chain[-1].block_hash, batch.txs)
            chain.append(block)
            if self.behavior == "silent":
                continue
            msg = BlockDelivery(batch.channel_id, block, self.node_id)
            for sub in self.service.subscribers.get(batch.channel_id, ()):
                sim.send(self.node_id, sub, msg)

    # -- adversarial handlers -------------------------------------------------

    def _adversary(self, outs: list[Outbound]) -> list[Outbound]:
        behavior = self.behavior
        if behavior is None:
            return outs
        if behavior == "silent":
            return []
        r = self.replica
        others = [i for i in range(r.n) if i != r.replica_id]
        half = set(others[: len(others) // 2])
        result: list[Outbound] = []
        for dest, msg in outs:
            if not isinstance(msg, ProtocolMessage) or msg.kind not in (PRE_PREPARE, PREPARE, COMMIT):
                result.append((dest, msg))
                continue
            bogus = sha256(b"bogus" + msg.batch_digest)
            if behavior == "bad_digest":
                if msg.kind == PRE_PREPARE:
                    result.append((dest, msg))
                else:
                    result.append((dest, r.make(msg.kind, msg.view, msg.seq, bogus)))
                continue
            # equivocate: different content to each half of the replicas
            if msg.kind == PRE_PREPARE:
                alt = _alternative(msg.batch)
                alt_msg = r.make(PRE_PREPARE, msg.view, msg.seq, alt.digest, batch=alt)
            else:
                alt_msg = r.make(msg.kind, msg.view, msg.seq, bogus)
            targets = others if dest is None else [dest]
            for t in targets:
                result.append((t, msg if t in half else alt_msg))
        return result


def _alternative(batch: Batch) -> Batch:
    if len(batch.txs) > 1:
        return Batch(batch.channel_id, batch.txs[:-1])
    return Batch(batch.channel_id, ())


def prefix_consistent(sequences: Sequence[Sequence[bytes]]) -> bool:
    """True when every sequence is a prefix of every longer one."""
    ordered = sorted(sequences, key=len)
    for shorter, longer in zip(ordered, ordered[1:]):
        if list(longer[: len(shorter)]) != list(shorter):
            return False
    return True


def delivered_digests(replica: Replica) -> list[bytes]:
    return [b.digest for b in replica.delivered]


# -- ordering-only harness ----------------------------------------------------

def make_tx(client: str, counter: int, channel_id: str = "orders", submit_ns: int = 0) -> Transaction:
    tx_id = sha256(enc_str(client) + enc_uint(counter))[:16]
    return Transaction(
        tx_id=tx_id, channel_id=channel_id, contract_id="kv",
        write_set=((f"k{counter}", enc_uint(counter)),), submit_ns=submit_ns, client_node_id=client,
    )


class OrderingClient:
    """Submits transactions to one orderer and re-broadcasts them on timeout.

    A block counts as received once f+1 orderers delivered identical copies.
    """

    def __init__(self, node_id: str, service: OrderingService, resubmit_timeout: float = 3.0, entry: int = 0):
        self.node_id = node_id
        self.service = service
        self.resubmit_ns = to_ns(resubmit_timeout)
        self.entry = entry
        self.outstanding: dict[bytes, Transaction] = {}
        self.confirmed: dict[bytes, int] = {}
        self.blocks: dict[str, dict[int, Block]] = defaultdict(dict)
        self._votes: dict[tuple[str, int, bytes], set[str]] = defaultdict(set)

    def submit(self, sim: Simulator, tx: Transaction) -> None:
        self.outstanding[tx.tx_id] = tx
        sim.send(self.node_id, self.service.names[self.entry], Request(tx))
        sim.set_timer(self.node_id, self.resubmit_ns, ("resubmit", tx.tx_id, 1), ns=True)

    def on_timer(self, sim: Simulator, tag) -> None:
        if tag[0] == "submit":
            self.submit(sim, tag[1])
            return
        _, tx_id, attempt = tag
        tx = self.outstanding.get(tx_id)
        if tx is None:
            return
        sim.broadcast(self.node_id, self.service.names, Request(tx))
        sim.set_timer(self.node_id, self.resubmit_ns * 2 ** attempt, ("resubmit", tx_id, attempt + 1), ns=True)

    def on_message(self, sim: Simulator, src: str, msg) -> None:
        if not isinstance(msg, BlockDelivery):
            return
        block = msg.block
        key = (msg.channel_id, block.seq, block.block_hash)
        self._votes[key].add(src)
        if len(self._votes[key]) < self.service.f + 1 or block.seq in self.blocks[msg.channel_id]:
            return
        self.blocks[msg.channel_id][block.seq] = block
        for tx in block.txs:
            if self.outstanding.pop(tx.tx_id, None) is not None:
                self.confirmed[tx.tx_id] = sim.now_ns


@dataclass
class OrderingRun:
    sim: Simulator
    service: OrderingService
    client: OrderingClient
    submitted: list[Transaction]

    def honest(self) -> list[Replica]:
        return [n.replica for n in self.service.nodes if n.node_id not in self.sim.byzantine]

    def honest_sequences(self) -> list[list[bytes]]:
        return [[tx_id for b in r.delivered for tx_id in b.tx_ids] for r in self.honest()]

    def safe(self) -> bool:
        batches = [delivered_digests(r) for r in self.honest()]
        return prefix_consistent(batches) and prefix_consistent(self.honest_sequences())


def simulate_ordering(
    seed: int,
    *,
    n: int = 4,
    f: int = 1,
    num_txs: int = 10,
    batch_config: BatchConfig | None = None,
    latency=None,
    faults: Sequence = (),
    submit_gap: float = 0.05,
    end_time: float = 30.0,
    view_change_timeout: float = 2.0,
    record_trace: bool = True,
) -> OrderingRun:
    """Run an ordering service with one client submitting ``num_txs`` transactions."""
    from .simnet import LatencyModel

    keyring = KeyRing(seed)
    service = new_ordering_service(n, f, batch_config or BatchConfig(3, 0.2), keyring=keyring,
                                   view_change_timeout=view_change_timeout)
    sim = Simulator(seed, latency or LatencyModel(0.005, 0.002), record_trace=record_trace)
    service.install(sim)
    client = OrderingClient("client", service)
    sim.add_node(client)
    service.register_channel("orders", ["client"])
    submitted = []
    for i in range(num_txs):
        tx = make_tx("client", i, submit_ns=to_ns(i * submit_gap))
        submitted.append(tx)
        sim.set_timer_at("client", tx.submit_ns, ("submit", tx))
    sim.schedule_faults(faults)
    sim.run_until(end_time)
    return OrderingRun(sim, service, client, submitted)
