"""Task sharing between edge servers.

An overloaded edge server asks the cloud for help. The cloud ranks the
other edge servers from its (possibly stale) monitor view, asks the best
few whether they are willing, and matches the requester with the first one
that offers. The pair then runs the task through a contract on a private
two-member channel: Accepted, Shared (the payload travels in this
transaction), Executing and Completed, each an endorsed and ordered
transaction. A completed contract earns the executor one credit on the
global ``credits`` channel, which only ever sees the payload digest.
"""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .contracts import (
    TERMINAL, contract_record_key, credit_key, encode_args,
)
from .ledger import EndorsementPolicy, enc_str, enc_uint, sha256
from .peer import COMMITTER, ENDORSER, ClientPeer, Consortium, Proposal
from .simnet import Simulator, to_ns, to_s

log = logging.getLogger(__name__)

CLOUD_ID = "cloud"
CREDITS_CHANNEL = "credits"
SHARING_CONTRACTS = ("task_contract", "task_timeout")


class SharingError(Exception):
    pass


class NoCandidate(SharingError):
    pass


@dataclass(frozen=True)
class Task:
    task_id: str
    owner_node_id: str
    compute_cost: float
    payload: bytes
    deadline: float | None = None

    def __post_init__(self):
        if self.compute_cost < 0:
            raise SharingError(f"task {self.task_id}: compute_cost must be >= 0")
        if not self.payload:
            raise SharingError(f"task {self.task_id}: payload must be non-empty")


def make_payload(seed: int, task_id: str, size: int = 64) -> bytes:
    """Deterministic pseudo-random task content."""
    out = b""
    counter = 0
    while len(out) < size:
        out += sha256(b"payload" + enc_uint(seed) + enc_str(task_id) + enc_uint(counter))
        counter += 1
    return out[:size]


@dataclass
class MonitorEntry:
    capacity: float
    current_load: float
    last_update: float

    @property
    def free(self) -> float:
        return self.capacity - self.current_load


MonitorView = dict[str, MonitorEntry]


@dataclass(frozen=True)
class ServiceRequest:
    request_id: str
    requester: str
    task_id: str
    compute_cost: float
    exclude: tuple[str, ...] = ()
    at: float = 0.0
    kind: str = "ServiceRequest"


def needs_help(load: float, cost: float, capacity: float) -> bool:
    return load + cost > capacity


def request_service(requester: str, task: Task, load: float, capacity: float, *,
                    now: float = 0.0, force: bool = False, attempt: int = 0,
                    exclude: Iterable[str] = ()) -> ServiceRequest | None:
    """Build the request sent to the cloud, or None when the node can run the task itself."""
    if not force and not needs_help(load, task.compute_cost, capacity):
        return None
    return ServiceRequest(f"{task.task_id}#{attempt}", requester, task.task_id, task.compute_cost,
                          tuple(sorted(exclude)), now)


def shortlist(view: Mapping[str, MonitorEntry], task: Task | float, k: int, *,
              requester: str | None = None, exclude: Iterable[str] = (), cloud_id: str = CLOUD_ID) -> list[str]:
    """Greedy ranking: most free capacity first, ties by node id."""
    if k < 1:
        raise SharingError("shortlist size k must be >= 1")
    cost = task.compute_cost if isinstance(task, Task) else task
    if isinstance(task, Task) and requester is None:
        requester = task.owner_node_id
    banned = set(exclude) | {requester, cloud_id}
    fits = [(-entry.free, node) for node, entry in view.items()
            if node not in banned and entry.free >= cost]
    return [node for _, node in sorted(fits)[:k]]


def willing(current_load: float, compute_cost: float, capacity: float) -> bool:
    return current_load + compute_cost <= capacity


def query_willingness(load: float, reserved: float, capacity: float, task_cost: float) -> str:
    return "Offer" if willing(load + reserved, task_cost, capacity) else "Decline"


@dataclass
class TaskContract:
    """A contract as reconstructed from its channel's committed record."""

    contract_key: str
    requester_id: str
    executor_id: str
    task_id: str
    state: str
    channel_id: str
    timestamps: list[tuple[str, float]]
    payload_digest: str | None = None

    @classmethod
    def from_record(cls, record: Mapping, channel_id: str | None = None) -> "TaskContract":
        key = record["contract_key"]
        return cls(
            contract_key=key,
            requester_id=record["requester"],
            executor_id=record["executor"],
            task_id=record["task_id"],
            state=record["state"],
            channel_id=channel_id or contract_channel(key),
            timestamps=[(state, to_s(at)) for state, at in record["history"]],
            payload_digest=record.get("payload_digest"),
        )

    @property
    def owner(self) -> str:
        return task_owner(self.state, self.requester_id, self.executor_id)


def task_owner(state: str, requester: str, executor: str) -> str:
    """The executor holds the task from Shared until Completed; otherwise the requester does."""
    return executor if state in ("Shared", "Executing", "Completed") else requester


@dataclass
class CreditAccount:
    node_id: str
    credits: int = 0


def contract_channel(contract_key: str) -> str:
    return f"contract-{contract_key}"


def contract_policies(requester: str, executor: str) -> dict[str, EndorsementPolicy]:
    return {
        "task_contract": EndorsementPolicy(frozenset({requester, executor}), 2),
        "task_timeout": EndorsementPolicy(frozenset({requester}), 1),
    }


def credit_accounts(credits_state, node_ids: Iterable[str]) -> dict[str, CreditAccount]:
    accounts = {node: CreditAccount(node) for node in node_ids}
    for key in credits_state.keys("credit/"):
        executor = json.loads(credits_state.get(key))["executor"]
        accounts.setdefault(executor, CreditAccount(executor)).credits += 1
    return accounts


# -- wire messages ----------------------------------------------------------------

@dataclass(frozen=True)
class LoadUpdate:
    capacity: float
    current_load: float
    kind: str = "LoadUpdate"


@dataclass(frozen=True)
class WillingnessQuery:
    request_id: str
    requester: str
    task_id: str
    compute_cost: float
    kind: str = "WillingnessQuery"


@dataclass(frozen=True)
class WillingnessReply:
    request_id: str
    offer: bool
    kind: str = "WillingnessReply"


@dataclass(frozen=True)
class Match:
    request_id: str
    task_id: str
    executor: str
    kind: str = "Match"


@dataclass(frozen=True)
class NoCandidateMsg:
    request_id: str
    task_id: str
    kind: str = "NoCandidate"


@dataclass(frozen=True)
class Cancel:
    request_id: str
    requester: str
    task_id: str
    kind: str = "Cancel"


# -- parameters and event log --------------------------------------------------------

@dataclass(frozen=True)
class SharingParams:
    enabled: bool = True
    force: bool = False
    k: int = 3
    monitor_period: float = 1.0
    willingness_timeout: float = 0.5
    execution_timeout: float = 30.0
    stale_after: float = 3.0


class EventLog:
    """Structured protocol events, one JSON object per line when exported."""

    def __init__(self):
        self.events: list[dict] = []

    def emit(self, now_ns: int, event: str, **fields) -> None:
        self.events.append({"t": to_s(now_ns), "event": event, **fields})

    def of(self, event: str) -> list[dict]:
        return [e for e in self.events if e["event"] == event]

    def jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in self.events)


@dataclass
class _Tracked:
    task: Task
    attempt: int = 0
    excluded: set[str] = field(default_factory=set)
    contract_key: str | None = None
    executor: str | None = None
    status: str = "new"
    timer: object = None


# -- nodes ---------------------------------------------------------------------------

class EdgeServer(ClientPeer):
    """Edge server: runs its own tasks, requests help, and executes tasks for others."""

    def __init__(self, node_id: str, consortium: Consortium, capacity: float, speed: float,
                 params: SharingParams, events: EventLog, block_quorum: int = 1, cloud_id: str = CLOUD_ID,
                 installed_contracts: Iterable[str] = SHARING_CONTRACTS, roles=(ENDORSER, COMMITTER)):
        if capacity <= 0 or speed <= 0:
            raise SharingError(f"{node_id}: capacity and speed must be > 0")
        super().__init__(node_id, consortium, roles, installed_contracts, block_quorum)
        self.capacity = capacity
        self.speed = speed
        self.params = params
        self.events = events
        self.cloud_id = cloud_id
        self.load = 0.0
        self.reserved: dict[tuple[str, str], float] = {}
        self.running: dict[str, float] = {}
        self.queue: deque[Task] = deque()
        self.tracked: dict[str, _Tracked] = {}
        self.completed: list[str] = []
        self.serving: dict[str, dict] = {}
        self.guard = self._guard

    @property
    def reserved_load(self) -> float:
        return sum(self.reserved.values())

    def _log(self, sim: Simulator, event: str, **fields) -> None:
        self.events.emit(sim.now_ns, event, node=self.node_id, **fields)

    # -- timers --------------------------------------------------------------------

    def start(self, sim: Simulator) -> None:
        self.commit_listeners.append(lambda channel_id, tx, valid, now_ns: self.commit_reaction(sim, channel_id, tx, valid))
        sim.set_timer(self.node_id, 0, ("monitor",))

    def on_timer(self, sim: Simulator, tag) -> None:
        what = tag[0]
        if what == "monitor":
            sim.send(self.node_id, self.cloud_id, LoadUpdate(self.capacity, self.load))
            sim.set_timer(self.node_id, self.params.monitor_period, ("monitor",))
        elif what == "task":
            self.on_task(sim, tag[1])
        elif what == "local_done":
            self._finish_local(sim, tag[1])
        elif what == "remote_done":
            self._finish_remote(sim, tag[1])
        elif what == "exec_timeout":
            self._on_exec_timeout(sim, tag[1], tag[2])
        else:
            super().on_timer(sim, tag)

    # -- own tasks -----------------------------------------------------------------

    def on_task(self, sim: Simulator, task: Task) -> None:
        self.tracked[task.task_id] = _Tracked(task)
        self._log(sim, "task_arrived", task_id=task.task_id, cost=task.compute_cost)
        if self.params.enabled:
            self._request(sim, self.tracked[task.task_id])
        else:
            self._run_or_queue(sim, task)

    def _fits(self, cost: float) -> bool:
        return willing(self.load + self.reserved_load, cost, self.capacity)

    def _run_or_queue(self, sim: Simulator, task: Task) -> None:
        if not self.queue and self._fits(task.compute_cost):
            self._start_local(sim, task)
        else:
            self.queue.append(task)
            self._log(sim, "queued", task_id=task.task_id)

    def _start_local(self, sim: Simulator, task: Task) -> None:
        self.load += task.compute_cost
        self.running[task.task_id] = task.compute_cost
        self.tracked[task.task_id].status = "local"
        self._log(sim, "local_start", task_id=task.task_id)
        sim.set_timer(self.node_id, task.compute_cost / self.speed, ("local_done", task.task_id))

    def _finish_local(self, sim: Simulator, task_id: str) -> None:
        self.load -= self.running.pop(task_id)
        self.tracked[task_id].status = "completed"
        self.completed.append(task_id)
        self._log(sim, "local_complete", task_id=task_id)
        self._drain(sim)

    def _drain(self, sim: Simulator) -> None:
        while self.queue and self._fits(self.queue[0].compute_cost):
            self._start_local(sim, self.queue.popleft())

    def _request(self, sim: Simulator, tr: _Tracked) -> None:
        request = request_service(self.node_id, tr.task, self.load + self.reserved_load, self.capacity,
                                  now=sim.now, force=self.params.force, attempt=tr.attempt, exclude=tr.excluded)
        if request is None or not self.params.enabled:
            self._run_or_queue(sim, tr.task)
            return
        tr.status = "requested"
        self._log(sim, "requested", task_id=tr.task.task_id, attempt=tr.attempt)
        sim.send(self.node_id, self.cloud_id, request)

    def _give_up(self, sim: Simulator, tr: _Tracked, reason: str) -> None:
        tr.contract_key = tr.executor = None
        self._log(sim, "kept_local", task_id=tr.task.task_id, reason=reason)
        self._run_or_queue(sim, tr.task)

    def _retry(self, sim: Simulator, tr: _Tracked, reason: str) -> None:
        if tr.executor:
            tr.excluded.add(tr.executor)
        sim.cancel(tr.timer)
        tr.timer = None
        tr.attempt += 1
        tr.contract_key = tr.executor = None
        self._log(sim, "retry", task_id=tr.task.task_id, reason=reason, attempt=tr.attempt)
        self._request(sim, tr)

    # -- requester side of a contract -------------------------------------------------

    def on_match(self, sim: Simulator, msg: Match) -> None:
        tr = self.tracked.get(msg.task_id)
        if tr is None or tr.status != "requested":
            return
        key = sha256(enc_str(self.node_id) + enc_str(msg.task_id) + enc_uint(tr.attempt))[:8].hex()
        tr.contract_key, tr.executor, tr.status = key, msg.executor, "contracting"
        channel_id = contract_channel(key)
        self.consortium.create_channel(channel_id, [self.node_id, msg.executor],
                                       contract_policies(self.node_id, msg.executor))
        self._log(sim, "matched", task_id=msg.task_id, executor=msg.executor, contract_key=key, channel=channel_id)
        tr.timer = sim.set_timer(self.node_id, self.params.execution_timeout, ("exec_timeout", msg.task_id, key))
        task = tr.task
        args = {"action": "accept", "contract_key": key, "task_id": task.task_id, "requester": self.node_id,
                "executor": msg.executor, "cost": task.compute_cost, "at": sim.now_ns}
        self._transition(sim, tr, "accept", args)

    def _transition(self, sim: Simulator, tr: _Tracked, action: str, args: dict) -> None:
        key = tr.contract_key

        def done(tx_id, status, now_ns, detail):
            if status == "valid":
                return
            self._log(sim, "transition_failed", contract_key=key, action=action, status=status, detail=detail)
            if action == "accept" and tr.contract_key == key:
                self._retry(sim, tr, f"executor withdrew: {detail}")

        self.client.invoke(sim, contract_channel(key), "task_contract", encode_args(args), on_done=done)

    def on_no_candidate(self, sim: Simulator, msg: NoCandidateMsg) -> None:
        tr = self.tracked.get(msg.task_id)
        if tr is not None and tr.status == "requested":
            self._give_up(sim, tr, "no candidate")

    def _on_exec_timeout(self, sim: Simulator, task_id: str, key: str) -> None:
        tr = self.tracked.get(task_id)
        if tr is None or tr.contract_key != key:
            return
        tr.timer = None
        record = self._record(key)
        if record is None:
            self._retry(sim, tr, "contract never accepted")
            return
        if record["state"] in TERMINAL:
            return
        self._log(sim, "timeout", contract_key=key, state=record["state"])
        args = {"action": "fail", "contract_key": key, "at": sim.now_ns, "reason": "execution_timeout"}
        self.client.invoke(sim, contract_channel(key), "task_timeout", encode_args(args))

    def _record(self, key: str) -> dict | None:
        ledger = self.ledgers.get(contract_channel(key))
        if ledger is None:
            return None
        raw = ledger.state.get(contract_record_key(key))
        return None if raw is None else json.loads(raw)

    # -- commit reactions ------------------------------------------------------------

    def commit_reaction(self, sim: Simulator, channel_id: str, tx, valid: bool) -> None:
        if not valid or not channel_id.startswith("contract-") or tx.contract_id not in SHARING_CONTRACTS:
            return
        key = channel_id[len("contract-"):]
        record = self._record(key)
        if record is None:
            return
        written = dict(tx.write_set)
        if contract_record_key(key) not in written:
            return
        state = json.loads(written[contract_record_key(key)])["state"]
        self._log(sim, "transition", contract_key=key, state=state, task_id=record["task_id"],
                  tx_id=tx.tx_id.hex())
        if record["requester"] == self.node_id:
            self._as_requester(sim, key, record, state)
        if record["executor"] == self.node_id:
            self._as_executor(sim, key, record, state)

    def _as_requester(self, sim: Simulator, key: str, record: dict, state: str) -> None:
        tr = self.tracked.get(record["task_id"])
        if tr is None or tr.contract_key != key:
            return
        if state == "Accepted":
            args = {"action": "share", "contract_key": key, "payload": tr.task.payload.hex(), "at": sim.now_ns}
            self._transition(sim, tr, "share", args)
        elif state == "Completed":
            sim.cancel(tr.timer)
            tr.timer = None
            tr.status = "completed"
            self.completed.append(tr.task.task_id)
        elif state == "Failed":
            self._retry(sim, tr, "contract failed")

    def _as_executor(self, sim: Simulator, key: str, record: dict, state: str) -> None:
        cost = float(record["cost"])
        job = self.serving.setdefault(key, {"record": record, "started": False})
        if state == "Shared":
            args = {"action": "execute", "contract_key": key, "at": sim.now_ns}
            self.client.invoke(sim, contract_channel(key), "task_contract", encode_args(args))
        elif state == "Executing":
            self.reserved.pop((record["requester"], record["task_id"]), None)
            self.load += cost
            job["started"] = True
            sim.set_timer(self.node_id, cost / self.speed, ("remote_done", key))
        elif state == "Completed":
            if job["started"]:
                self.load -= cost
                job["started"] = False
            digest = record.get("payload_digest")
            args = {"action": "credit", "contract_key": key, "executor": self.node_id, "payload_digest": digest}
            self.client.invoke(sim, CREDITS_CHANNEL, "task_contract", encode_args(args))
            self._drain(sim)
        elif state == "Failed":
            self.reserved.pop((record["requester"], record["task_id"]), None)
            if job["started"]:
                self.load -= cost
                job["started"] = False
            self._drain(sim)

    def _finish_remote(self, sim: Simulator, key: str) -> None:
        record = self._record(key)
        if record is None or record["state"] != "Executing":
            return
        args = {"action": "complete", "contract_key": key, "at": sim.now_ns}
        self.client.invoke(sim, contract_channel(key), "task_contract", encode_args(args))

    # -- executor side negotiation ---------------------------------------------------

    def _guard(self, proposal: Proposal, state) -> str | None:
        if proposal.contract_id != "task_contract":
            return None
        args = json.loads(proposal.args)
        if args.get("action") == "accept" and args.get("executor") == self.node_id:
            if (args.get("requester"), args.get("task_id")) not in self.reserved:
                return "no capacity reserved for this task"
        return None

    def on_query(self, sim: Simulator, src: str, msg: WillingnessQuery) -> None:
        offer = query_willingness(self.load, self.reserved_load, self.capacity, msg.compute_cost) == "Offer"
        if offer:
            self.reserved[(msg.requester, msg.task_id)] = msg.compute_cost
        self._log(sim, "offer" if offer else "decline", task_id=msg.task_id, requester=msg.requester)
        sim.send(self.node_id, src, WillingnessReply(msg.request_id, offer))

    def on_cancel(self, sim: Simulator, msg: Cancel) -> None:
        if self.reserved.pop((msg.requester, msg.task_id), None) is not None:
            self._drain(sim)

    # -- dispatch ----------------------------------------------------------------------

    def on_other_message(self, sim: Simulator, src: str, msg) -> None:
        if isinstance(msg, WillingnessQuery):
            self.on_query(sim, src, msg)
        elif isinstance(msg, Match):
            self.on_match(sim, msg)
        elif isinstance(msg, NoCandidateMsg):
            self.on_no_candidate(sim, msg)
        elif isinstance(msg, Cancel):
            self.on_cancel(sim, msg)
        else:
            super().on_other_message(sim, src, msg)

    def dump(self) -> dict:
        data = super().dump()
        data["capacity"] = self.capacity
        data["load"] = self.load
        data["completed"] = list(self.completed)
        return data


@dataclass
class _Pending:
    request: ServiceRequest
    candidates: list[str]
    replies: dict[str, tuple[bool, int]] = field(default_factory=dict)
    timer: object = None


class CloudNode(ClientPeer):
    """Monitors edge load, shortlists candidates and brokers willingness."""

    def __init__(self, consortium: Consortium, params: SharingParams, events: EventLog,
                 block_quorum: int = 1, node_id: str = CLOUD_ID):
        super().__init__(node_id, consortium, (ENDORSER, COMMITTER), SHARING_CONTRACTS, block_quorum)
        self.params = params
        self.events = events
        self.view: MonitorView = {}
        self.requests: deque[ServiceRequest] = deque()
        self.active: _Pending | None = None
        self.decided: dict[str, tuple[str, str]] = {}

    def _log(self, sim: Simulator, event: str, **fields) -> None:
        self.events.emit(sim.now_ns, event, node=self.node_id, **fields)

    def on_other_message(self, sim: Simulator, src: str, msg) -> None:
        if isinstance(msg, LoadUpdate):
            self.view[src] = MonitorEntry(msg.capacity, msg.current_load, sim.now)
        elif isinstance(msg, ServiceRequest):
            self.requests.append(msg)
            self._next(sim)
        elif isinstance(msg, WillingnessReply):
            self._on_reply(sim, src, msg)
        else:
            super().on_other_message(sim, src, msg)

    def fresh_view(self, now: float) -> MonitorView:
        horizon = self.params.stale_after * self.params.monitor_period
        return {node: e for node, e in self.view.items() if now - e.last_update <= horizon}

    def _next(self, sim: Simulator) -> None:
        while self.active is None and self.requests:
            request = self.requests.popleft()
            candidates = shortlist(self.fresh_view(sim.now), request.compute_cost, self.params.k,
                                   requester=request.requester, exclude=request.exclude, cloud_id=self.node_id)
            self._log(sim, "shortlist", task_id=request.task_id, requester=request.requester, candidates=candidates)
            if not candidates:
                sim.send(self.node_id, request.requester, NoCandidateMsg(request.request_id, request.task_id))
                continue
            self.active = _Pending(request, candidates)
            query = WillingnessQuery(request.request_id, request.requester, request.task_id, request.compute_cost)
            for node in candidates:
                sim.send(self.node_id, node, query)
            self.active.timer = sim.set_timer(self.node_id, self.params.willingness_timeout,
                                              ("decide", request.request_id))

    def _on_reply(self, sim: Simulator, src: str, msg: WillingnessReply) -> None:
        active = self.active
        if active is None or active.request.request_id != msg.request_id or src in active.replies:
            # late offer for a request that was already decided
            decided = self.decided.get(msg.request_id)
            if msg.offer and decided is not None:
                sim.send(self.node_id, src, Cancel(msg.request_id, *decided))
            return
        active.replies[src] = (msg.offer, sim.now_ns)
        if len(active.replies) == len(active.candidates):
            sim.cancel(active.timer)
            self._decide(sim)

    def on_timer(self, sim: Simulator, tag) -> None:
        if tag[0] == "decide":
            if self.active is not None and self.active.request.request_id == tag[1]:
                self._decide(sim)
        else:
            super().on_timer(sim, tag)

    def _decide(self, sim: Simulator) -> None:
        active, self.active = self.active, None
        request = active.request
        self.decided[request.request_id] = (request.requester, request.task_id)
        offers = sorted((at, node) for node, (offer, at) in active.replies.items() if offer)
        if not offers:
            self._log(sim, "no_candidate", task_id=request.task_id, requester=request.requester)
            sim.send(self.node_id, request.requester, NoCandidateMsg(request.request_id, request.task_id))
        else:
            winner = offers[0][1]
            self._log(sim, "match", task_id=request.task_id, requester=request.requester, executor=winner)
            entry = self.view.get(winner)
            if entry is not None:
                entry.current_load += request.compute_cost
            sim.send(self.node_id, request.requester, Match(request.request_id, request.task_id, winner))
            for _, node in offers[1:]:
                sim.send(self.node_id, node, Cancel(request.request_id, request.requester, request.task_id))
        self._next(sim)
