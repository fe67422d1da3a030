"""Deterministic discrete-event network simulator.

Time is an integer count of nanoseconds. Events run in ``(fire_ns, seq_no)``
order; ``seq_no`` is a global monotone counter so ties resolve in
scheduling order. Randomness comes from independent streams derived from
``(seed, node, purpose)`` so adding a node never perturbs another node's
draws.
"""
from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Any, Iterable, Protocol

from .ledger import enc_str, enc_uint, sha256

NS = 1_000_000_000

MESSAGE = "MessageDelivery"
TIMER = "TimerFire"
FAULT = "FaultInjection"


def to_ns(seconds: float) -> int:
    return int(round(seconds * NS))


def to_s(ns: int) -> float:
    return ns / NS


class ScenarioError(Exception):
    """Scenario misconfiguration detected while building or running it."""


class SimulationError(Exception):
    """A handler raised; ``event`` is the event that was being executed."""

    def __init__(self, event: "SimEvent", cause: BaseException):
        super().__init__(f"handler failed at t={to_s(event.fire_ns):.9f}s on {event.describe()}: {cause!r}")
        self.event = event
        self.cause = cause


def derive_seed(seed: int, *parts: str) -> int:
    data = enc_uint(seed & 0xFFFFFFFFFFFFFFFF) + b"".join(enc_str(p) for p in parts)
    return int.from_bytes(sha256(data)[:8], "big")


@dataclass(frozen=True)
class LatencyModel:
    base: float = 0.005
    jitter: float = 0.0
    drop_probability: float = 0.0

    def __post_init__(self):
        if self.base < 0 or self.jitter < 0:
            raise ScenarioError("latency base and jitter must be >= 0")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ScenarioError("drop_probability must be in [0, 1]")


@dataclass(frozen=True)
class FaultEntry:
    time: float
    node_id: str
    fault: str  # "crash" | "recover" | "byzantine"
    behavior: str | None = None


class Node(Protocol):
    node_id: str

    def on_message(self, sim: "Simulator", src: str, msg: Any) -> None: ...

    def on_timer(self, sim: "Simulator", tag: Any) -> None: ...


@dataclass(order=True)
class SimEvent:
    fire_ns: int
    seq_no: int
    kind: str = field(compare=False)
    src: str | None = field(compare=False, default=None)
    dst: str | None = field(compare=False, default=None)
    payload: Any = field(compare=False, default=None)
    cancelled: bool = field(compare=False, default=False)

    def label(self) -> str:
        if self.kind == MESSAGE:
            return getattr(self.payload, "kind", type(self.payload).__name__)
        if self.kind == TIMER:
            return str(self.payload[0] if isinstance(self.payload, tuple) else self.payload)
        return self.payload.fault if isinstance(self.payload, FaultEntry) else str(self.payload)

    def describe(self) -> str:
        return f"{self.kind}({self.src}->{self.dst}, {self.label()})"

    def trace_record(self) -> dict:
        return {
            "t": to_s(self.fire_ns),
            "seq": self.seq_no,
            "kind": self.kind,
            "from": self.src,
            "to": self.dst,
            "msg": self.label(),
        }


class Simulator:
    """Single-timeline event loop over a full mesh of nodes."""

    def __init__(self, seed: int = 0, latency: LatencyModel | None = None, record_trace: bool = True):
        self.seed = seed
        self.latency = latency or LatencyModel()
        self.record_trace = record_trace
        self.nodes: dict[str, Any] = {}
        self.crashed: set[str] = set()
        self.byzantine: dict[str, str] = {}
        self.now_ns = 0
        self.trace: list[dict] = []
        self.drops = 0
        self.sent = 0
        self.delivered = 0
        self._queue: list[SimEvent] = []
        self._seq = 0
        self._rngs: dict[tuple[str, str], random.Random] = {}
        self._jitter_ns = to_ns(self.latency.jitter)
        self._base_ns = to_ns(self.latency.base)
        self._current: SimEvent | None = None

    @property
    def now(self) -> float:
        return to_s(self.now_ns)

    def rng(self, node_id: str, purpose: str) -> random.Random:
        key = (node_id, purpose)
        stream = self._rngs.get(key)
        if stream is None:
            stream = random.Random(derive_seed(self.seed, node_id, purpose))
            self._rngs[key] = stream
        return stream

    def add_node(self, node) -> None:
        if node.node_id in self.nodes:
            raise ScenarioError(f"duplicate node id {node.node_id!r}")
        self.nodes[node.node_id] = node

    def _require(self, node_id: str) -> None:
        if node_id not in self.nodes:
            raise ScenarioError(f"unknown node {node_id!r}")

    def _push(self, fire_ns: int, kind: str, src, dst, payload) -> SimEvent:
        event = SimEvent(fire_ns, self._seq, kind, src, dst, payload)
        self._seq += 1
        heapq.heappush(self._queue, event)
        return event

    # -- messaging ------------------------------------------------------------

    def send(self, src: str, dst: str, msg: Any) -> SimEvent | None:
        """Schedule delivery of ``msg``; returns None when the message is dropped."""
        self._require(src)
        self._require(dst)
        self.sent += 1
        if src in self.crashed or dst in self.crashed:
            self.drops += 1
            return None
        if self.latency.drop_probability > 0.0:
            if self.rng(src, "drop").random() < self.latency.drop_probability:
                self.drops += 1
                return None
        delay = self._base_ns
        if self._jitter_ns:
            delay += int(self.rng(src, "jitter").random() * self._jitter_ns)
        return self._push(self.now_ns + delay, MESSAGE, src, dst, msg)

    def broadcast(self, src: str, dsts: Iterable[str], msg: Any) -> None:
        for dst in dsts:
            if dst != src:
                self.send(src, dst, msg)

    # -- timers and faults ----------------------------------------------------

    def set_timer(self, node_id: str, delay: float | int, tag: Any, *, ns: bool = False) -> SimEvent:
        self._require(node_id)
        delay_ns = int(delay) if ns else to_ns(delay)
        if delay_ns < 0:
            raise ScenarioError("timer delay must be >= 0")
        return self._push(self.now_ns + delay_ns, TIMER, None, node_id, tag)

    def set_timer_at(self, node_id: str, fire_ns: int, tag: Any) -> SimEvent:
        self._require(node_id)
        return self._push(max(fire_ns, self.now_ns), TIMER, None, node_id, tag)

    @staticmethod
    def cancel(event: SimEvent | None) -> None:
        if event is not None:
            event.cancelled = True

    def schedule_fault(self, entry: FaultEntry) -> None:
        self._require(entry.node_id)
        self._check_behavior(entry)
        self._push(to_ns(entry.time), FAULT, None, entry.node_id, entry)

    def schedule_faults(self, entries: Iterable[FaultEntry]) -> None:
        last = float("-inf")
        for entry in entries:
            if entry.time < last:
                raise ScenarioError("fault script times must be non-decreasing")
            last = entry.time
            self.schedule_fault(entry)

    def _check_behavior(self, entry: FaultEntry) -> None:
        if entry.fault not in ("crash", "recover", "byzantine"):
            raise ScenarioError(f"unknown fault kind {entry.fault!r}")
        if entry.fault == "byzantine":
            node = self.nodes[entry.node_id]
            supported = getattr(node, "byzantine_behaviors", ())
            if entry.behavior not in supported:
                raise ScenarioError(
                    f"unknown byzantine behavior {entry.behavior!r} for {entry.node_id!r}; "
                    f"supported: {sorted(supported)}"
                )

    def inject_fault(self, entry: FaultEntry) -> None:
        self._require(entry.node_id)
        self._check_behavior(entry)
        node = self.nodes[entry.node_id]
        if entry.fault == "crash":
            self.crashed.add(entry.node_id)
            hook = getattr(node, "on_crash", None)
        elif entry.fault == "recover":
            self.crashed.discard(entry.node_id)
            hook = getattr(node, "on_recover", None)
        else:
            self.byzantine[entry.node_id] = entry.behavior
            node.set_byzantine(entry.behavior)
            hook = None
        if hook is not None:
            hook(self)

    # -- main loop ------------------------------------------------------------

    def run_until(self, end_time: float) -> list[dict]:
        end_ns = to_ns(end_time)
        queue = self._queue
        nodes = self.nodes
        crashed = self.crashed
        trace = self.trace if self.record_trace else None
        while queue and queue[0].fire_ns <= end_ns:
            event = heapq.heappop(queue)
            if event.cancelled:
                continue
            self.now_ns = event.fire_ns
            kind = event.kind
            if kind == MESSAGE or kind == TIMER:
                if event.dst in crashed:
                    if kind == MESSAGE:
                        self.drops += 1
                    continue
            if trace is not None:
                trace.append(event.trace_record())
            self._current = event
            try:
                if kind == MESSAGE:
                    self.delivered += 1
                    nodes[event.dst].on_message(self, event.src, event.payload)
                elif kind == TIMER:
                    nodes[event.dst].on_timer(self, event.payload)
                else:
                    self.inject_fault(event.payload)
            except (ScenarioError, SimulationError):
                raise
            except Exception as exc:
                raise SimulationError(event, exc) from exc
            finally:
                self._current = None
        self.now_ns = max(self.now_ns, end_ns)
        return self.trace

    def pending_events(self) -> int:
        return sum(1 for e in self._queue if not e.cancelled)


def trace_jsonl(trace: Iterable[dict], extra: dict | None = None) -> str:
    lines = []
    for record in trace:
        if extra:
            record = {**extra, **record}
        lines.append(json.dumps(record, separators=(",", ":")))
    return "".join(line + "\n" for line in lines)

