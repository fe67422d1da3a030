"""Built-in contracts.

A contract is a deterministic function ``(ctx, args) -> None`` that reads
and writes through a :class:`TxContext`; raising :class:`ContractRejected`
refuses the invocation. Arguments travel as canonical JSON bytes.
"""
from __future__ import annotations

import json
from typing import Callable

from .ledger import WorldState, sha256


class ContractRejected(Exception):
    pass


class TxContext:
    """Records the read versions and proposed writes of one simulation."""

    def __init__(self, state: WorldState):
        self._state = state
        self._reads: dict[str, int] = {}
        self._writes: dict[str, bytes] = {}

    def get(self, key: str) -> bytes | None:
        if key in self._writes:
            return self._writes[key]
        if key not in self._reads:
            self._reads[key] = self._state.version(key)
        return self._state.get(key)

    def put(self, key: str, value: bytes) -> None:
        self._writes[key] = value

    @property
    def read_set(self) -> tuple[tuple[str, int], ...]:
        return tuple(sorted(self._reads.items()))

    @property
    def write_set(self) -> tuple[tuple[str, bytes], ...]:
        return tuple(sorted(self._writes.items()))


def encode_args(args: dict) -> bytes:
    return json.dumps(args, sort_keys=True, separators=(",", ":")).encode()


def decode_args(raw: bytes) -> dict:
    try:
        args = json.loads(raw)
    except ValueError as exc:
        raise ContractRejected(f"malformed arguments: {exc}") from None
    if not isinstance(args, dict):
        raise ContractRejected("arguments must be a JSON object")
    return args


# -- kv -------------------------------------------------------------------------

def kv(ctx: TxContext, args: dict) -> None:
    """Marbles-style key/value store: ``put`` is a read-modify-write."""
    op = args.get("op")
    key = args.get("key")
    if not isinstance(key, str) or not key:
        raise ContractRejected("kv: key required")
    if op == "get":
        ctx.get(key)
    elif op == "put":
        ctx.get(key)
        ctx.put(key, str(args.get("value", "")).encode())
    else:
        raise ContractRejected(f"kv: unknown op {op!r}")


# -- task sharing state machine ---------------------------------------------------

TASK_STATES = ("Requested", "Shortlisted", "Offered", "Accepted", "Shared", "Executing", "Completed")
TERMINAL = ("Completed", "Failed")
_NEXT = {"share": ("Accepted", "Shared"), "execute": ("Shared", "Executing"), "complete": ("Executing", "Completed")}


def contract_record_key(contract_key: str) -> str:
    return f"contract/{contract_key}"


def payload_key(contract_key: str) -> str:
    return f"payload/{contract_key}"


def credit_key(contract_key: str) -> str:
    return f"credit/{contract_key}"


def _load(ctx: TxContext, contract_key: str) -> dict:
    raw = ctx.get(contract_record_key(contract_key))
    if raw is None:
        raise ContractRejected(f"no contract {contract_key!r}")
    return json.loads(raw)


def _store(ctx: TxContext, record: dict) -> None:
    ctx.put(contract_record_key(record["contract_key"]), encode_args(record))


def task_contract(ctx: TxContext, args: dict) -> None:
    action = args.get("action")
    key = args.get("contract_key")
    if not isinstance(key, str) or not key:
        raise ContractRejected("task_contract: contract_key required")
    at = int(args.get("at", 0))

    if action == "accept":
        if ctx.get(contract_record_key(key)) is not None:
            raise ContractRejected(f"contract {key!r} already exists")
        if args.get("requester") == args.get("executor"):
            raise ContractRejected("requester and executor must differ")
        record = {
            "contract_key": key,
            "task_id": args["task_id"],
            "requester": args["requester"],
            "executor": args["executor"],
            "cost": args["cost"],
            "state": "Accepted",
            "history": [["Accepted", at]],
            "payload_digest": None,
        }
        _store(ctx, record)
    elif action in _NEXT:
        record = _load(ctx, key)
        expected, target = _NEXT[action]
        if record["state"] != expected:
            raise ContractRejected(f"{action}: contract is {record['state']}, expected {expected}")
        if action == "share":
            payload = bytes.fromhex(args["payload"])
            digest = sha256(payload).hex()
            record["payload_digest"] = digest
            ctx.put(payload_key(key), payload)
        record["state"] = target
        record["history"].append([target, at])
        _store(ctx, record)
    elif action == "credit":
        if ctx.get(credit_key(key)) is not None:
            raise ContractRejected(f"contract {key!r} already credited")
        ctx.put(credit_key(key), encode_args({"executor": args["executor"], "payload_digest": args["payload_digest"]}))
    else:
        raise ContractRejected(f"task_contract: unknown action {action!r}")


def task_timeout(ctx: TxContext, args: dict) -> None:
    """Requester-only entry point: move a stalled contract to Failed."""
    if args.get("action") != "fail":
        raise ContractRejected("task_timeout only records failures")
    record = _load(ctx, args.get("contract_key", ""))
    if record["state"] in TERMINAL:
        raise ContractRejected(f"contract already {record['state']}")
    record["state"] = "Failed"
    record["history"].append(["Failed", int(args.get("at", 0))])
    record["failure"] = args.get("reason", "timeout")
    _store(ctx, record)


CONTRACTS: dict[str, Callable[[TxContext, dict], None]] = {
    "kv": kv,
    "task_contract": task_contract,
    "task_timeout": task_timeout,
}


def simulate(contract_id: str, state: WorldState, raw_args: bytes) -> TxContext:
    contract = CONTRACTS.get(contract_id)
    if contract is None:
        raise ContractRejected(f"unknown contract {contract_id!r}")
    ctx = TxContext(state)
    try:
        contract(ctx, decode_args(raw_args))
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractRejected(f"{contract_id}: bad arguments ({exc!r})") from None
    return ctx
