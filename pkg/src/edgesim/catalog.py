"""Built-in scenarios for ``edgesim scaffold``."""
from __future__ import annotations

from .scenario import SCHEMA

SWEEP_RATES = list(range(500, 6001, 500))


def _bench_peers() -> list[dict]:
    return [{"id": f"peer{i}", "kind": "peer", "roles": ["endorser", "committer"], "contracts": ["kv"]}
            for i in range(3)]


def _bench_channel() -> dict:
    return {"id": "bench", "members": ["peer0", "peer1", "peer2"],
            "policies": {"kv": {"endorsers": ["peer0", "peer1"], "threshold": 2}}}


def fault_free() -> dict:
    return {
        "schema": SCHEMA,
        "name": "fault_free",
        "seed": 42,
        "end_time": 5.0,
        "nodes": _bench_peers(),
        "channels": [_bench_channel()],
        "workload": {"channel": "bench", "anchor": "peer2", "input_rate": 200, "total_txs": 400,
                     "mix": 0.2, "keyspace": 1000, "drain_time": 5.0},
    }


def byzantine_orderer() -> dict:
    cfg = fault_free()
    cfg["name"] = "byzantine_orderer"
    cfg["end_time"] = 10.0
    cfg["workload"]["drain_time"] = 15.0
    cfg["faults"] = [{"time": 0.0, "node": "orderer0", "fault": "byzantine", "behavior": "equivocate"}]
    return cfg


def overloaded_edge() -> dict:
    edges = [{"id": f"edge{i}", "kind": "edge", "roles": ["endorser", "committer"],
              "contracts": ["task_contract", "task_timeout"], "capacity": 100.0, "speed": 10.0}
             for i in range(3)]
    cloud = {"id": "cloud", "kind": "cloud", "roles": ["endorser", "committer"],
             "contracts": ["task_contract", "task_timeout"]}
    return {
        "schema": SCHEMA,
        "name": "overloaded_edge",
        "seed": 7,
        "end_time": 12.0,
        "nodes": [cloud, *edges],
        "tasks": [{"task_id": f"t{i}", "owner": "edge0", "cost": 50.0, "at": 0.1, "payload_size": 64}
                  for i in range(6)],
        "sharing": {"enabled": True, "k": 2, "monitor_period": 1.0, "willingness_timeout": 0.5,
                    "execution_timeout": 30.0},
    }


def rate_sweep() -> dict:
    cfg = fault_free()
    cfg["name"] = "rate_sweep"
    cfg["end_time"] = 1.0
    # traces of 12 x 10000 transactions run to gigabytes
    cfg["record_trace"] = False
    cfg["workload"] = {
        "channel": "bench", "anchor": "peer2", "input_rate": 500, "total_txs": 10000, "mix": 0.1,
        "keyspace": 10000, "drain_time": 20.0,
        "rate_schedule": [{"rate": r, "tx_count": 10000} for r in SWEEP_RATES],
    }
    return cfg


CATALOG = {
    "fault_free": fault_free,
    "byzantine_orderer": byzantine_orderer,
    "overloaded_edge": overloaded_edge,
    "rate_sweep": rate_sweep,
}


class UnknownScenario(KeyError):
    def __str__(self):
        return f"unknown scenario {self.args[0]!r}; valid names: {', '.join(CATALOG)}"


def scaffold(name: str) -> dict:
    try:
        return CATALOG[name]()
    except KeyError:
        raise UnknownScenario(name) from None
