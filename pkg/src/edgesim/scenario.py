"""Scenario configuration, world construction and the per-stage runner."""
from __future__ import annotations

import copy
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from .bench import (
    BenchClient, ResourceSampler, TxRecord, WorkloadSpec, generate_workload, records_from_csv,
    render_report,
)
from .contracts import contract_record_key
from .ledger import Block, EndorsementPolicy, KeyRing, verify_chain
from .pbft import BYZANTINE_BEHAVIORS, BatchConfig, new_ordering_service, prefix_consistent
from .peer import COMMITTER, ENDORSER, ORDERER, ClientPeer, Consortium, PeerNode
from .sharing import (
    CLOUD_ID, CREDITS_CHANNEL, CloudNode, EdgeServer, EventLog, SharingParams, Task, make_payload,
)
from .simnet import FaultEntry, LatencyModel, Simulator, derive_seed, trace_jsonl

log = logging.getLogger(__name__)

SCHEMA = "edgesim/1"
U64_MAX = 2 ** 64 - 1


class ConfigError(Exception):
    pass


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LatencyCfg(_Model):
    base: float = Field(0.005, ge=0)
    jitter: float = Field(0.001, ge=0)
    drop_probability: float = Field(0.0, ge=0, le=1)


class OrderingCfg(_Model):
    # f comes first so that n can be checked against it
    f: int = Field(1, ge=0)
    n: int = 4
    max_batch_txs: int = Field(50, ge=1)
    batch_timeout: float = Field(0.2, gt=0)
    view_change_timeout: float = Field(2.0, gt=0)

    @field_validator("n")
    @classmethod
    def _three_f_plus_one(cls, n, info):
        f = info.data.get("f")
        if f is not None and n != 3 * f + 1:
            raise ValueError(f"must equal 3f+1 = {3 * f + 1} for f={f} (got {n})")
        return n


class NodeCfg(_Model):
    id: str = Field(min_length=1)
    kind: Literal["peer", "edge", "cloud"] = "peer"
    roles: list[Literal["endorser", "committer", "orderer"]] = ["endorser", "committer"]
    contracts: list[str] = ["kv"]
    capacity: float = Field(100.0, gt=0)
    speed: float = Field(10.0, gt=0)


class PolicyCfg(_Model):
    endorsers: list[str] = Field(min_length=1)
    threshold: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _threshold(self):
        if self.threshold > len(self.endorsers):
            raise ValueError("threshold exceeds the number of endorsers")
        return self


class ChannelCfg(_Model):
    id: str = Field(min_length=1)
    members: list[str] = Field(min_length=1)
    policies: dict[str, PolicyCfg]


class StageCfg(_Model):
    rate: float = Field(gt=0)
    tx_count: int = Field(ge=0)


class WorkloadCfg(_Model):
    channel: str
    anchor: str
    client: str = "client0"
    input_rate: float = Field(100.0, gt=0)
    total_txs: int = Field(100, ge=0)
    mix: float = Field(0.0, ge=0, le=1)
    contract_id: str = "kv"
    keyspace: int = Field(1000, ge=1)
    rate_schedule: list[StageCfg] | None = None
    drain_time: float = Field(20.0, ge=0)
    resubmit_timeout: float = Field(6.0, gt=0)

    def spec(self) -> WorkloadSpec:
        schedule = tuple((s.rate, s.tx_count) for s in self.rate_schedule) if self.rate_schedule else None
        return WorkloadSpec(self.input_rate, self.total_txs, self.mix, self.contract_id, schedule, self.keyspace)


class TaskCfg(_Model):
    task_id: str
    owner: str
    cost: float = Field(ge=0)
    at: float = Field(0.0, ge=0)
    payload_size: int = Field(64, ge=1)
    deadline: float | None = None


class FaultCfg(_Model):
    time: float = Field(ge=0)
    node: str
    fault: Literal["crash", "recover", "byzantine"]
    behavior: str | None = None


class SharingCfg(_Model):
    enabled: bool = True
    force: bool = False
    k: int = Field(3, ge=1)
    monitor_period: float = Field(1.0, gt=0)
    willingness_timeout: float = Field(0.5, gt=0)
    execution_timeout: float = Field(30.0, gt=0)
    stale_after: float = Field(3.0, gt=0)

    def params(self) -> SharingParams:
        return SharingParams(**self.model_dump())


class HostSamplingCfg(_Model):
    enabled: bool = False
    interval: float = Field(0.5, gt=0)


class ScenarioConfig(_Model):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    schema_: Literal["edgesim/1"] = Field(SCHEMA, alias="schema")
    name: str = "scenario"
    seed: int = Field(0, ge=0, le=U64_MAX)
    end_time: float = Field(10.0, gt=0)
    record_trace: bool = True
    latency: LatencyCfg = LatencyCfg()
    ordering: OrderingCfg = OrderingCfg()
    nodes: list[NodeCfg] = []
    channels: list[ChannelCfg] = []
    workload: WorkloadCfg | None = None
    tasks: list[TaskCfg] = []
    faults: list[FaultCfg] = []
    sharing: SharingCfg = SharingCfg()
    host_sampling: HostSamplingCfg = HostSamplingCfg()

    @model_validator(mode="after")
    def _cross_checks(self):
        orderers = [f"orderer{i}" for i in range(self.ordering.n)]
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("nodes: duplicate node id")
        clash = sorted(set(ids) & set(orderers))
        if clash:
            raise ValueError(f"nodes: ids {clash} are reserved for the ordering service")
        by_id = {n.id: n for n in self.nodes}
        clouds = [n.id for n in self.nodes if n.kind == "cloud"]
        if len(clouds) > 1:
            raise ValueError("nodes: at most one cloud node")
        if clouds and clouds[0] != CLOUD_ID:
            raise ValueError(f"nodes: the cloud node must be named {CLOUD_ID!r}")
        channel_ids = [c.id for c in self.channels]
        if len(set(channel_ids)) != len(channel_ids):
            raise ValueError("channels: duplicate channel id")
        for c in self.channels:
            for m in c.members:
                if m not in by_id:
                    raise ValueError(f"channels.{c.id}.members: unknown node {m!r}")
            for contract, policy in c.policies.items():
                for e in policy.endorsers:
                    if e not in c.members:
                        raise ValueError(f"channels.{c.id}.policies.{contract}: endorser {e!r} is not a member")
                    if "endorser" not in by_id[e].roles or contract not in by_id[e].contracts:
                        raise ValueError(
                            f"channels.{c.id}.policies.{contract}: {e!r} cannot endorse {contract!r}")
        if self.workload is not None:
            w = self.workload
            if w.channel not in channel_ids:
                raise ValueError(f"workload.channel: unknown channel {w.channel!r}")
            members = next(c.members for c in self.channels if c.id == w.channel)
            if w.anchor not in members or "committer" not in by_id[w.anchor].roles:
                raise ValueError(f"workload.anchor: {w.anchor!r} must be a committing member of {w.channel!r}")
            if w.client in by_id or w.client in orderers:
                raise ValueError(f"workload.client: id {w.client!r} is already taken")
            policies = next(c.policies for c in self.channels if c.id == w.channel)
            if w.contract_id not in policies:
                raise ValueError(f"workload.contract_id: {w.contract_id!r} not enabled on {w.channel!r}")
        if self.tasks:
            if not clouds:
                raise ValueError("tasks: a cloud node is required for task sharing")
            task_ids = [t.task_id for t in self.tasks]
            if len(set(task_ids)) != len(task_ids):
                raise ValueError("tasks: duplicate task_id")
            for t in self.tasks:
                if t.owner not in by_id or by_id[t.owner].kind != "edge":
                    raise ValueError(f"tasks.{t.task_id}.owner: {t.owner!r} is not an edge node")
        last = 0.0
        for i, fault in enumerate(self.faults):
            if fault.time < last:
                raise ValueError(f"faults.{i}.time: fault times must be non-decreasing")
            last = fault.time
            if fault.node not in by_id and fault.node not in orderers:
                raise ValueError(f"faults.{i}.node: unknown node {fault.node!r}")
            if fault.fault == "byzantine":
                if fault.node not in orderers:
                    raise ValueError(f"faults.{i}.node: byzantine behaviors exist only for orderers")
                if fault.behavior not in BYZANTINE_BEHAVIORS:
                    raise ValueError(f"faults.{i}.behavior: must be one of {list(BYZANTINE_BEHAVIORS)}")
        return self

    def stage_count(self) -> int:
        if self.workload is not None and self.workload.rate_schedule:
            return len(self.workload.rate_schedule)
        return 1


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "\n".join(lines)


def load_config(data: dict) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(format_validation_error(exc)) from None


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.path=value`` overrides; values parse as JSON when they can."""
    data = copy.deepcopy(data)
    for item in overrides:
        path, sep, raw = item.partition("=")
        if not sep or not path:
            raise ConfigError(f"--set {item!r}: expected key=value")
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        parts = path.split(".")
        target: Any = data
        for part in parts[:-1]:
            if isinstance(target, list):
                target = target[int(part)]
            else:
                target = target.setdefault(part, {})
        last = parts[-1]
        if isinstance(target, list):
            target[int(last)] = value
        else:
            target[last] = value
    return data


# -- world construction -------------------------------------------------------------

@dataclass
class World:
    cfg: ScenarioConfig
    stage: int
    seed: int
    sim: Simulator
    consortium: Consortium
    events: EventLog
    peers: dict[str, PeerNode]
    edges: dict[str, EdgeServer] = field(default_factory=dict)
    cloud: CloudNode | None = None
    bench: BenchClient | None = None
    rate: float = 0.0
    submitted: int = 0
    payloads: dict[str, bytes] = field(default_factory=dict)

    @property
    def service(self):
        return self.consortium.ordering


def stage_seed(seed: int, stage: int) -> int:
    return derive_seed(seed, "stage", str(stage))


def build_world(cfg: ScenarioConfig, stage: int = 0) -> World:
    seed = stage_seed(cfg.seed, stage)
    keyring = KeyRing(seed)
    o = cfg.ordering
    service = new_ordering_service(o.n, o.f, BatchConfig(o.max_batch_txs, o.batch_timeout),
                                   keyring=keyring, view_change_timeout=o.view_change_timeout)
    lat = cfg.latency
    sim = Simulator(seed, LatencyModel(lat.base, lat.jitter, lat.drop_probability), record_trace=cfg.record_trace)
    service.install(sim)
    consortium = Consortium(keyring, service)
    events = EventLog()
    quorum = o.f + 1
    params = cfg.sharing.params()
    world = World(cfg, stage, seed, sim, consortium, events, {})

    for n in cfg.nodes:
        roles = [r for r in n.roles]
        if n.kind == "edge":
            node = EdgeServer(n.id, consortium, n.capacity, n.speed, params, events, quorum,
                              installed_contracts=n.contracts, roles=roles)
            world.edges[n.id] = node
        elif n.kind == "cloud":
            node = CloudNode(consortium, params, events, quorum)
            node.installed_contracts |= set(n.contracts)
            world.cloud = node
        else:
            node = ClientPeer(n.id, consortium, roles, n.contracts, quorum)
        consortium.add_peer(node)
        world.peers[n.id] = node
        sim.add_node(node)

    for c in cfg.channels:
        consortium.create_channel(c.id, c.members, {
            contract: EndorsementPolicy(frozenset(p.endorsers), p.threshold) for contract, p in c.policies.items()
        })
    if world.edges and world.cloud is not None:
        consortium.create_channel(CREDITS_CHANNEL, [CLOUD_ID, *sorted(world.edges)], {
            "task_contract": EndorsementPolicy(frozenset({CLOUD_ID}), 1),
        })
        for edge in world.edges.values():
            edge.start(sim)

    for t in cfg.tasks:
        payload = make_payload(cfg.seed, t.task_id, t.payload_size)
        world.payloads[t.task_id] = payload
        task = Task(t.task_id, t.owner, t.cost, payload, t.deadline)
        sim.set_timer(t.owner, t.at, ("task", task))

    if cfg.workload is not None:
        w = cfg.workload
        spec = w.spec()
        world.rate = spec.stages()[stage][0]
        schedule = generate_workload(spec, cfg.seed, stage)
        world.submitted = len(schedule)
        bench = BenchClient(w.client, consortium, w.channel, w.anchor, schedule, w.contract_id, w.resubmit_timeout)
        sim.add_node(bench)
        bench.start(sim)
        world.bench = bench

    sim.schedule_faults(FaultEntry(f.time, f.node, f.fault, f.behavior) for f in cfg.faults)
    return world


def stage_end_time(cfg: ScenarioConfig, world: World) -> float:
    end = cfg.end_time
    if world.bench is not None and world.bench.schedule:
        end = max(end, world.bench.schedule[-1].at + cfg.workload.drain_time)
    return end


# -- invariants ------------------------------------------------------------------------

def _payload_hits(payload: bytes, text: str) -> bool:
    return payload.hex() in text or payload.decode("latin-1") in text


def check_invariants(world: World, dumps: dict[str, str]) -> dict[str, dict]:
    """Named checks over one finished stage; each maps to {"ok": bool, "detail": str}."""
    sim, service = world.sim, world.service
    results: dict[str, dict] = {}

    def put(name: str, ok: bool, detail: str = "") -> None:
        results[name] = {"ok": bool(ok), "detail": detail}

    honest = [n.replica for n in service.nodes if n.node_id not in sim.byzantine]
    digests = [[b.digest for b in r.delivered] for r in honest]
    tx_seqs = [[tx.tx_id for b in r.delivered for tx in b.txs] for r in honest]
    put("safety", prefix_consistent(digests) and prefix_consistent(tx_seqs),
        f"{len(honest)} honest replicas, delivered heights {[len(d) for d in digests]}")

    dup = []
    for r in honest:
        ids = [tx.tx_id for b in r.delivered for tx in b.txs]
        if len(ids) != len(set(ids)):
            dup.append(service.names[r.replica_id])
    for peer in world.peers.values():
        for cid, ledger in peer.ledgers.items():
            ids = [tx.tx_id for b in ledger.blocks for tx in b.txs]
            if len(ids) != len(set(ids)):
                dup.append(f"{peer.node_id}/{cid}")
    put("no_duplication", not dup, ", ".join(dup))

    broken = []
    for peer in world.peers.values():
        for cid, ledger in peer.ledgers.items():
            if verify_chain(ledger.blocks) is not None or ledger.halted:
                broken.append(f"{peer.node_id}/{cid}")
    put("chains", not broken, ", ".join(broken))

    diverged = []
    for cid in sorted(world.consortium.channels):
        holders = [p for p in world.peers.values() if cid in p.ledgers and COMMITTER in p.roles]
        chains = [[b.block_hash for b in p.ledgers[cid].blocks] for p in holders]
        if not prefix_consistent(chains):
            diverged.append(cid)
            continue
        by_height: dict[int, set[bytes]] = {}
        for p in holders:
            by_height.setdefault(p.ledgers[cid].height, set()).add(p.ledgers[cid].state.digest())
        if any(len(s) > 1 for s in by_height.values()):
            diverged.append(cid)
    put("convergence", not diverged, ", ".join(diverged))

    leaks = []
    for cid, channel in sorted(world.consortium.channels.items()):
        if not cid.startswith("contract-"):
            continue
        payloads = [v for p in world.peers.values() if cid in p.ledgers
                    for k, (v, _) in p.ledgers[cid].state.entries.items() if k.startswith("payload/")]
        for node_id, text in dumps.items():
            if node_id in channel.members:
                continue
            if any(_payload_hits(pl, text) for pl in payloads):
                leaks.append(f"{cid}->{node_id}")
    put("privacy", not leaks, ", ".join(leaks))

    executing = 0.0
    for edge in world.edges.values():
        executing += sum(edge.running.values())
    for cid in sorted(world.consortium.channels):
        if not cid.startswith("contract-"):
            continue
        key = cid[len("contract-"):]
        channel = world.consortium.channels[cid]
        for member in sorted(channel.members):
            peer = world.peers[member]
            raw = peer.ledgers[cid].state.get(contract_record_key(key))
            if raw is None:
                continue
            record = json.loads(raw)
            if record["executor"] == member and record["state"] == "Executing":
                if member not in sim.crashed:
                    executing += float(record["cost"])
    loads = sum(e.load for e in world.edges.values() if e.node_id not in sim.crashed)
    put("load_conservation", abs(loads - executing) < 1e-9, f"loads={loads} executing={executing}")

    if world.bench is not None:
        recs = world.bench.records
        statuses = sum(r.status in ("committed", "invalid", "pending") for r in recs)
        put("metrics_accounting", len(recs) == world.submitted == statuses,
            f"{len(recs)} records for {world.submitted} submissions")
    return results


# -- stage runner -------------------------------------------------------------------------

@dataclass
class StageResult:
    stage: int
    rate: float
    records: list[TxRecord]
    resources: list
    trace_jsonl: str
    events_jsonl: str
    dumps: dict[str, str]
    invariants: dict[str, dict]
    summary: dict
    resource_note: str | None = None


def sharing_summary(world: World) -> dict:
    contracts = {}
    for cid in sorted(world.consortium.channels):
        if not cid.startswith("contract-"):
            continue
        channel = world.consortium.channels[cid]
        holder = world.peers[sorted(channel.members)[0]]
        ledger = holder.ledgers[cid]
        transitions = []
        for block in ledger.blocks[1:]:
            for tx, valid in zip(block.txs, block.validity):
                written = dict(tx.write_set)
                key = contract_record_key(cid[len("contract-"):])
                if valid and key in written:
                    transitions.append(json.loads(written[key])["state"])
        contracts[cid] = {"members": sorted(channel.members), "transitions": transitions}
    return {
        "completed_tasks": sum(len(e.completed) for e in world.edges.values()),
        "total_tasks": len(world.cfg.tasks),
        "contracts": contracts,
        "alarms": [a for p in world.peers.values() for a in p.alarms],
    }


def run_stage(cfg: ScenarioConfig, stage: int = 0) -> StageResult:
    world = build_world(cfg, stage)
    end = stage_end_time(cfg, world)
    sampler = ResourceSampler(cfg.host_sampling.interval) if cfg.host_sampling.enabled else None
    if sampler is not None:
        sampler.start()
    try:
        world.sim.run_until(end)
    finally:
        samples = sampler.stop() if sampler is not None else []
    dumps = {nid: json.dumps(p.dump(), sort_keys=True) for nid, p in sorted(world.peers.items())}
    invariants = check_invariants(world, dumps)
    extra = {"stage": stage}
    summary = sharing_summary(world)
    summary.update({"drops": world.sim.drops, "sent": world.sim.sent, "delivered": world.sim.delivered,
                    "end_time": end, "views": [r.view for r in (n.replica for n in world.service.nodes)]})
    return StageResult(
        stage=stage,
        rate=world.rate,
        records=world.bench.records if world.bench is not None else [],
        resources=samples,
        trace_jsonl=trace_jsonl(world.sim.trace, extra),
        events_jsonl="".join(
            json.dumps({"stage": stage, **e}, sort_keys=True, separators=(",", ":")) + "\n"
            for e in world.events.events),
        dumps=dumps,
        invariants=invariants,
        summary=summary,
        resource_note=None if sampler is None or sampler.available else f"host sampling unavailable: {sampler.error}",
    )


def _run_stage_args(args):
    return run_stage(*args)


@dataclass
class RunResult:
    cfg: ScenarioConfig
    stages: list[StageResult]
    summary_csv: str
    txs_csv: str
    reports: list

    @property
    def ok(self) -> bool:
        return all(c["ok"] for s in self.stages for c in s.invariants.values())

    def violations(self) -> list[str]:
        return [f"stage {s.stage}: {name} ({c['detail']})"
                for s in self.stages for name, c in s.invariants.items() if not c["ok"]]


def run_scenario(cfg: ScenarioConfig, jobs: int = 1) -> RunResult:
    indices = list(range(cfg.stage_count()))
    if jobs > 1 and len(indices) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            stages = list(pool.map(_run_stage_args, [(cfg, i) for i in indices]))
    else:
        stages = [run_stage(cfg, i) for i in indices]
    reports, summary_csv, txs_csv = render_report([(s.rate, s.records, s.resources) for s in stages])
    return RunResult(cfg, stages, summary_csv, txs_csv, reports)


def config_json(cfg: ScenarioConfig) -> dict:
    return cfg.model_dump(mode="json", by_alias=True)


def write_artifacts(result: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(result.summary_csv)
    (out / "txs.csv").write_text(result.txs_csv)
    (out / "trace.jsonl").write_text("".join(s.trace_jsonl for s in result.stages))
    (out / "events.jsonl").write_text("".join(s.events_jsonl for s in result.stages))
    for s in result.stages:
        state_dir = out / "state" / f"stage-{s.stage:02d}"
        state_dir.mkdir(parents=True, exist_ok=True)
        for node_id, text in s.dumps.items():
            (state_dir / f"{node_id}.json").write_text(text + "\n")
    manifest = {
        "tool": "edgesim",
        "version": __version__,
        "seed": result.cfg.seed,
        "stages": len(result.stages),
        "config": config_json(result.cfg),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    verdict = {
        "ok": result.ok,
        "violations": result.violations(),
        "stages": [{"stage": s.stage, "rate_tps": s.rate, "invariants": s.invariants, "summary": s.summary,
                    "resource_note": s.resource_note} for s in result.stages],
    }
    (out / "verdict.json").write_text(json.dumps(verdict, indent=2, sort_keys=True) + "\n")


def verify_artifacts(out: Path) -> list[str]:
    """Offline re-validation of a results directory; returns a list of problems."""
    problems = []
    for path in sorted((out / "state").glob("stage-*/*.json")):
        dump = json.loads(path.read_text())
        for cid, ch in dump.get("channels", {}).items():
            blocks = [Block.from_json(b) for b in ch["blocks"]]
            height = verify_chain(blocks)
            if height is not None:
                problems.append(f"{path.relative_to(out)}: channel {cid} breaks at height {height}")
    grouped = records_from_csv((out / "txs.csv").read_text())
    summary_lines = (out / "summary.csv").read_text().splitlines()
    stage_rates = [(stage, rate) for stage, rate in sorted(grouped)]
    _, recomputed, _ = render_report([(rate, grouped[(stage, rate)], ()) for stage, rate in stage_rates])
    if len(recomputed.splitlines()) != len(summary_lines) and grouped:
        problems.append("summary.csv row count does not match txs.csv stages")
    elif grouped:
        for got, want in zip(summary_lines, recomputed.splitlines()):
            # resource columns cannot be recomputed from per-tx data
            if got.split(",")[:9] != want.split(",")[:9]:
                problems.append(f"summary.csv row {got!r} does not match recomputation {want!r}")
    return problems
