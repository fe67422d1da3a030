"""Workload generation, metrics and reports.

Metrics per stage:

* RL  read latency, reply time minus submit time of a completed read
* RT  read throughput, completed reads over the stage window
* TL  transaction latency, confirmation (block commit) time minus submit time
* TT  transaction throughput, committed write transactions over the stage window

The window runs from the first submission to the last completion in the
stage. Invalid transactions are counted but kept out of TL and TT.
"""
from __future__ import annotations

import csv
import io
import math
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .contracts import encode_args
from .peer import Consortium, QueryMsg, QueryReply, EndorsementReply, TxClient
from .simnet import NS, Simulator, derive_seed, to_s

SUMMARY_COLUMNS = ("rate_tps", "committed", "invalid", "pending", "tl_mean_s", "tl_p95_s",
                   "tt_tps", "rl_mean_s", "rt_rps", "cpu_pct_mean", "mem_mb_mean")
TX_COLUMNS = ("stage", "rate_tps", "tx_id", "kind", "status", "submit_time", "confirm_time", "reply_time")


class BenchError(Exception):
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    input_rate: float
    total_txs: int
    mix: float = 0.0
    contract_id: str = "kv"
    rate_schedule: tuple[tuple[float, int], ...] | None = None
    keyspace: int = 1000

    def __post_init__(self):
        if self.input_rate <= 0:
            raise BenchError("input_rate must be > 0")
        if self.total_txs < 0:
            raise BenchError("total_txs must be >= 0")
        if not 0.0 <= self.mix <= 1.0:
            raise BenchError("mix must be in [0, 1]")
        if self.keyspace < 1:
            raise BenchError("keyspace must be >= 1")
        for rate, count in self.rate_schedule or ():
            if rate <= 0 or count < 0:
                raise BenchError("rate_schedule entries need rate > 0 and tx_count >= 0")

    def stages(self) -> list[tuple[float, int]]:
        if self.rate_schedule:
            return [(float(r), int(c)) for r, c in self.rate_schedule]
        return [(float(self.input_rate), self.total_txs)]


@dataclass(frozen=True)
class Submission:
    index: int
    at_ns: int
    kind: str  # "read" | "write"
    key: str
    value: int

    @property
    def at(self) -> float:
        return to_s(self.at_ns)


def generate_workload(spec: WorkloadSpec, seed: int, stage: int = 0) -> list[Submission]:
    """Deterministic schedule for one stage, one submission every 1/rate seconds."""
    rate, count = spec.stages()[stage]
    rng = random.Random(derive_seed(seed, "workload", str(stage)))
    out = []
    for i in range(count):
        kind = "read" if rng.random() < spec.mix else "write"
        key = f"key{rng.randrange(spec.keyspace)}"
        out.append(Submission(i, round(i * NS / rate), kind, key, rng.randrange(1 << 30)))
    return out


@dataclass
class TxRecord:
    tx_id: str
    kind: str
    submit_time: float
    confirm_time: float | None = None
    reply_time: float | None = None
    status: str = "pending"  # committed | invalid | pending

    def __post_init__(self):
        if self.confirm_time is not None and self.confirm_time < self.submit_time:
            raise BenchError(f"{self.tx_id}: confirm_time precedes submit_time")

    @property
    def done_time(self) -> float | None:
        return self.reply_time if self.kind == "read" else self.confirm_time


# -- metric formulas --------------------------------------------------------------

def read_latency(record: TxRecord) -> float:
    if record.kind != "read" or record.reply_time is None:
        raise BenchError(f"{record.tx_id} is not a completed read")
    return record.reply_time - record.submit_time


def tx_latency(record: TxRecord) -> float:
    if record.kind != "write" or record.status != "committed" or record.confirm_time is None:
        raise BenchError(f"{record.tx_id} is not a committed transaction")
    return record.confirm_time - record.submit_time


def completed_reads(records: Iterable[TxRecord]) -> list[TxRecord]:
    return [r for r in records if r.kind == "read" and r.reply_time is not None]


def committed_writes(records: Iterable[TxRecord]) -> list[TxRecord]:
    return [r for r in records if r.kind == "write" and r.status == "committed" and r.confirm_time is not None]


def read_throughput(records: Iterable[TxRecord], window: float) -> float:
    return len(completed_reads(records)) / window if window > 0 else 0.0


def tx_throughput(records: Iterable[TxRecord], window: float) -> float:
    return len(committed_writes(records)) / window if window > 0 else 0.0


def stage_window(records: Sequence[TxRecord]) -> float:
    """First submission to last completion; 0 when nothing completed."""
    ends = [r.done_time for r in records if r.done_time is not None]
    if not records or not ends:
        return 0.0
    return max(ends) - min(r.submit_time for r in records)


def mean(values: Sequence[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def p95(values: Sequence[float]) -> float | None:
    """Nearest-rank 95th percentile."""
    if not values:
        return None
    ordered = sorted(values)
    return ordered[math.ceil(0.95 * len(ordered)) - 1]


# -- host resource sampling ----------------------------------------------------------

@dataclass
class ResourceSample:
    t: float
    cpu_percent: float
    memory_mb: float


class ResourceSampler:
    """Samples this process's CPU percentage and resident memory on a background thread."""

    def __init__(self, interval: float = 0.5):
        self.interval = interval
        self.samples: list[ResourceSample] = []
        self.available = True
        self.error: str | None = None
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        try:
            import psutil
            self._proc = psutil.Process()
            self._proc.cpu_percent(None)
        except Exception as exc:  # unsupported platform or missing package
            self.available = False
            self.error = repr(exc)

    def sample(self) -> ResourceSample | None:
        if not self.available:
            return None
        s = ResourceSample(time.monotonic(), self._proc.cpu_percent(None), self._proc.memory_info().rss / 2 ** 20)
        self.samples.append(s)
        return s

    def _loop(self) -> None:
        while not self._stop.wait(self.interval):
            self.sample()

    def start(self) -> "ResourceSampler":
        if self.available and self._thread is None:
            self.sample()
            self._thread = threading.Thread(target=self._loop, name="resource-sampler", daemon=True)
            self._thread.start()
        return self

    def stop(self) -> list[ResourceSample]:
        if self._thread is not None:
            self._stop.set()
            self._thread.join()
            self._thread = None
            self.sample()
        return self.samples

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


# -- reports ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    rate_tps: float
    committed: int
    invalid: int
    pending: int
    tl_samples: list[float]
    tt_tps: float
    rl_samples: list[float]
    rt_rps: float
    window_s: float
    resources: list[ResourceSample] = field(default_factory=list)

    @property
    def tl_mean_s(self):
        return mean(self.tl_samples)

    @property
    def tl_p95_s(self):
        return p95(self.tl_samples)

    @property
    def rl_mean_s(self):
        return mean(self.rl_samples)

    @property
    def cpu_pct_mean(self):
        return mean([s.cpu_percent for s in self.resources])

    @property
    def mem_mb_mean(self):
        return mean([s.memory_mb for s in self.resources])

    def row(self) -> dict:
        return {c: getattr(self, c) for c in SUMMARY_COLUMNS}


def summarize(records: Sequence[TxRecord], rate_tps: float,
              resources: Sequence[ResourceSample] = ()) -> MetricsReport:
    window = stage_window(records)
    return MetricsReport(
        rate_tps=rate_tps,
        committed=sum(r.status == "committed" for r in records),
        invalid=sum(r.status == "invalid" for r in records),
        pending=sum(r.status == "pending" for r in records),
        tl_samples=[tx_latency(r) for r in committed_writes(records)],
        tt_tps=tx_throughput(records, window),
        rl_samples=[read_latency(r) for r in completed_reads(records)],
        rt_rps=read_throughput(records, window),
        window_s=window,
        resources=list(resources),
    )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_report(stages: Sequence[tuple[float, Sequence[TxRecord], Sequence[ResourceSample]]]
                  ) -> tuple[list[MetricsReport], str, str]:
    """Reports plus the summary CSV (one row per stage, rates ascending) and per-tx CSV."""
    ordered = sorted(enumerate(stages), key=lambda item: (item[1][0], item[0]))
    reports = []
    summary = io.StringIO()
    detail = io.StringIO()
    sw = csv.writer(summary, lineterminator="\n")
    dw = csv.writer(detail, lineterminator="\n")
    sw.writerow(SUMMARY_COLUMNS)
    dw.writerow(TX_COLUMNS)
    for index, (rate, records, resources) in ordered:
        report = summarize(records, rate, resources)
        reports.append(report)
        sw.writerow([_fmt(v) for v in report.row().values()])
        for r in records:
            dw.writerow([index, _fmt(rate), r.tx_id, r.kind, r.status, _fmt(r.submit_time),
                         _fmt(r.confirm_time), _fmt(r.reply_time)])
    return reports, summary.getvalue(), detail.getvalue()


def records_from_csv(text: str) -> dict[tuple[int, float], list[TxRecord]]:
    """Parse a per-tx CSV back into records grouped by (stage, rate)."""
    out: dict[tuple[int, float], list[TxRecord]] = {}

    def opt(value: str) -> float | None:
        return float(value) if value else None

    for row in csv.DictReader(io.StringIO(text)):
        key = (int(row["stage"]), float(row["rate_tps"]))
        out.setdefault(key, []).append(TxRecord(
            row["tx_id"], row["kind"], float(row["submit_time"]),
            opt(row["confirm_time"]), opt(row["reply_time"]), row["status"],
        ))
    return out


# -- benchmark client ---------------------------------------------------------------------

class BenchClient:
    """Drives one stage's workload against a channel.

    Writes go through endorsement and ordering and are confirmed when the
    anchor peer commits the containing block. Reads are answered by the
    anchor peer from its committed state.
    """

    def __init__(self, node_id: str, consortium: Consortium, channel_id: str, anchor: str,
                 schedule: Sequence[Submission], contract_id: str = "kv", resubmit_timeout: float = 6.0):
        self.node_id = node_id
        self.consortium = consortium
        self.channel_id = channel_id
        self.anchor = anchor
        self.schedule = list(schedule)
        self.contract_id = contract_id
        self.client = TxClient(node_id, consortium, None, resubmit_timeout)
        self.records: list[TxRecord] = []
        self._reads: dict[int, TxRecord] = {}
        consortium.peers[anchor].commit_listeners.append(self.client.on_commit)

    def start(self, sim: Simulator) -> None:
        if self.schedule:
            sim.set_timer_at(self.node_id, self.schedule[0].at_ns, ("submit", 0))

    def on_timer(self, sim: Simulator, tag) -> None:
        if tag[0] == "submit":
            i = tag[1]
            self._submit(sim, self.schedule[i])
            if i + 1 < len(self.schedule):
                sim.set_timer_at(self.node_id, self.schedule[i + 1].at_ns, ("submit", i + 1))
        elif tag[0] == "resubmit":
            self.client.on_resubmit(sim, tag[1])

    def _submit(self, sim: Simulator, sub: Submission) -> None:
        now = sim.now
        if sub.kind == "read":
            record = TxRecord(f"read-{sub.index}", "read", now)
            self.records.append(record)
            self._reads[sub.index] = record
            sim.send(self.node_id, self.anchor, QueryMsg(sub.index, self.channel_id, sub.key))
            return
        record = TxRecord("", "write", now)
        self.records.append(record)

        def done(tx_id, status, now_ns, detail):
            if status == "valid":
                record.status, record.confirm_time = "committed", to_s(now_ns)
            else:
                record.status = "invalid"

        args = encode_args({"op": "put", "key": sub.key, "value": sub.value})
        record.tx_id = self.client.invoke(sim, self.channel_id, self.contract_id, args, on_done=done).hex()

    def on_message(self, sim: Simulator, src: str, msg) -> None:
        if isinstance(msg, EndorsementReply):
            self.client.on_reply(sim, msg)
        elif isinstance(msg, QueryReply):
            record = self._reads.pop(msg.query_id, None)
            if record is not None:
                record.reply_time = sim.now
                record.status = "committed"
