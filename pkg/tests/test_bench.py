import time

import pytest

from edgesim.bench import (
    SUMMARY_COLUMNS, BenchError, ResourceSampler, TxRecord, WorkloadSpec, generate_workload, p95, read_latency,
    read_throughput, records_from_csv, render_report, stage_window, summarize, tx_latency, tx_throughput,
)


def hand_trace():
    return [
        TxRecord("w1", "write", 0.0, confirm_time=20.0, status="committed"),
        TxRecord("w2", "write", 1.0, confirm_time=3.5, status="committed"),
        TxRecord("w3", "write", 2.0, status="invalid"),
        TxRecord("r1", "read", 1.0, reply_time=1.4, status="committed"),
        TxRecord("r2", "read", 3.0, status="pending"),
    ]


class TestWorkload:
    def test_rate_500_schedule(self):
        sched = generate_workload(WorkloadSpec(500, 10000), 1)
        assert len(sched) == 10000
        assert sched[1].at_ns - sched[0].at_ns == 2_000_000
        assert sched[-1].at == 19.998

    def test_rate_6000_gap(self):
        sched = generate_workload(WorkloadSpec(6000, 7), 1)
        assert [s.at_ns for s in sched] == [round(i * 1e9 / 6000) for i in range(7)]

    def test_empty(self):
        assert generate_workload(WorkloadSpec(100, 0), 1) == []

    def test_deterministic_and_mix(self):
        spec = WorkloadSpec(100, 2000, mix=0.25, keyspace=10)
        a, b = generate_workload(spec, 5), generate_workload(spec, 5)
        assert a == b
        reads = sum(s.kind == "read" for s in a) / len(a)
        assert 0.2 < reads < 0.3
        assert {s.key for s in a} <= {f"key{i}" for i in range(10)}

    def test_stages_from_schedule(self):
        spec = WorkloadSpec(1, 0, rate_schedule=((500, 3), (1000, 2)))
        assert spec.stages() == [(500.0, 3), (1000.0, 2)]
        assert len(generate_workload(spec, 0, stage=1)) == 2

    @pytest.mark.parametrize("kw", [dict(input_rate=0, total_txs=1), dict(input_rate=1, total_txs=-1),
                                    dict(input_rate=1, total_txs=1, mix=2.0)])
    def test_spec_validation(self, kw):
        with pytest.raises(BenchError):
            WorkloadSpec(**kw)


class TestFormulas:
    def test_read_latency(self):
        assert read_latency(TxRecord("r", "read", 1.0, reply_time=1.4)) == pytest.approx(0.4)

    def test_read_throughput(self):
        recs = [TxRecord(f"r{i}", "read", 0.0, reply_time=1.0) for i in range(200)]
        assert read_throughput(recs, 4.0) == 50.0

    def test_tx_latency_magnitude(self):
        assert tx_latency(TxRecord("w", "write", 0.0, confirm_time=20.0, status="committed")) == 20.0

    def test_tx_throughput(self):
        recs = [TxRecord(f"w{i}", "write", 0.0, confirm_time=1.0, status="committed") for i in range(100)]
        assert tx_throughput(recs, 4.0) == 25.0

    def test_pending_read_has_no_latency(self):
        with pytest.raises(BenchError):
            read_latency(TxRecord("r", "read", 1.0))

    def test_confirm_before_submit_rejected(self):
        with pytest.raises(BenchError):
            TxRecord("w", "write", 5.0, confirm_time=4.0)

    def test_no_reads(self):
        rep = summarize([TxRecord("w", "write", 0.0, confirm_time=1.0, status="committed")], 10.0)
        assert rep.rt_rps == 0.0 and rep.rl_mean_s is None

    def test_p95_nearest_rank(self):
        assert p95(list(range(1, 101))) == 95
        assert p95([3.0]) == 3.0
        assert p95([1, 2]) == 2
        assert p95([]) is None

    def test_hand_trace_against_brute_force(self):
        recs = hand_trace()
        rep = summarize(recs, 1.0)
        # independent recomputation
        first = min(r.submit_time for r in recs)
        last = max(t for r in recs for t in (r.confirm_time, r.reply_time) if t is not None)
        window = last - first
        tls = [r.confirm_time - r.submit_time for r in recs if r.kind == "write" and r.status == "committed"]
        rls = [r.reply_time - r.submit_time for r in recs if r.kind == "read" and r.reply_time is not None]
        assert abs(window - 20.0) < 1e-9 and abs(rep.window_s - window) < 1e-9
        assert abs(rep.tl_mean_s - sum(tls) / len(tls)) < 1e-9
        assert abs(rep.tt_tps - len(tls) / window) < 1e-9
        assert abs(rep.rl_mean_s - sum(rls) / len(rls)) < 1e-9
        assert abs(rep.rt_rps - len(rls) / window) < 1e-9
        assert (rep.committed, rep.invalid, rep.pending) == (3, 1, 1)

    def test_window_empty(self):
        assert stage_window([]) == 0.0
        assert stage_window([TxRecord("w", "write", 1.0)]) == 0.0


class TestReport:
    def test_rows_sorted_by_rate_and_columns(self):
        stages = [(float(r), hand_trace(), []) for r in range(6000, 0, -500)]
        reports, summary, detail = render_report(stages)
        lines = summary.splitlines()
        assert lines[0].split(",") == list(SUMMARY_COLUMNS)
        rates = [float(line.split(",")[0]) for line in lines[1:]]
        assert rates == sorted(rates) and len(rates) == 12

    def test_all_invalid(self):
        recs = [TxRecord(f"w{i}", "write", 0.1 * i, status="invalid") for i in range(5)]
        rep = render_report([(10.0, recs, [])])[0][0]
        assert (rep.tt_tps, rep.committed, rep.invalid) == (0.0, 0, 5)

    def test_rerender_identical(self):
        a = render_report([(10.0, hand_trace(), [])])
        b = render_report([(10.0, hand_trace(), [])])
        assert a[1:] == b[1:]

    def test_detail_csv_round_trip(self):
        _, summary, detail = render_report([(10.0, hand_trace(), [])])
        grouped = records_from_csv(detail)
        (key, recs), = grouped.items()
        assert key == (0, 10.0)
        assert render_report([(10.0, recs, [])])[1] == summary

    def test_missing_values_are_blank(self):
        _, summary, _ = render_report([(10.0, [], [])])
        assert summary.splitlines()[1] == "10.0,0,0,0,,,0.0,,0.0,,"


class TestResources:
    def test_disabled_sampling_empty(self):
        rep = summarize(hand_trace(), 1.0, [])
        assert rep.resources == [] and rep.cpu_pct_mean is None and rep.mem_mb_mean is None

    def test_samples_spaced_by_interval(self):
        sampler = ResourceSampler(0.1)
        assert sampler.available
        with sampler:
            time.sleep(0.45)
        ts = [s.t for s in sampler.samples]
        gaps = [b - a for a, b in zip(ts[1:-2], ts[2:-1])]
        assert len(ts) >= 4
        assert all(0.05 < g < 0.5 for g in gaps)

    def test_memory_growth_visible(self):
        sampler = ResourceSampler(1.0)
        base = sampler.sample().memory_mb
        buf = bytearray(100 * 2 ** 20)
        for i in range(0, len(buf), 4096):
            buf[i] = 1
        grown = sampler.sample().memory_mb
        del buf
        assert grown - base >= 90
