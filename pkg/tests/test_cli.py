import json
import subprocess
import sys

import pytest

from edgesim import scenario
from edgesim.catalog import CATALOG
from edgesim.cli import main


def write_config(tmp_path, name="fault_free", **changes):
    assert main(["scaffold", name, "-o", str(tmp_path / f"{name}.json")]) == 0
    path = tmp_path / f"{name}.json"
    if changes:
        data = json.loads(path.read_text())
        data.update(changes)
        path.write_text(json.dumps(data))
    return path


def small(tmp_path):
    data = json.loads(write_config(tmp_path).read_text())
    data["workload"]["total_txs"] = 60
    path = tmp_path / "small.json"
    path.write_text(json.dumps(data))
    return path


class TestScaffold:
    @pytest.mark.parametrize("name", sorted(CATALOG))
    def test_each_builtin_is_valid(self, name, capsys):
        assert main(["scaffold", name]) == 0
        data = json.loads(capsys.readouterr().out)
        scenario.load_config(data)

    def test_rate_sweep_shape(self, capsys):
        main(["scaffold", "rate_sweep"])
        data = json.loads(capsys.readouterr().out)
        stages = data["workload"]["rate_schedule"]
        assert [s["rate"] for s in stages] == list(range(500, 6001, 500))
        assert all(s["tx_count"] == 10000 for s in stages)

    def test_unknown_name_lists_builtins(self, capsys):
        assert main(["scaffold", "nope"]) == 1
        err = capsys.readouterr().err
        assert all(name in err for name in CATALOG)


class TestRun:
    def test_repeat_runs_identical(self, tmp_path, capsys):
        cfg = small(tmp_path)
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
        for name in ("summary.csv", "txs.csv", "trace.jsonl", "events.jsonl", "verdict.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["seed"] == 42 and manifest["config"]["schema"] == "edgesim/1"
        names = sorted(p.name for p in (tmp_path / "a" / "state" / "stage-00").iterdir())
        assert {"peer0.json", "peer1.json", "peer2.json"} <= set(names)

    def test_seed_flag_changes_output(self, tmp_path):
        cfg = small(tmp_path)
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
        main(["run", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / "b")])
        assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 7
        assert (tmp_path / "a" / "txs.csv").read_text() != (tmp_path / "b" / "txs.csv").read_text()

    def test_bad_replica_count_names_field(self, tmp_path, capsys):
        cfg = small(tmp_path)
        code = main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--set", "ordering.n=3"])
        assert code == 1
        assert "ordering.n" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_override_applies(self, tmp_path):
        cfg = small(tmp_path)
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"),
                     "--set", "workload.total_txs=10", "--set", "workload.mix=0.0"]) == 0
        rows = (tmp_path / "o" / "txs.csv").read_text().splitlines()[1:]
        assert len(rows) == 10 and all(",write," in r for r in rows)

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path, bogus=1)
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        assert "bogus" in capsys.readouterr().err

    def test_unreadable_config(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 1

    def test_env_out_dir(self, tmp_path, monkeypatch):
        cfg = small(tmp_path)
        monkeypatch.setenv("EDGESIM_OUT", str(tmp_path / "env"))
        assert main(["run", "--config", str(cfg)]) == 0
        assert (tmp_path / "env" / "summary.csv").exists()

    def test_violation_exit_code(self, tmp_path, monkeypatch, capsys):
        real = scenario.check_invariants

        def broken(world, dumps):
            out = real(world, dumps)
            out["safety"] = {"ok": False, "detail": "injected"}
            return out

        monkeypatch.setattr(scenario, "check_invariants", broken)
        assert main(["run", "--config", str(small(tmp_path)), "--out", str(tmp_path / "o")]) == 2
        assert "injected" in capsys.readouterr().err
        assert json.loads((tmp_path / "o" / "verdict.json").read_text())["ok"] is False

    def test_jobs_do_not_change_output(self, tmp_path):
        cfg = write_config(tmp_path, "rate_sweep")
        data = json.loads(cfg.read_text())
        data["workload"]["rate_schedule"] = [{"rate": r, "tx_count": 40} for r in (500, 1000, 1500)]
        data["record_trace"] = True
        cfg.write_text(json.dumps(data))
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "one")])
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "many"), "--jobs", "2"])
        for name in ("summary.csv", "txs.csv", "trace.jsonl"):
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "many" / name).read_bytes()
        assert len((tmp_path / "one" / "summary.csv").read_text().splitlines()) == 4


class TestVerify:
    def test_ok_then_tampered(self, tmp_path, capsys):
        out = tmp_path / "o"
        main(["run", "--config", str(small(tmp_path)), "--out", str(out)])
        capsys.readouterr()
        assert main(["verify", str(out)]) == 0
        assert capsys.readouterr().out.strip() == "ok"

        path = out / "state" / "stage-00" / "peer1.json"
        dump = json.loads(path.read_text())
        block = dump["channels"]["bench"]["blocks"][1]
        block["prev_hash"] = "00" * 32
        path.write_text(json.dumps(dump))
        assert main(["verify", str(out)]) == 2
        assert "peer1.json" in capsys.readouterr().err

    def test_summary_mismatch_detected(self, tmp_path, capsys):
        out = tmp_path / "o"
        main(["run", "--config", str(small(tmp_path)), "--out", str(out)])
        lines = (out / "summary.csv").read_text().splitlines()
        cells = lines[1].split(",")
        cells[1] = str(int(cells[1]) + 1)
        (out / "summary.csv").write_text("\n".join([lines[0], ",".join(cells)]) + "\n")
        assert main(["verify", str(out)]) == 2

    def test_not_a_results_dir(self, tmp_path):
        assert main(["verify", str(tmp_path)]) == 1


def test_console_script_version():
    done = subprocess.run([sys.executable, "-m", "edgesim.cli", "--version"], capture_output=True, text=True)
    assert done.returncode == 0 and done.stdout.startswith("edgesim ")
