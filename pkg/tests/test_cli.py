import json
import subprocess
import sys

import pytest

from feederlab.cli import main
from feederlab.network import to_canonical_text

from netfactory import chain_net, underreach_feeder


def run_cli(*argv):
    return main(list(argv))


class TestValidate:
    def test_bundled_ieee34(self, capsys):
        assert run_cli("validate", "--network", "case:ieee34") == 0
        out = capsys.readouterr().out
        assert "buses: 34" in out
        assert "ground path: yes" in out

    def test_bundled_ieee37_reports_ungrounded(self, capsys):
        assert run_cli("validate", "--network", "case:ieee37") == 0
        out = capsys.readouterr().out
        assert "ground path: no; SLG faults disabled" in out

    def test_corrupted_file_nonzero_exit(self, tmp_path, capsys):
        bad = tmp_path / "bad.dss"
        bad.write_text("New Circuit.c basekv=4.16\nNew Line.l1 bus1=a ??? bus2=b\n")
        assert run_cli("validate", "--network", str(bad)) == 1
        assert "line 2" in capsys.readouterr().err

    def test_missing_file(self, capsys):
        assert run_cli("validate", "--network", "/nope/missing.dss") == 1

    def test_canonical_output(self, tmp_path):
        out = tmp_path / "canon.dss"
        assert run_cli("validate", "--network", "case:ieee37",
                       "--canonical", str(out)) == 0
        assert out.read_text().startswith("New Circuit.ieee37")


@pytest.fixture
def small_case(tmp_path):
    net = chain_net(3, devices=(1, 2))
    path = tmp_path / "chain.dss"
    path.write_text(to_canonical_text(net))
    return path


class TestRun:
    def test_oracle_run_and_reproducibility(self, small_case, tmp_path, capsys):
        args = ("run", "--network", str(small_case), "--profiles", "synthetic:40:2",
                "--agents", "oracle", "--episodes", "8", "--seed", "5",
                "--out", str(tmp_path / "a"), "--steps", "50")
        assert run_cli(*args) == 0
        out = capsys.readouterr().out
        assert "100.00%" in out
        first = (tmp_path / "a" / "records.jsonl").read_bytes()
        summary1 = (tmp_path / "a" / "summary.csv").read_bytes()

        args2 = args[:-4] + ("--out", str(tmp_path / "b"), "--steps", "50")
        assert run_cli(*args2) == 0
        assert (tmp_path / "b" / "records.jsonl").read_bytes() == first
        assert (tmp_path / "b" / "summary.csv").read_bytes() == summary1

    def test_hold_agents_all_false_negative(self, small_case, tmp_path, capsys):
        assert run_cli(
            "run", "--network", str(small_case), "--profiles", "synthetic:40:2",
            "--agents", "hold", "--episodes", "6", "--seed", "5",
            "--out", str(tmp_path / "h"), "--steps", "50",
            "--fault-prob", "1.0", "--onset-range", "5,10") == 0
        summary = (tmp_path / "h" / "summary.csv").read_text()
        # every episode with an in-region fault is a false negative; upstream
        # faults leave the devices correctly holding
        row = summary.strip().splitlines()[1].split(",")
        assert int(row[2]) + round(float(row[4].rstrip("%")) / 100 * 6) == 6

    def test_records_are_json_lines(self, small_case, tmp_path):
        run_cli("run", "--network", str(small_case), "--profiles", "synthetic:40:2",
                "--agents", "oracle", "--episodes", "3", "--seed", "1",
                "--out", str(tmp_path / "r"), "--steps", "40")
        lines = (tmp_path / "r" / "records.jsonl").read_text().strip().splitlines()
        assert len(lines) == 3
        for line in lines:
            rec = json.loads(line)
            assert rec["v"] == 1
            assert rec["outcome"] in ("correct", "false_positive",
                                      "false_negative", "coordination_failure")


class TestUnderreachCmd:
    def test_underreach_outputs(self, tmp_path, capsys):
        net = underreach_feeder(n_main=3, n_lateral=3)
        path = tmp_path / "ur.dss"
        path.write_text(to_canonical_text(net))
        settings = tmp_path / "agents.json"
        settings.write_text(json.dumps({
            "version": 1,
            "agents": {"d_sub": {"type": "instantaneous_oc", "pickup_amps": 120.0}},
        }))
        assert run_cli(
            "underreach", "--network", str(path), "--profiles", "synthetic:24:1",
            "--agents", str(settings), "--seed", "2", "--out", str(tmp_path / "u"),
            "--kinds", "3ph", "--scenarios-per-bus", "1", "--steps", "40") == 0
        csv = (tmp_path / "u" / "underreach.csv").read_text()
        assert "missed_some" in csv
        dot = (tmp_path / "u" / "underreach.dot").read_text()
        assert dot.startswith("digraph")


class TestDatasetCmd:
    def test_dataset_files(self, small_case, tmp_path):
        assert run_cli(
            "dataset", "--network", str(small_case), "--profiles", "synthetic:40:2",
            "--episodes", "2", "--seed", "3", "--out", str(tmp_path / "d"),
            "--steps", "40") == 0
        csv = (tmp_path / "d" / "dataset.csv").read_text()
        assert csv.startswith("episode,device,step,label,")
        sidecar = json.loads((tmp_path / "d" / "dataset.summary.json").read_text())
        assert sidecar["rows"] == len(csv.strip().splitlines()) - 1


class TestMakeSettings:
    def test_generated_settings_usable(self, small_case, tmp_path):
        out_file = tmp_path / "auto.json"
        assert run_cli("make-settings", "--network", str(small_case),
                       "--profiles", "synthetic:24:1", "--seed", "1",
                       "--out-file", str(out_file)) == 0
        doc = json.loads(out_file.read_text())
        assert doc["version"] == 1
        assert set(doc["agents"]) == {"d1", "d2"}
        assert doc["agents"]["d1"]["type"] == "inverse_time_oc"


class TestServeStdio:
    def test_stdio_protocol_round_trip(self, small_case):
        proc = subprocess.Popen(
            [sys.executable, "-m", "feederlab.cli", "serve",
             "--network", str(small_case), "--profiles", "synthetic:24:1",
             "--stdio", "--steps", "30"],
            stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True)
        try:
            requests = [
                {"v": 1, "cmd": "spec"},
                {"v": 1, "cmd": "reset", "seed": 4},
                {"v": 1, "cmd": "step", "actions": {"d1": 0, "d2": 0}},
                {"v": 1, "cmd": "close"},
            ]
            out, _ = proc.communicate(
                "".join(json.dumps(r) + "\n" for r in requests), timeout=60)
            replies = [json.loads(line) for line in out.strip().splitlines()]
            assert replies[0]["spec"]["devices"] == ["d1", "d2"]
            assert "obs" in replies[1]
            assert replies[2]["done"] is False
            assert replies[3] == {"v": 1, "ok": True}
        finally:
            proc.kill()
