import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slm import cli
from slm.core import DiagnosticsError


def run_ok(argv, capsys):
    rc = cli.run(argv)
    out = capsys.readouterr()
    assert rc == 0, out.err
    return out.out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestEmitCsv:
    def test_header_only(self, tmp_path):
        p = tmp_path / "e.csv"
        cli.emit_csv([], ["a", "b"], p)
        assert p.read_bytes() == b"a,b\n"

    @given(st.lists(st.tuples(st.floats(allow_nan=False), st.floats(allow_nan=False),
                              st.integers(-10**12, 10**12)), max_size=30))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_bit_exact(self, rows):
        text = cli.emit_csv(rows, ["x", "y", "k"])
        back = list(csv.reader(text.splitlines()))
        assert back[0] == ["x", "y", "k"]
        for orig, parsed in zip(rows, back[1:]):
            assert float(parsed[0]) == orig[0] and float(parsed[1]) == orig[1]
            assert int(parsed[2]) == orig[2]
        assert len(back) == len(rows) + 1

    def test_deterministic_bytes_and_lf(self, tmp_path):
        rows = [(0.1, 1 / 3, True), (2.0, math.pi, False)]
        a = cli.emit_csv(rows, ["t", "v", "flag"], tmp_path / "a.csv")
        b = cli.emit_csv(rows, ["t", "v", "flag"], tmp_path / "b.csv")
        assert a == b
        raw = (tmp_path / "a.csv").read_bytes()
        assert b"\r" not in raw
        assert raw.splitlines()[1] == b"0.10000000000000001,0.33333333333333331,true"

    def test_ragged_rows(self):
        with pytest.raises(ValueError):
            cli.emit_csv([(1.0,)], ["a", "b"])


class TestParseTimes:
    def test_list(self):
        assert cli.parse_times("0.25, 1,4").tolist() == [0.25, 1.0, 4.0]

    def test_lin_and_log(self):
        assert cli.parse_times("lin:0:1:5").tolist() == [0, 0.25, 0.5, 0.75, 1.0]
        g = cli.parse_times("log:0.01:10:50")
        assert g.size == 50 and g[0] == pytest.approx(0.01) and g[-1] == pytest.approx(10.0)

    @pytest.mark.parametrize("spec", ["", "log:0:1:5", "lin:1:0:3", "a,b", "lin:0:1", "lin:0:1:0"])
    def test_bad(self, spec):
        with pytest.raises(cli.UsageError):
            cli.parse_times(spec)


class TestCommands:
    def test_defect_example(self, tmp_path, capsys):
        out = tmp_path / "d.csv"
        summary = run_ok(["defect", "--model", "inverse-bes3", "--x0", "1", "--t", "0.25,1,4",
                          "--paths", "100000", "--seed", "7", "--out", str(out)], capsys)
        rows = read_csv(out)
        assert rows[0] == ["t", "defect", "stderr", "closed_form"]
        for t, d, se, cf in rows[1:]:
            t, d, se, cf = map(float, (t, d, se, cf))
            assert cf == pytest.approx(2 * cli.analytics.normal_cdf(-1 / math.sqrt(t)),
                                       rel=1e-15)
            assert abs(d - cf) < 3 * se
        assert "PASS" in summary

    def test_term_structure_example(self, tmp_path, capsys):
        out = tmp_path / "ts.csv"
        summary = run_ok(["term-structure", "--strike", "0.6", "--t-grid", "log:0.01:10:50",
                          "--out", str(out)], capsys)
        rows = read_csv(out)
        assert len(rows) == 51
        assert "0.6951" in summary

    def test_verify_duality_example(self, capsys):
        out = run_ok(["verify", "duality", "--payoff", "put", "--strike", "2", "--t", "1",
                      "--paths", "100000", "--seed", "7"], capsys)
        lines = out.strip().splitlines()
        assert lines[0] == "t,lhs,lhs_stderr,rhs,rhs_stderr,abs_z"
        assert "lhs=" in lines[-1] and "rhs=" in lines[-1] and lines[-1].endswith("PASS")

    def test_simulate_writes_paths(self, capsys):
        out = run_ok(["simulate", "--model", "gbm", "--t", "0.5,1", "--paths", "3",
                      "--seed", "1"], capsys)
        rows = list(csv.reader(out.strip().splitlines()[:-1]))
        assert rows[0] == ["t", "coord", "mean", "stderr", "absorbed_fraction"]
        assert [r[0] for r in rows[1:]] == ["0.5", "1"]

    @pytest.mark.parametrize("argv", [
        ["price", "--t", "0.1,5", "--strike", "0.6", "--paths", "20000"],
        ["price", "--barriers", "2,4", "--t", "1", "--paths", "2000"],
        ["verify", "scaling", "--t", "1", "--u", "4", "--paths", "20000"],
        ["examples", "ratio", "--t", "0.5,1", "--paths", "5000"],
        ["examples", "size-biased", "--t", "0.25,1", "--paths", "5000"],
        ["examples", "dyson", "--t", "0.1,1", "--paths", "5000"],
        ["examples", "dyson-control", "--t", "0.1,1", "--paths", "5000"],
        ["kelvin", "commutation"],
        ["kelvin", "commutation", "--y", "1,0,0"],
        ["kelvin", "inversion", "--t", "0.1", "--paths", "2000"],
        ["kelvin", "martingale", "--t", "0.1,0.2", "--paths", "2000"],
    ])
    def test_every_command_runs(self, argv, capsys):
        out = run_ok(argv + ["--seed", "3"], capsys)
        lines = out.strip().splitlines()
        assert len(lines) >= 2
        assert "PASS" in lines[-1] or "FAIL" in lines[-1]


class TestExitCodes:
    @pytest.mark.parametrize("argv", [
        ["bogus"],
        ["defect", "--model", "nope", "--seed", "1"],
        ["defect", "--t", "1"],
        ["defect", "--seed", "1", "--t", "x"],
        ["defect", "--seed", "1", "--paths", "0"],
        ["defect", "--seed", "1", "--workers", "0"],
        ["price", "--seed", "1", "--barriers", "0.9", "--paths", "10"],
        ["examples", "dyson", "--seed", "1", "--start", "0,0,1", "--paths", "10"],
    ])
    def test_argument_errors(self, argv, capsys):
        assert cli.run(argv) == 1
        assert capsys.readouterr().err

    def test_unwritable_output(self, tmp_path, capsys):
        target = tmp_path / "missing" / "x.csv"
        assert cli.run(["defect", "--seed", "1", "--paths", "10", "--out", str(target)]) == 1

    def test_diagnostics_error_from_experiment(self, capsys):
        # an arc too small for any of ten paths to exit through it
        argv = ["examples", "conditioned-exit", "--seed", "1", "--paths", "10", "--t", "0.1",
                "--arc-lo", "0", "--arc-hi", "1e-9"]
        assert cli.run(argv) == 2
        assert "diagnostics" in capsys.readouterr().err

    def test_diagnostics_error_mapping(self, monkeypatch, capsys):
        def boom(a):
            raise DiagnosticsError("quadrature failed")

        monkeypatch.setitem(cli.COMMANDS, "defect", boom)
        assert cli.run(["defect", "--seed", "1"]) == 2


class TestConfig:
    def test_config_file_and_override(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"command": "defect", "t": [0.25, 1], "seed": 7,
                                   "paths": 2000}))
        a = cli._parse(["--config", str(cfg)])
        assert (a.command, a.t, a.seed, a.paths) == ("defect", "0.25,1", 7, 2000)
        b = cli._parse(["defect", "--config", str(cfg), "--paths", "50"])
        assert b.paths == 50 and b.seed == 7

    def test_config_matches_flags(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"command": "examples", "which": "ratio", "t": "0.5",
                                   "seed": 4, "paths": 3000}))
        via_cfg = run_ok(["--config", str(cfg)], capsys)
        via_flags = run_ok(["examples", "ratio", "--t", "0.5", "--seed", "4", "--paths", "3000"],
                           capsys)
        assert via_cfg == via_flags

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"command": "defect", "colour": "red", "seed": 1}))
        assert cli.run(["--config", str(cfg)]) == 1

    def test_unreadable(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert cli.run(["--config", str(bad)]) == 1
        assert cli.run(["--config", str(tmp_path / "absent.json")]) == 1


class TestDeterminism:
    @pytest.mark.parametrize("argv", [
        ["defect", "--t", "0.25,1,4", "--paths", "30000"],
        ["examples", "size-biased", "--t", "0.25,0.5,1", "--paths", "20000"],
        ["price", "--barriers", "2,4,8", "--t", "1", "--paths", "10000"],
    ])
    def test_bytes_identical_across_workers(self, argv, tmp_path, capsys):
        blobs = []
        for w in ("1", "3"):
            out = tmp_path / f"w{w}.csv"
            run_ok(argv + ["--seed", "11", "--workers", w, "--out", str(out)], capsys)
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1]

    def test_env_fallback(self, tmp_path, capsys, monkeypatch):
        argv = ["defect", "--t", "1", "--paths", "20000", "--seed", "2"]
        monkeypatch.setenv("SLM_WORKERS", "1")
        a = run_ok(argv, capsys)
        monkeypatch.setenv("SLM_WORKERS", "4")
        b = run_ok(argv, capsys)
        assert a == b


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "slm.cli", "term-structure", "--strike", "0.6",
                           "--t-grid", "lin:0.5:1:3"], capture_output=True, text=True)
    assert proc.returncode == 0
    lines = proc.stdout.strip().splitlines()
    assert lines[0].startswith("t,") and len(lines) == 5
    vals = np.array([float(r.split(",")[0]) for r in lines[1:4]])
    assert vals.tolist() == [0.5, 0.75, 1.0]
