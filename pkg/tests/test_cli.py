from __future__ import annotations

import csv
import io
import subprocess
import sys

import pytest

from rdmaemu.bench import cli, harness
from rdmaemu.bench.harness import ResultRow


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_lat_to_stdout(capsys):
    code, out, _ = run_cli(capsys, "--iters", "100", "--size-list", "16,64")
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == list(ResultRow.FIELDS)
    assert len(rows) == 5


def test_out_appends(tmp_path, capsys):
    out = tmp_path / "r.csv"
    for _ in range(2):
        code, stdout, _ = run_cli(capsys, "--iters", "50", "--size-list", "16", "--out", str(out))
        assert code == 0 and stdout == ""
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 4


def test_identical_invocations_identical_output(capsys):
    argv = ("--mode", "matrix", "--iters", "100", "--size-list", "16,4096", "--seed", "3")
    _, a, _ = run_cli(capsys, *argv)
    _, b, _ = run_cli(capsys, *argv)
    assert a == b


def test_check_pass(capsys):
    code, _, err = run_cli(capsys, "--iters", "50", "--size-list", "16", "--check")
    assert code == 0 and "PASS" in err


def test_check_failure_exit_2(monkeypatch, capsys):
    bad = [ResultRow("x", "ablation", "rc", "send", s, "bp", "bp", "no-poll", "overhead_us",
                     v, "us", 1) for s, v in ((16, 0.1), (4096, 10.0))]
    monkeypatch.setattr(cli, "run", lambda cfg: bad)
    code, _, err = run_cli(capsys, "--mode", "ablation", "--check")
    assert code == cli.EXIT_CHECK
    assert "FAIL no-poll overhead flat" in err


@pytest.mark.parametrize("argv", [
    ("--transport", "ud", "--size-list", "8192"),
    ("--transport", "ud", "--op", "write"),
    ("--ablate", "no-fun"),
    ("--iters", "0"),
])
def test_invalid_exit_1(capsys, argv):
    code, _, err = run_cli(capsys, *argv)
    assert code == cli.EXIT_ERROR and err.startswith("bench: error:")


def test_policy_file(tmp_path, capsys):
    p = tmp_path / "deny.txt"
    p.write_text("acl deny * * * *\n")
    code, _, err = run_cli(capsys, "--client-path", "cd", "--policy", str(p), "--iters", "10",
                           "--size-list", "16")
    assert code == cli.EXIT_ERROR       # every op is denied, so latency cannot be measured


def test_bad_policy_file(tmp_path, capsys):
    p = tmp_path / "bad.txt"
    p.write_text("rate 1\n")
    code, _, err = run_cli(capsys, "--client-path", "cd", "--policy", str(p))
    assert code == cli.EXIT_ERROR and "policy line 1" in err


def test_cost_model_override(tmp_path, capsys):
    p = tmp_path / "cost.json"
    p.write_text('{"propagation": 5e-6}')
    _, out, _ = run_cli(capsys, "--iters", "50", "--size-list", "16", "--cost-model", str(p))
    med = float(next(csv.DictReader(io.StringIO(out)))["value"])
    assert med > 5.0


def test_figures(tmp_path, capsys):
    code, _, _ = run_cli(capsys, "--mode", "ablation", "--iters", "50", "--size-list", "16,4096",
                         "--figures", str(tmp_path / "figs"))
    assert code == 0
    assert sorted(p.suffix for p in (tmp_path / "figs").iterdir()) == [".png"] * 4


def test_udp_wire_real_clock(capsys):
    code, out, err = run_cli(capsys, "--wire", "udp", "--iters", "30", "--warmup", "5",
                             "--size-list", "64")
    assert code == 0, err
    med = float(next(csv.DictReader(io.StringIO(out)))["value"])
    assert 0 < med < 1e5


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "rdmaemu.bench.cli", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "--size-list" in res.stdout


def test_sizes_parse():
    assert harness.DEFAULT_SIZES == cli.build_parser().parse_args([]).size_list
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["--size-list", "a,b"])


def test_unknown_cost_field(tmp_path, capsys):
    p = tmp_path / "cost.txt"
    p.write_text("warp_speed 1\n")
    code, _, err = run_cli(capsys, "--cost-model", str(p))
    assert code == cli.EXIT_ERROR and "warp_speed" in err
