from __future__ import annotations

import csv
import io
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import pytest

from onticlab import cli
from onticlab.modelio import shipped_model_path

GOLDEN = Path(__file__).parent / "golden"
REGEN = os.environ.get("ONTICLAB_REGEN_GOLDEN") == "1"

GOLDEN_CASES = {
    "verify_seed7.json": ["verify", "--seed", "7"],
    "bound_E0.5.csv": ["bound", "--epsilon-total", "0.5", "--format", "csv"],
    "bound_E1.json": ["bound", "--epsilon-total", "1.0"],
    "sweep_small.csv": ["sweep", "--c-sq", "1/3,2/3", "--c-sq", "1/2,1/2", "--big-n", "2", "4"],
    "model_bb.json": ["model", str(shipped_model_path("beltrametti_bugajski"))],
    "model_counterexample.json": ["model", str(shipped_model_path("deterministic_counterexample"))],
}
GOLDEN_EXIT = {"model_counterexample.json": 1}


def run(argv, tmp_path, name="out"):
    out = tmp_path / name
    code = cli.main([*argv, "--out", str(out)])
    return code, (out.read_text(encoding="utf-8") if out.exists() else None)


@pytest.mark.parametrize("name", sorted(GOLDEN_CASES))
def test_golden(name, tmp_path):
    code, text = run(GOLDEN_CASES[name], tmp_path)
    assert code == GOLDEN_EXIT.get(name, 0)
    path = GOLDEN / name
    if REGEN:
        GOLDEN.mkdir(exist_ok=True)
        path.write_text(text, encoding="utf-8", newline="")
    assert text == path.read_text(encoding="utf-8")


def test_same_seed_same_bytes(tmp_path):
    _, a = run(["verify", "--seed", "11"], tmp_path, "a")
    _, b = run(["verify", "--seed", "11"], tmp_path, "b")
    assert a == b


def test_seed_changes_the_random_checks(tmp_path):
    _, a = run(["verify", "--seed", "1"], tmp_path, "a")
    _, b = run(["verify", "--seed", "2"], tmp_path, "b")
    assert json.loads(a)["config"]["seed"] == 1
    assert a != b


def test_parallel_sweep_matches_serial(tmp_path):
    argv = ["sweep", "--big-n", "2", "4", "8", "--no-oracle"]
    _, serial = run(argv, tmp_path, "s")
    _, par = run([*argv, "--jobs", "3"], tmp_path, "p")
    assert serial == par


def test_stdout_and_out_agree(tmp_path, capsys):
    argv = ["bound", "--epsilon-total", "1.0"]
    assert cli.main(argv) == 0
    printed = capsys.readouterr().out
    _, written = run(argv, tmp_path)
    assert printed == written


def test_timing_goes_to_stderr(capsys):
    cli.main(["bound", "--epsilon-total", "1.0"])
    captured = capsys.readouterr()
    assert "wall-time" in captured.err
    assert "wall" not in captured.out


# --------------------------------------------------------------------------
# exit-code contract


@pytest.mark.parametrize(
    "argv",
    [
        ["verify", "--no-such-flag"],
        ["frobnicate"],
        [],
        ["verify", "--c-sq", "1/3,1/3"],
        ["verify", "--c-sq", "abc"],
        ["verify", "--eps", "-1"],
        ["bound"],
        ["sweep", "--big-n", "0"],
        ["verify", "--inject-fault", "nonsense"],
    ],
)
def test_usage_errors_exit_2(argv, capsys):
    assert cli.main(argv) == 2


def test_schema_error_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    doc = json.loads(shipped_model_path("deterministic_counterexample").read_text(encoding="utf-8"))
    doc["responses"][0]["rows"][0] = [0.7, 0.7]
    bad.write_text(json.dumps(doc), encoding="utf-8")
    assert cli.main(["model", str(bad)]) == 2
    assert "/responses/0/rows" in capsys.readouterr().err


def test_truncated_model_exits_2(tmp_path, capsys):
    bad = tmp_path / "cut.json"
    bad.write_text('{"space": ["l1", ', encoding="utf-8")
    assert cli.main(["model", str(bad)]) == 2


def test_missing_model_file_exits_2(tmp_path, capsys):
    assert cli.main(["model", str(tmp_path / "absent.json")]) == 2


def test_tiny_total_error_exits_3(capsys):
    assert cli.main(["bound", "--epsilon-total", "0.01"]) == 3
    assert "required" in capsys.readouterr().err


def test_support_cap_exits_3(monkeypatch, capsys):
    monkeypatch.setenv("ONTICLAB_CAP_SUPPORT", "5")
    assert cli.main(["verify"]) == 3


@pytest.mark.parametrize(
    "fault,check",
    [
        ("response-row", "ontic.orbit.reproduce"),
        ("kernel-row", "ontic.orbit.reproduce-transformed"),
        ("closed-form", "embezzle.closed-form-oracle"),
    ],
)
def test_injected_fault_exits_1_and_names_check(fault, check, tmp_path, capsys):
    code, text = run(["verify", "--inject-fault", fault], tmp_path)
    assert code == 1
    assert f"FAIL {check}:" in capsys.readouterr().err
    failed = [c["name"] for c in json.loads(text)["checks"] if not c["pass"]]
    assert check in failed


def test_exit_codes_are_exclusive():
    codes = {cli.EXIT_PASS, cli.EXIT_FAIL, cli.EXIT_USAGE, cli.EXIT_RESOURCE}
    assert codes == {0, 1, 2, 3}


# --------------------------------------------------------------------------
# sweep content


def read_csv(text):
    return list(csv.reader(io.StringIO(text)))


def test_single_point_sweep(tmp_path):
    code, text = run(["sweep", "--c-sq", "1/3,2/3", "--big-n", "4"], tmp_path)
    assert code == 0
    rows = read_csv(text)
    assert len(rows) == 2
    assert rows[0] == cli.sweep_header(2)
    assert float(rows[1][rows[0].index("fidelity")]) == pytest.approx(0.91066399385633157, abs=1e-12)


def test_chain_term_depends_only_on_L(tmp_path):
    _, text = run(
        ["sweep", "--big-n", "2", "8", "--eps", "0.05", "0.1", "--chain-l", "1", "3", "--no-oracle"], tmp_path
    )
    rows = read_csv(text)
    head, body = rows[0], rows[1:]
    by_l = {}
    for r in body:
        by_l.setdefault(r[head.index("L")], set()).add(r[head.index("term_chain")])
    assert all(len(v) == 1 for v in by_l.values())
    assert len(set().union(*by_l.values())) == 2


def test_fidelity_column_non_decreasing(tmp_path):
    _, text = run(["sweep", "--c-sq", "1/4,3/4", "--no-oracle"], tmp_path)
    rows = read_csv(text)
    col = rows[0].index("fidelity")
    fids = [float(r[col]) for r in rows[1:]]
    assert len(fids) == 5
    assert all(b >= a for a, b in zip(fids, fids[1:]))


def test_bound_json_fields(tmp_path):
    _, text = run(["bound", "--epsilon-total", "0.5"], tmp_path)
    rec = json.loads(text)["bound"]
    assert rec["L"] == 15
    assert rec["N_digits"] == 89 and rec["N"].startswith("27766643368392503236")
    assert rec["total"] == pytest.approx(0.4899163344260058, rel=1e-12)


def test_console_script_runs(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "onticlab.cli", "bound", "--epsilon-total", "1.0"],
        capture_output=True,
        text=True,
        check=False,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["bound"]["L"] == 7


def test_verify_is_fast(tmp_path):
    start = time.perf_counter()
    code, _ = run(["verify"], tmp_path)
    assert code == 0
    assert time.perf_counter() - start < 60
