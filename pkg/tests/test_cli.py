import json
import subprocess
import sys
from pathlib import Path

import pytest

from acbilevel.cli import InputError, main, parse_storage

ROOT = Path(__file__).resolve().parents[1]


def _run(tmp_path, *args):
    return main([*args, "--out-dir", str(tmp_path)])


def test_import_fixture_and_matpower(tmp_path, capsys):
    assert _run(tmp_path, "import", "--case", "arbitrage_three_bus") == 0
    data = json.loads((tmp_path / "case.json").read_text())
    assert data["storage"]["bus"] == 3 and data["horizon"] == 2
    assert _run(tmp_path, "import", "--case", str(ROOT / "cases" / "ieee14.m"),
                "--storage", "bus=9,soe_max=1,s_max=0.5") == 0
    assert "14 buses" in capsys.readouterr().out
    assert json.loads((tmp_path / "case.json").read_text())["storage"]["bus"] == 9


def test_presolve_writes_flags(tmp_path):
    assert _run(tmp_path, "presolve", "--case", "three_bus", "--phi-threshold", "0.5") == 0
    out = json.loads((tmp_path / "presolve.json").read_text())
    assert out["duality_gap"] <= 1e-6 and out["flags_census"]["phi"] > 0
    assert (tmp_path / "flags_lam.csv").read_text().startswith("t,c0")


def test_clear_with_schedule(tmp_path):
    (tmp_path / "s.csv").write_text("t,p_es,q_es\n0,0.2,0\n1,-0.2,0\n")
    assert _run(tmp_path, "clear", "--case", "arbitrage_three_bus", "--schedule", str(tmp_path / "s.csv")) == 0
    out = json.loads((tmp_path / "clear.json").read_text())
    assert out["duality_gap"] <= 1e-6 and len(out["lmp_p"]) == 2


def test_bilevel_and_verify(tmp_path, capsys):
    assert _run(tmp_path, "bilevel", "--case", "arbitrage_three_bus", "--grid-points", "5") == 0
    assert "profit" in capsys.readouterr().out
    assert (tmp_path / "search_trace.csv").exists()
    assert _run(tmp_path, "verify", "--case", "arbitrage_three_bus", "--schedule", str(tmp_path / "schedule.csv")) == 0
    ver = json.loads((tmp_path / "verify.json").read_text())
    assert ver["exact_profit"] > 0


def test_pipeline_with_horizon(tmp_path):
    assert _run(tmp_path, "pipeline", "--case", "five_bus", "--horizon", "2", "--grid-points", "3",
                "--loop-max", "1", "--tol", "1e-8", "--seed", "3") == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["horizon"] == 2 and rep["config"]["seed"] == 3 and rep["config"]["grid_points"] == 3


@pytest.mark.parametrize("args", [
    ["clear", "--case", "no_such_case"],
    ["bilevel", "--case", "two_bus"],
    ["import", "--case", "three_bus", "--storage", "bus=3,soe_max=1"],
    ["presolve", "--case", "three_bus", "--phi-threshold", "2"],
    ["import", "--case", "two_bus", "--horizon", "5"],
])
def test_bad_input_exit_code(tmp_path, args, capsys):
    assert _run(tmp_path, *args) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_storage_spec_parsing(tmp_path):
    u = parse_storage("bus=2,soe_max=1.5,s_max=0.5,eta_ch=0.9")
    assert (u.bus, u.soe_max, u.s_max, u.eta_ch, u.eta_dis) == (2, 1.5, 0.5, 0.9, 1.0)
    path = tmp_path / "st.json"
    path.write_text(json.dumps({"bus": 1, "soe_max": 1, "s_max": 1}))
    assert parse_storage(str(path)).bus == 1
    with pytest.raises(InputError):
        parse_storage("bus=1,soe_max=1,s_max=1,colour=red")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "acbilevel", "import", "--case", "one_bus", "--out-dir",
                           str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0 and "one_bus" in proc.stdout
