import json
import subprocess
import sys

import pytest
from feeders import HOSTING33, IEEE33, UNBALANCED

from oldf.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained33(tmp_path_factory):
    out = tmp_path_factory.mktemp("train33")
    assert run("train", IEEE33, "--out", out, "--scenarios", 20) == EXIT_OK
    return out


def test_pf_single_phase(tmp_path):
    assert run("pf", IEEE33, "--out", tmp_path) == EXIT_OK
    lines = (tmp_path / "solution.csv").read_text().splitlines()
    assert len(lines) == 33  # header plus one row per branch
    assert "np." not in "".join(lines)
    man = json.loads((tmp_path / "manifest.json").read_text())
    for key in ("command", "arguments", "seed", "inputs", "outputs", "status", "versions"):
        assert key in man
    assert man["command"] == "pf" and man["status"] == "ok"
    assert str(IEEE33) in man["inputs"] and len(man["inputs"][str(IEEE33)]) == 64
    assert set(man["versions"]) >= {"oldf", "python", "numpy", "scipy"}


def test_pf_three_phase(tmp_path):
    assert run("pf", UNBALANCED, "--out", tmp_path) == EXIT_OK
    lines = (tmp_path / "solution.csv").read_text().splitlines()
    assert lines[0] == "bus,phase,vm,va_deg,vsq" and len(lines) > 10


def test_train_and_eval(trained33, tmp_path):
    assert "np." not in (trained33 / "parameters.csv").read_text()
    for name in ("params.json", "report.json", "scenarios.csv", "parameters.csv", "manifest.json"):
        assert (trained33 / name).exists()
    assert json.loads((trained33 / "manifest.json").read_text())["seed"] == 0
    rc = run("eval", IEEE33, "--params", trained33 / "params.json", "--out", tmp_path, "--family", "random", "--count", 200)
    assert rc == EXIT_OK
    rows = (tmp_path / "comparison.csv").read_text().splitlines()
    assert rows[0].startswith("case,model,eps_avg") and len(rows) == 3


def test_train_and_eval_three_phase(tmp_path):
    assert run("train", UNBALANCED, "--out", tmp_path / "t", "--scenarios", 10) == EXIT_OK
    assert not (tmp_path / "t" / "parameters.csv").exists()
    assert run("eval", UNBALANCED, "--params", tmp_path / "t" / "params.json", "--out", tmp_path / "e") == EXIT_OK


def test_input_errors(trained33, tmp_path, capsys):
    assert run("pf", tmp_path / "missing.json", "--out", tmp_path) == EXIT_INPUT
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("pf", bad, "--out", tmp_path) == EXIT_INPUT
    # parameters trained on a different network are refused
    rc = run("eval", UNBALANCED, "--params", trained33 / "params.json", "--out", tmp_path)
    assert rc == EXIT_INPUT
    assert "error" in capsys.readouterr().err
    assert run("eval", IEEE33, "--params", trained33 / "params.json", "--family", "file", "--out", tmp_path) == EXIT_INPUT


def test_bad_arguments_exit_2():
    with pytest.raises(SystemExit) as e:
        run("hosting", IEEE33, HOSTING33, "--polygon-facets", 2)
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        run("train", IEEE33, "--scenarios", 0)
    assert e.value.code == 2


def test_topo_explicit_configs(tmp_path):
    sw = tmp_path / "sw.json"
    sw.write_text(
        json.dumps(
            {
                "format": "oldf-switches",
                "switchable": [4, 10, 33, 34],
                "configs": [{"open": [], "close": []}, {"open": [4], "close": [33]}],
            }
        )
    )
    rc = run("topo", IEEE33, "--switches", sw, "--out", tmp_path / "o", "--count", 200, "--jobs", 1, "--strict")
    assert rc == EXIT_OK
    m = (tmp_path / "o" / "eps_matrix.csv").read_text().splitlines()
    assert len(m) == 4 and m[-1].startswith('"LDF"')  # header, two trained rows, LDF baseline
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["topologies"] == 2 and man["diagonal_dominance"] is True
    sw.write_text(json.dumps({"format": "oldf-switches", "switchable": [999]}))
    assert run("topo", IEEE33, "--switches", sw, "--out", tmp_path / "o") == EXIT_INPUT


def test_hosting_ldf_violates_oldf_does_not(tmp_path, capsys):
    assert run("hosting", IEEE33, HOSTING33, "--model", "ldf", "--out", tmp_path / "l") == EXIT_OK
    man = json.loads((tmp_path / "l" / "manifest.json").read_text())
    assert man["voltage_violations"]
    # the worst location is reported with the same bus labels as the violation list
    worst = capsys.readouterr().out.split(" at ")[1].split(";")[0]
    assert int(worst.split("@bus")[1]) in man["voltage_violations"]
    assert run("hosting", IEEE33, HOSTING33, "--model", "ldf", "--strict", "--out", tmp_path / "l") == EXIT_NUMERIC
    assert run("hosting", IEEE33, HOSTING33, "--strict", "--out", tmp_path / "o") == EXIT_OK
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["voltage_violations"] == []
    for name in ("solution.json", "setpoints.csv", "validation.csv"):
        assert (tmp_path / "o" / name).exists()


def test_hosting_infeasible_exit_1(tmp_path):
    doc = json.loads(HOSTING33.read_text())
    doc["v_min_pu"] = 0.99
    bad = tmp_path / "h.json"
    bad.write_text(json.dumps(doc))
    assert run("hosting", IEEE33, bad, "--model", "ldf", "--out", tmp_path) == EXIT_NUMERIC


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "oldf.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "oldf" in res.stdout
