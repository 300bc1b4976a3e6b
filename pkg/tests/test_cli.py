import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from swdecay.cli import main
from swdecay.data import TrialDataset, write_dataset_csv
from swdecay.simulation import SimScenario, generate_dataset

AEP = ["design", "samplesize", "--clusters", "15", "--periods", "4", "--delta", "0.325", "--tau", "0.03",
       "--rho", "0.2", "--test", "t", "--dof", "i-2", "--target", "0.8"]


def run(capsys, argv):
    code = main(argv)
    out = capsys.readouterr()
    return code, (json.loads(out.out) if out.out.strip() else None), out.err


def header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


def test_design_samplesize_aep(capsys):
    code, rep, _ = run(capsys, AEP)
    assert code == 0
    assert rep["cohort_size"] == 22 and rep["dof"] == 13
    assert rep["power"] == pytest.approx(0.805, abs=0.0015)
    assert rep["power_at_n_minus_1"] == pytest.approx(0.794, abs=0.0015)
    assert rep["inputs"]["delta"] == 0.325


def test_design_samplesize_attrition(capsys):
    _, base, _ = run(capsys, AEP)
    _, rep, _ = run(capsys, AEP + ["--gamma", "0.2"])
    assert rep["total_after_attrition"] == math.ceil(base["total_individuals"] / 0.8)


def test_design_samplesize_core(capsys):
    code, rep, _ = run(capsys, ["design", "samplesize", "--clusters-per-step", "4,4,3", "--delta", "0.35",
                                "--tau", "0.1", "--rho", "0.8", "--dof", "9"])
    assert code == 0 and rep["cohort_size"] == 9 and rep["clusters"] == 11


def test_design_samplesize_unattainable(capsys):
    code, rep, err = run(capsys, ["design", "samplesize", "-I", "3", "-T", "4", "--delta", "0.05",
                                  "--tau", "0.3", "--rho", "0.8", "--test", "z"])
    assert code == 2 and rep["attainable"] is False and "unattainable" in err


def test_design_power_and_region_error(capsys):
    code, rep, _ = run(capsys, ["design", "power", "-I", "15", "-T", "4", "-N", "21", "--delta", "0.325",
                                "--tau", "0.03", "--rho", "0.2"])
    assert code == 0 and rep["power"] == pytest.approx(0.794, abs=0.0015)
    code, rep, err = run(capsys, ["design", "power", "-I", "15", "-T", "4", "-N", "21", "--delta", "0.325",
                                  "--tau", "0.03", "--rho", "1.2"])
    assert code == 2 and rep is None and "rho" in err


def test_design_de(capsys):
    code, rep, _ = run(capsys, ["design", "de", "-S", "3", "-c", "1", "-N", "22", "--tau", "0.03",
                                "--rho", "0.2", "--n-individual", "348"])
    assert code == 0
    assert rep["design_effect"] == pytest.approx(0.94, abs=0.005)
    assert rep["clusters"] == pytest.approx(14.8, abs=0.05)


def test_design_sensitivity_grid(capsys, tmp_path):
    out = tmp_path / "grid.csv"
    code, rep, _ = run(capsys, ["design", "sensitivity", "-I", "15", "-T", "4", "-N", "22", "--delta", "0.325",
                                "--tau-grid", "0:0.1:3", "--d-grid", "0.1:0.5:3", "--grid-out", str(out),
                                "--tau", "0.03", "--rho", "0.2"])
    assert code == 0 and rep["points"] == 9
    assert header(out) == ["tau", "d", "power"]


def test_design_compare_grids(capsys, tmp_path):
    be, ed = tmp_path / "be.csv", tmp_path / "ed.csv"
    code, rep, _ = run(capsys, ["design", "compare", "-I", "15", "-T", "4", "-N", "22", "--tau", "0.03",
                                "--rho", "0.2", "--alpha1-grid", "0:0.02:3", "--alpha2-grid", "0:0.4:3",
                                "--be-grid-out", str(be), "--tau-grid", "0.02:0.1:2", "--d-grid", "0.2:0.8:2",
                                "--ed-grid-out", str(ed), "--alpha1-be", "0.01", "--alpha2-be", "0.2"])
    assert code == 0
    assert header(be) == ["alpha1_be", "alpha2_be", "ratio"]
    assert header(ed) == ["tau", "d", "ratio"]
    assert rep["ratio_pd_over_be"] > 0 and "variance_limit" in rep


def test_json_independent_of_flag_order(capsys):
    a = ["design", "power", "-I", "15", "-T", "4", "-N", "21", "--delta", "0.325", "--tau", "0.03", "--rho", "0.2"]
    b = ["design", "power", "--rho", "0.2", "--tau", "0.03", "--delta", "0.325", "-N", "21", "-T", "4", "-I", "15"]
    main(a)
    out_a = capsys.readouterr().out
    main(b)
    out_b = capsys.readouterr().out
    assert out_a == out_b


def test_simulate_is_byte_identical(capsys, tmp_path):
    scen = tmp_path / "scen.json"
    scen.write_text(json.dumps({"I": 6, "N": 4, "T": 4, "tau": 0.05, "rho": 0.5, "delta": 0.2, "reps": 3}))
    blobs = []
    for k in range(2):
        prefix = tmp_path / f"run{k}"
        code, rep, _ = run(capsys, ["simulate", "--scenario", str(scen), "--out-prefix", str(prefix)])
        assert code == 0
        blobs.append(((prefix.with_suffix(".csv")).read_bytes(), (prefix.with_suffix(".json")).read_bytes()))
    assert blobs[0] == blobs[1]
    assert header(tmp_path / "run0.csv")[:4] == ["method", "test", "dof_rule", "flavor"]


def test_simulate_single_rep_and_bad_file(capsys, tmp_path):
    scen = tmp_path / "scen.json"
    scen.write_text(json.dumps({"I": 6, "N": 4, "T": 4, "tau": 0.05, "rho": 0.5}))
    code, rep, _ = run(capsys, ["simulate", "--scenario", str(scen), "--out-prefix", str(tmp_path / "s"), "--reps", "1"])
    assert code == 0 and rep["mcse_undefined"] is True
    scen.write_text("{not json")
    code, _, _ = run(capsys, ["simulate", "--scenario", str(scen), "--out-prefix", str(tmp_path / "s")])
    assert code == 2


def test_analyze_round_trip(capsys, tmp_path):
    sc = SimScenario(I=201, N=5, T=4, tau=0.05, rho=0.5, delta=0.3)
    path = tmp_path / "d.csv"
    write_dataset_csv(generate_dataset(sc, 0), path)
    code, rep, _ = run(capsys, ["analyze", "--data", str(path), "--adjustment", "both"])
    assert code == 0
    for method in ("qls", "maqls"):
        fit = rep["fits"][method]
        assert 0.25 < fit["theta"][-1] < 0.35
        assert set(fit["se_delta"]) == {"mb", "bc0", "bc1", "bc2", "bc3"}
        assert {(t["test"], t["dof_rule"]) for t in fit["tests"]} == {("z", None), ("t", "i-2"), ("t", "i-(t+1)")}
    assert rep["fits"]["qls"]["tau"] != rep["fits"]["maqls"]["tau"]


def test_analyze_insufficient_clusters(capsys, tmp_path):
    sc = SimScenario(I=4, N=4, T=5, tau=0.05, rho=0.5, delta=0.3)
    data = generate_dataset(sc, 0)
    data = TrialDataset(data.Y + [data.Y[0] + 0.1], np.vstack([data.X, data.X[:1]]))
    path = tmp_path / "d.csv"
    write_dataset_csv(data, path)
    code, _, err = run(capsys, ["analyze", "--data", str(path), "--dof", "i-(t+1)"])
    assert code == 2 and "clusters" in err


def test_analyze_errors(capsys, tmp_path):
    path = tmp_path / "flat.csv"
    rows = ["cluster,individual,period,treatment,outcome"]
    for c, start in enumerate([2, 3, 4], start=1):
        for j in (1, 2):
            for t in (1, 2, 3, 4):
                rows.append(f"{c},{j},{t},{int(t >= start)},1.0")
    path.write_text("\n".join(rows) + "\n")
    code, _, _ = run(capsys, ["analyze", "--data", str(path)])
    assert code == 3
    code, _, err = run(capsys, ["analyze", "--data", str(tmp_path / "missing.csv")])
    assert code == 2


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "swdecay.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "design" in res.stdout
