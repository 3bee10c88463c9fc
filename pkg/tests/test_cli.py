import csv
import dataclasses
import json

import numpy as np
import pytest

from cloudalloc import cli
from cloudalloc.private_alloc import allocate

from .conftest import CONFIGS, TABLE1_RATES


def run(tmp_path, name, *args):
    out = tmp_path / name
    code = cli.main([*args, "--out", str(out)])
    return code, out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def outputs(path):
    """Every output file except the manifest, which carries the wall clock."""
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.name != "manifest.json"}


def test_alloc_csv(tmp_path):
    code, out = run(tmp_path, "a", "alloc", "--config", str(CONFIGS / "table1.json"))
    assert code == 0
    rows = read_csv(out / "alloc.csv")
    assert list(rows[0]) == ["task_id", "rho", "gamma", "active", "alpha_star_paper", "alpha_star_corrected"]
    np.testing.assert_allclose([float(r["gamma"]) for r in rows], TABLE1_RATES, atol=1e-3)
    assert [r["active"] for r in rows] == ["true", "true", "true", "false"]
    assert b"\r" not in (out / "alloc.csv").read_bytes()
    data = json.loads((out / "alloc.json").read_text())
    assert data["kkt_residual"] <= 1e-8


def test_manifest_fields(tmp_path):
    code, out = run(tmp_path, "a", "alloc", "--config", str(CONFIGS / "table1.json"), "--seed", "4")
    man = json.loads((out / "manifest.json").read_text())
    assert man["subcommand"] == "alloc" and man["seed"] == 4 and man["out"] == str(out)
    assert {"version", "wall_clock", "config"} <= set(man)
    assert [p.name for p in out.iterdir()].count("manifest.json") == 1


def write_config(tmp_path, text):
    path = tmp_path / "cfg.json"
    path.write_text(text)
    return str(path)


def test_infeasible_exit_code(tmp_path, capsys):
    cfg = json.loads((CONFIGS / "table1.json").read_text())
    cfg["cloud"]["total_rate"] = 0.5
    code, _ = run(tmp_path, "x", "alloc", "--config", write_config(tmp_path, json.dumps(cfg)))
    assert code == 3
    assert "deficit" in capsys.readouterr().err


def test_malformed_json_reports_position(tmp_path, capsys):
    code, _ = run(tmp_path, "x", "alloc", "--config", write_config(tmp_path, '{"cloud": {\n  "total_rate": 1,,\n}'))
    assert code == 2
    assert "line 2" in capsys.readouterr().err


def test_bad_field_reports_path(tmp_path, capsys):
    cfg = json.loads((CONFIGS / "table1.json").read_text())
    cfg["tasks"][2]["speed"] = 3
    cfg["tasks"][1]["deadline"] = 0.5
    code, _ = run(tmp_path, "x", "alloc", "--config", write_config(tmp_path, json.dumps(cfg)))
    assert code == 2
    assert "tasks[2]" in capsys.readouterr().err


def test_unknown_flag_exit_code(tmp_path):
    assert cli.main(["alloc", "--config", str(CONFIGS / "table1.json"), "--bogus"]) == 2
    assert cli.main(["frobnicate"]) == 2


def test_invariant_breach_exit_code(tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        res = allocate(*args, **kwargs)
        return dataclasses.replace(res, rates=res.rates * 0.9)

    monkeypatch.setattr(cli, "allocate", broken)
    code, _ = run(tmp_path, "x", "alloc", "--config", str(CONFIGS / "table1.json"))
    assert code == 4


def test_verify_with_explicit_rates(tmp_path):
    rates = ",".join(str(r) for r in TABLE1_RATES)
    code, out = run(tmp_path, "v", "verify", "--config", str(CONFIGS / "table1.json"), "--samples", "20000", "--rates", rates)
    assert code == 0
    rows = read_csv(out / "verify.csv")
    assert list(rows[0]) == ["task_id", "miss_rate", "stderr", "alpha", "pass"]
    assert float(rows[3]["miss_rate"]) < 0.01


def test_verify_rejects_wrong_rate_count(tmp_path):
    code, _ = run(tmp_path, "v", "verify", "--config", str(CONFIGS / "table1.json"), "--rates", "0.5,0.5")
    assert code == 2


def test_bestresp_curve(tmp_path):
    code, out = run(tmp_path, "b", "bestresp", "--config", str(CONFIGS / "table2_fixed.json"), "--curve-points", "11")
    assert code == 0
    rows = read_csv(out / "bestresp.csv")
    assert [r["regime"] for r in rows] == ["interior_min", "zero_bid", "boundary_min", "boundary_min"]
    assert len(read_csv(out / "curve_task1.csv")) == 11


def test_simulate_trajectory_columns(tmp_path):
    code, out = run(
        tmp_path, "s", "simulate", "--config", str(CONFIGS / "table2_fixed.json"), "--task", "3", "--policy", "const:1.1"
    )
    assert code == 0
    rows = read_csv(out / "trajectory.csv")
    assert list(rows[0])[1:] == ["step", "bid", "p_minus", "share", "w", "d", "reward", "status"]
    assert rows[-1]["status"] == "completed"
    assert sum(float(r["reward"]) for r in rows) == pytest.approx(-3.3 - 2 * 0.15)


def test_simulate_rejects_bad_task(tmp_path):
    code, _ = run(tmp_path, "s", "simulate", "--config", str(CONFIGS / "table2.json"), "--task", "9")
    assert code == 2


def test_train_then_evaluate(tmp_path):
    cfg = str(CONFIGS / "table2_fixed.json")
    code, out = run(tmp_path, "t", "train", "--config", cfg, "--task", "3", "--episodes", "200")
    assert code == 0
    assert [r["episode"] for r in read_csv(out / "curve.csv")] == ["100", "200"]
    ck = str(out / "checkpoint.json")
    code, ev = run(tmp_path, "e", "evaluate", "--config", cfg, "--task", "3", "--checkpoint", ck, "--episodes", "5")
    assert code == 0
    assert len(read_csv(ev / "evaluate.csv")) == 5
    code, sim = run(tmp_path, "s", "simulate", "--config", cfg, "--task", "3", "--checkpoint", ck)
    assert code == 0


def test_sweep_rows(tmp_path):
    code, out = run(
        tmp_path, "w", "sweep", "--config", str(CONFIGS / "table2_fixed.json"),
        "--penalty", "2,3", "--deadline", "0.15", "--base-penalty", "3.5", "--episodes", "100",
    )
    assert code == 0
    rows = read_csv(out / "sweep.csv")
    assert [(r["axis"], float(r["value"])) for r in rows] == [("penalty", 2.0), ("penalty", 3.0), ("deadline", 0.15)]
    assert [r["oracle_regime"] for r in rows] == ["zero_bid", "bidding", "zero_bid"]


def test_sweep_needs_an_axis(tmp_path):
    code, _ = run(tmp_path, "w", "sweep", "--config", str(CONFIGS / "table2_fixed.json"))
    assert code == 2


COMMANDS = [
    ("alloc", ["--config", "table1.json"]),
    ("verify", ["--config", "table1.json", "--samples", "20000"]),
    ("bestresp", ["--config", "table2.json", "--curve-points", "21"]),
    ("simulate", ["--config", "table2.json", "--task", "4", "--policy", "const:1.0", "--episodes", "3"]),
    ("train", ["--config", "table2.json", "--task", "1", "--episodes", "200"]),
    ("sweep", ["--config", "table2.json", "--penalty", "2.5", "--episodes", "100"]),
]


@pytest.mark.parametrize("name,args", COMMANDS, ids=[c[0] for c in COMMANDS])
def test_rerun_is_byte_identical(tmp_path, name, args):
    args = [a if not a.endswith(".json") else str(CONFIGS / a) for a in args]
    code1, first = run(tmp_path, "one", name, *args, "--seed", "7")
    code2, second = run(tmp_path, "two", name, *args, "--seed", "7")
    assert code1 == code2 == 0
    assert outputs(first) == outputs(second)
    assert outputs(first)


def test_evaluate_rerun_is_byte_identical(tmp_path):
    cfg = str(CONFIGS / "table2.json")
    _, out = run(tmp_path, "t", "train", "--config", cfg, "--task", "2", "--episodes", "100")
    args = ["evaluate", "--config", cfg, "--task", "2", "--checkpoint", str(out / "checkpoint.json")]
    _, a = run(tmp_path, "a", *args)
    _, b = run(tmp_path, "b", *args)
    assert outputs(a) == outputs(b)
