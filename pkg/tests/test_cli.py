import json
import subprocess
import sys

import jsonschema
import pytest

from fleetsim.cli import main
from fleetsim.recorder import query_file
from fleetsim.scenario.runner import strip_wall_clock

from conftest import SCHEMA, write_config
from oracles import head_on, route_dicts


def quick_config(tmp_path, default_dict, **kw):
    obj = dict(default_dict)
    obj.update(N=2, M=2, points_per_cloud=8, routes=route_dicts(head_on()), duration=80.0)
    obj.update(kw)
    return write_config(tmp_path, obj)


def test_validate_default(capsys):
    assert main(["validate"]) == 0
    assert "ok" in capsys.readouterr().out


@pytest.mark.parametrize(
    "change,message",
    [({"d_start": 500, "d_stop": 400}, "d_stop must exceed d_start"), ({"M": 3, "N": 2, "routes": []}, "M ≤ N violated")],
)
def test_validate_diagnostics(tmp_path, default_dict, capsys, change, message):
    default_dict.update(change)
    path = write_config(tmp_path, default_dict)
    assert main(["validate", "--config", str(path)]) == 2
    assert message in capsys.readouterr().out


def test_validate_unparseable(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert main(["validate", "--config", str(bad)]) == 2
    assert len(capsys.readouterr().out.strip().splitlines()) == 1


def test_run_missing_config(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.json"), "--out-dir", str(tmp_path)]) == 2


def test_run_invalid_config(tmp_path, default_dict):
    default_dict["f_pc"] = -1
    path = write_config(tmp_path, default_dict)
    assert main(["run", "--config", str(path), "--out-dir", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o" / "report.json").exists()


def test_run_runtime_error(tmp_path, default_dict, monkeypatch):
    path = quick_config(tmp_path, default_dict)

    def boom(self):
        raise RuntimeError("kernel exploded")

    monkeypatch.setattr("fleetsim.scenario.runner.Simulation.run", boom)
    assert main(["run", "--config", str(path), "--out-dir", str(tmp_path / "o")]) == 1


def test_run_writes_report_and_seed_override_is_deterministic(tmp_path, default_dict):
    path = quick_config(tmp_path, default_dict)
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = main(["run", "--config", str(path), "--out-dir", str(out), "--report", str(out / "r.json"), "--seed", "99"])
        assert rc == 0
        reports.append(json.loads((out / "r.json").read_text()))
    jsonschema.validate(reports[0], SCHEMA)
    assert reports[0]["scenario"]["seed"] == 99
    assert len(reports[0]["episodes"]) == 1
    assert json.dumps(strip_wall_clock(reports[0]), sort_keys=True) == json.dumps(strip_wall_clock(reports[1]), sort_keys=True)


def test_inspect_totals_match_query(default_run, capsys):
    _, report, out = default_run
    store = out / report["episodes"][0]["store"][0]
    assert main(["inspect", "--store", str(store)]) == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    n = len(query_file(store, "#", 0, 10**15, decode_payload=False))
    assert last.startswith(f"total: {n} entries")
    assert n == report["store_stats"][0]["entries_written"]


def test_inspect_pattern_and_disjoint_range(default_run, capsys):
    _, report, out = default_run
    store = out / report["episodes"][0]["store"][0]
    assert main(["inspect", "--store", str(store), "--pattern", "/cloud/vehicle/0/points"]) == 0
    text = capsys.readouterr().out
    assert "topic /cloud/vehicle/1" not in text
    assert main(["inspect", "--store", str(store), "--from", "0", "--to", "1"]) == 0
    assert capsys.readouterr().out.strip().endswith("total: 0 entries, 0 payload bytes")


def test_inspect_errors(tmp_path, default_run):
    _, report, out = default_run
    store = out / report["episodes"][0]["store"][0]
    assert main(["inspect", "--store", str(tmp_path / "nope.ndjson")]) == 1
    assert main(["inspect", "--store", str(store), "--pattern", "/a/#/b"]) == 2
    assert main(["inspect", "--store", str(store), "--from", "5", "--to", "1"]) == 2


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "fleetsim.cli", "validate"], capture_output=True, text=True)
    assert out.returncode == 0
