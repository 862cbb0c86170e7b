"""Black-box checks of the command-line front end."""

import json
import subprocess
import sys
from importlib.resources import files

import jsonschema
import pytest

from pimolap import cli
from pimolap.queryparse import parse_query, query_text

GROUPED = ("SELECT SUM(quantity), COUNT(*) FROM w WHERE discount BETWEEN 1 AND 3"
           " GROUP BY customer.region")


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "ssb"
    assert cli.main(["gen", "--scale", "1", "--seed", "7", "--out", str(d)]) == 0
    return d


def strip_wall(obj):
    if isinstance(obj, dict):
        return {k: strip_wall(v) for k, v in obj.items() if k != "wall_time_s"}
    if isinstance(obj, list):
        return [strip_wall(v) for v in obj]
    return obj


def test_usage_errors_exit_2(data_dir):
    for argv in ([], ["frobnicate"], ["run", "--data", str(data_dir)]):
        with pytest.raises(SystemExit) as ei:
            cli.main(argv)
        assert ei.value.code == 2


def test_gen_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["gen", "--seed", "5", "--out", str(a)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["fact_rows"] == 6000 and payload["seed"] == 5
    assert cli.main(["gen", "--seed", "5", "--out", str(b)]) == 0
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    c = tmp_path / "c"
    assert cli.main(["gen", "--seed", "6", "--out", str(c)]) == 0
    assert any((a / f.name).read_bytes() != f.read_bytes() for f in c.iterdir())


def test_gen_refuses_overwrite(tmp_path, capsys):
    d = tmp_path / "d"
    assert cli.main(["gen", "--out", str(d)]) == 0
    assert cli.main(["gen", "--out", str(d)]) == 3
    assert "force" in capsys.readouterr().err
    assert cli.main(["gen", "--out", str(d), "--force"]) == 0


def test_load_reports_shapes(data_dir, capsys):
    assert cli.main(["load", "--data", str(data_dir)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["relations"]["lineorder"] == 6000
    assert set(payload["relations"]) == {"lineorder", "part", "customer",
                                         "supplier", "date"}
    assert payload["wide_attrs"] > 10 and payload["record_bits"] > 0


def test_run_report_matches_schema(data_dir, tmp_path):
    out = tmp_path / "report.json"
    rc = cli.main(["run", "--data", str(data_dir), "--query", GROUPED,
                   "--out", str(out), "--seed", "3"])
    assert rc == 0
    report = json.loads(out.read_text())
    schema = json.loads((files("pimolap") / "report_schema.json").read_text())
    jsonschema.validate(report, schema)
    assert report["query"] == query_text(parse_query(GROUPED))  # canonical text
    assert report["engine"] == "hybrid-groupby" and report["layout"] == "one_xb"
    assert report["result"]["group_columns"] == 1
    assert report["result"]["columns"][0] == "customer.region"
    assert len(report["result"]["rows"]) == 5
    assert report["stats"]["pim_to_host_bits"] > 0
    assert report["reduction_ratio"] > 1
    assert report["modeled_costs"]["hybrid"] <= report["modeled_costs"]["pure_host"]
    assert report["config"]["seed"] == 3


def test_run_pretty_is_for_humans(data_dir, capsys):
    rc = cli.main(["run", "--data", str(data_dir), "--query", GROUPED, "--pretty"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "customer.region" in out and "row(s)" in out
    with pytest.raises(json.JSONDecodeError):
        json.loads(out)


def test_run_query_file(data_dir, tmp_path, capsys):
    qf = tmp_path / "q.sql"
    qf.write_text("SELECT COUNT(*) FROM w\n")
    assert cli.main(["run", "--data", str(data_dir), "--query-file", str(qf)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["result"]["rows"] == [[6000]]
    assert cli.main(["run", "--data", str(data_dir),
                     "--query-file", str(tmp_path / "nope.sql")]) == 3


def test_run_parse_error_exits_2(data_dir, capsys):
    rc = cli.main(["run", "--data", str(data_dir), "--query", "SELEC quantity"])
    assert rc == 2
    assert "parse error" in capsys.readouterr().err


def test_run_unknown_attribute_exits_3(data_dir, capsys):
    rc = cli.main(["run", "--data", str(data_dir),
                   "--query", "SELECT SUM(ghost) FROM w"])
    assert rc == 3
    assert "ghost" in capsys.readouterr().err


def test_run_explain(data_dir, capsys):
    rc = cli.main(["run", "--data", str(data_dir), "--query", GROUPED, "--explain"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    plan = payload["plan"]
    assert plan["mode"] == "hybrid-groupby"
    assert "cost_model" in plan and "estimated_groups" in plan
    assert set(plan["modeled_costs"]) == {"hybrid", "pure_pim", "pure_host"}


def test_config_file_sets_defaults(data_dir, tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"layout": "two_xb", "seed": 11}))
    monkeypatch.setenv("PIMOLAP_CONFIG", str(cfg))
    assert cli.main(["run", "--data", str(data_dir), "--query", GROUPED]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["layout"] == "two_xb" and report["config"]["seed"] == 11
    # explicit flags still override the file
    assert cli.main(["run", "--data", str(data_dir), "--query", GROUPED,
                     "--layout", "one_xb"]) == 0
    assert json.loads(capsys.readouterr().out)["layout"] == "one_xb"
    cfg.write_text(json.dumps({"mystery": 1}))
    assert cli.main(["load", "--data", str(data_dir)]) == 2
    assert "unknown keys" in capsys.readouterr().err


SUITE = [
    {"name": "q_filter", "query": "SELECT COUNT(*) FROM w WHERE quantity < 25"},
    {"name": "q_sum", "query": "SELECT SUM(price * discount) FROM w WHERE discount < 4"},
    {"name": "q_group", "query": GROUPED},
]


def test_bench_counts_and_determinism(data_dir, tmp_path):
    suite = tmp_path / "suite.json"
    suite.write_text(json.dumps(SUITE))
    outs = []
    for name, jobs in (("r1.json", 1), ("r2.json", 1), ("r3.json", 3)):
        out = tmp_path / name
        rc = cli.main(["bench", "--suite", str(suite), "--data", str(data_dir),
                       "--engines", "hybrid-groupby", "--out", str(out),
                       "--jobs", str(jobs)])
        assert rc == 0
        outs.append(json.loads(out.read_text()))
    first = outs[0]
    assert len(first["reports"]) == 6  # 3 queries x 1 engine x 2 layouts
    assert not first["suite_failed"]
    assert all(not r["failed"] for r in first["reports"])
    assert len(first["summary"]) == 2
    for cell in first["summary"]:
        assert cell["queries_ok"] == 3 and cell["geo_mean_reduction"] > 1
    # identical output modulo wall times, whatever the job count
    assert strip_wall(outs[0]) == strip_wall(outs[1]) == strip_wall(outs[2])


def test_bench_rejects_bad_input(data_dir, tmp_path, capsys):
    suite = tmp_path / "suite.json"
    suite.write_text(json.dumps({"not": "a list"}))
    assert cli.main(["bench", "--suite", str(suite), "--data", str(data_dir)]) == 3
    assert "array" in capsys.readouterr().err
    suite.write_text(json.dumps(SUITE))
    rc = cli.main(["bench", "--suite", str(suite), "--data", str(data_dir),
                   "--engines", "warp-drive"])
    assert rc == 3
    assert "warp-drive" in capsys.readouterr().err


def test_bench_records_per_query_failures(data_dir, tmp_path):
    suite = tmp_path / "suite.json"
    suite.write_text(json.dumps(SUITE + [
        {"name": "q_bad", "query": "SELECT SUM(ghost) FROM w"},
    ]))
    out = tmp_path / "r.json"
    rc = cli.main(["bench", "--suite", str(suite), "--data", str(data_dir),
                   "--engines", "pim", "--layouts", "one_xb", "--out", str(out)])
    assert rc == 3
    payload = json.loads(out.read_text())
    assert payload["suite_failed"]
    bad = [r for r in payload["reports"] if r["failed"]]
    assert len(bad) == 1 and bad[0]["name"] == "q_bad" and "ghost" in bad[0]["error"]
    assert payload["summary"][0]["queries_ok"] == 3
    assert payload["summary"][0]["queries_failed"] == 1


def test_geo_mean_helper():
    assert cli._geo_mean([2.0, 8.0]) == pytest.approx(4.0)
    assert cli._geo_mean([]) is None
    assert cli._geo_mean([None, 0.0]) is None


def test_console_script_round_trip(data_dir):
    run = subprocess.run(["pimolap", "run", "--data", str(data_dir),
                          "--query", "SELECT MAX(price) FROM w"],
                         capture_output=True, text=True)
    assert run.returncode == 0, run.stderr
    assert json.loads(run.stdout)["result"]["rows"][0][0] == 2000
    bad = subprocess.run(["pimolap", "run", "--data", str(data_dir),
                          "--query", "SELECT"], capture_output=True, text=True)
    assert bad.returncode == 2
    assert "parse error" in bad.stderr
