import json
import subprocess
import sys

import pytest

from mta.cli import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from mta.simulator import scenario_definition


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--scenario", "1", "--users", "1000", "--datasets", "2", "--seed", "7",
                 "--unexposed-fraction", "0.5", "--out", str(d / "data")]) == EXIT_OK
    (d / "spec.json").write_text(json.dumps(scenario_definition("1").fit_spec.to_json()))
    return d


class TestSimulate:
    def test_outputs(self, workdir):
        names = sorted(p.name for p in (workdir / "data").iterdir())
        assert names == ["ds0.jsonl", "ds1.jsonl", "manifest.json"]
        manifest = json.loads((workdir / "data" / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 7

    def test_zero_users_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["simulate", "--scenario", "1", "--users", "0", "--out", str(tmp_path)])
        assert info.value.code == EXIT_USAGE

    def test_custom_needs_file(self, tmp_path):
        assert main(["simulate", "--scenario", "custom", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_custom_scenario_file(self, tmp_path):
        f = tmp_path / "scn.json"
        f.write_text(json.dumps(scenario_definition("3").to_json()))
        rc = main(["simulate", "--scenario", "custom", "--scenario-file", str(f), "--users", "50",
                   "--datasets", "1", "--out", str(tmp_path / "o")])
        assert rc == EXIT_OK


class TestFit:
    def test_converges(self, workdir):
        out = workdir / "model.json"
        assert main(["fit", "--paths", str(workdir / "data" / "ds0.jsonl"), "--spec", str(workdir / "spec.json"),
                     "--out", str(out), "--group", "exposed"]) == EXIT_OK
        model = json.loads(out.read_text())
        assert model["schema"] == "mta-model/1"
        report = json.loads((workdir / "model.report.json").read_text())
        assert report["converged"]

    def test_non_convergence_exit_code(self, workdir, tmp_path):
        rc = main(["fit", "--paths", str(workdir / "data" / "ds0.jsonl"), "--spec", str(workdir / "spec.json"),
                   "--out", str(tmp_path / "m.json"), "--max-iterations", "1"])
        assert rc == EXIT_NUMERICAL
        assert not json.loads((tmp_path / "m.report.json").read_text())["converged"]

    def test_unknown_basis(self, workdir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"terms": [{"name": "x", "basis": {"kind": "spline"}}]}))
        rc = main(["fit", "--paths", str(workdir / "data" / "ds0.jsonl"), "--spec", str(bad),
                   "--out", str(tmp_path / "m.json")])
        assert rc == EXIT_DATA

    def test_zero_conversions(self, workdir, tmp_path):
        paths = tmp_path / "p.jsonl"
        paths.write_text('{"user_id": "a", "window": [0, 30], "events": []}\n')
        rc = main(["fit", "--paths", str(paths), "--spec", str(workdir / "spec.json"), "--out", str(tmp_path / "m")])
        assert rc == EXIT_DATA

    def test_malformed_paths(self, workdir, tmp_path):
        paths = tmp_path / "p.jsonl"
        paths.write_text("{oops\n")
        rc = main(["fit", "--paths", str(paths), "--spec", str(workdir / "spec.json"), "--out", str(tmp_path / "m")])
        assert rc == EXIT_DATA

    def test_missing_input(self, workdir, tmp_path):
        rc = main(["fit", "--paths", str(tmp_path / "nope.jsonl"), "--spec", str(workdir / "spec.json"),
                   "--out", str(tmp_path / "m")])
        assert rc == EXIT_USAGE


class TestAttributeEvaluate:
    def test_pipeline(self, workdir):
        model = workdir / "model2.json"
        data = workdir / "data" / "ds0.jsonl"
        assert main(["fit", "--paths", str(data), "--spec", str(workdir / "spec.json"), "--out", str(model),
                     "--group", "exposed"]) == EXIT_OK
        credits = workdir / "credits.jsonl"
        assert main(["attribute", "--model", str(model), "--paths", str(data), "--group", "exposed",
                     "--out", str(credits), "--rule", "shapley", "--normalization", "normalized"]) == EXIT_OK
        first = json.loads(credits.read_text().splitlines()[0])
        assert first["schema"] == "mta-credit/1"
        report = workdir / "report.csv"
        assert main(["evaluate", "--paths", str(data), "--credits", str(credits), "--model", str(model),
                     "--format", "csv", "--replicates", "20", "--out", str(report)]) == EXIT_OK
        rows = report.read_text().splitlines()
        assert rows[0] == "metric,point,ci_low,ci_high,slice"
        assert [r.split(",")[0] for r in rows[1:]] == ["ICPU", "ICPT", "ICPE", "ICPE_prime", "PICPU", "PICPPE",
                                                       "AICPE"]

    def test_shapley_cap(self, workdir, tmp_path):
        events = [{"kind": "ad", "t": i * 0.5} for i in range(20)] + [{"kind": "conversion", "t": 15}]
        paths = tmp_path / "long.jsonl"
        paths.write_text(json.dumps({"user_id": "a", "window": [0, 30], "events": events}) + "\n")
        model = scenario_definition("1").model
        mfile = tmp_path / "m.json"
        mfile.write_text(model.dumps())
        rc = main(["attribute", "--model", str(mfile), "--paths", str(paths), "--rule", "shapley",
                   "--out", str(tmp_path / "c.jsonl")])
        assert rc == EXIT_DATA

    def test_evaluate_zero_exposed_conversions(self, tmp_path):
        e = tmp_path / "e.jsonl"
        u = tmp_path / "u.jsonl"
        e.write_text('{"user_id": "a", "window": [0, 30], "events": []}\n')
        u.write_text('{"user_id": "b", "window": [0, 30], "events": [{"kind": "conversion", "t": 1}]}\n')
        assert main(["evaluate", "--exposed", str(e), "--unexposed", str(u)]) == EXIT_DATA

    def test_evaluate_needs_inputs(self):
        assert main(["evaluate"]) == EXIT_USAGE


class TestScenario:
    def test_table(self, tmp_path):
        out = tmp_path / "t.json"
        assert main(["scenario", "--id", "1", "--users", "2000", "--datasets", "2", "--seed", "42",
                     "--out", str(out)]) == EXIT_OK
        table = json.loads(out.read_text())
        keys = {r["key"]: r for r in table["coefficients"]}
        assert keys["ad/0/"]["truth"] == pytest.approx(2.0)
        assert {m["metric"] for m in table["metrics"]} == {"ICPE", "AICPE", "PICPPE"}

    def test_s4_truth_mapping(self, tmp_path):
        out = tmp_path / "t.csv"
        assert main(["scenario", "--id", "4", "--users", "2000", "--datasets", "2", "--seed", "1",
                     "--unexposed-fraction", "0", "--format", "csv", "--out", str(out)]) in (EXIT_OK, EXIT_NUMERICAL)
        rows = {r.split(",")[1]: r.split(",") for r in out.read_text().splitlines()[1:]}
        assert float(rows["type1_n3/2/3"][2]) == pytest.approx(1.2**3)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mta", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate" in proc.stdout
