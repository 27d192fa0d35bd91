import csv
import io
import json
import os
import subprocess
import sys
from importlib import resources

import jsonschema
import numpy as np
import pytest

from spikedmt import cli
from spikedmt.phase import classify_region, sequential_overlaps
from spikedmt.model import ModelParams

SMALL = ["--n1", "30", "--trials", "3", "--steps", "2", "--start", "0.5", "--stop", "0.9"]


def schema(name):
    return json.loads(resources.files("spikedmt").joinpath("schemas", name).read_text())


def run(args, capsys):
    code = cli.main(args)
    out, err = capsys.readouterr()
    return code, out, err


def rows_of(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_se_single_point(capsys):
    code, out, _ = run(["se", "--steps", "1", "--start", "0.7", "--se-tol", "1e-10"], capsys)
    assert code == 0
    rows = rows_of(out)
    assert len(rows) == 1 and rows[0]["schema_version"] == "1"
    # default sequential estimator: both inits end at the spectral overlaps
    want = sequential_overlaps(ModelParams(0.7, 0.3, 1.5, 0.8, 1.0))
    got = [float(rows[0][f"q_uninf_{k}"]) for k in range(1, 5)]
    assert np.allclose(got, want, atol=1e-8)


def test_se_row_count_and_fig4_curves(capsys):
    code, out, _ = run(["se", "--estimator", "bayes", "--delta-t", "0.24", "--start", "0.9",
                        "--stop", "1.1", "--steps", "5"], capsys)
    rows = rows_of(out)
    assert code == 0 and len(rows) == 5
    # inside the coexistence band the two inits disagree on the tensor overlaps
    r = rows[2]
    assert float(r["delta_m"]) == pytest.approx(1.0)
    assert float(r["q_inf_3"]) > 0.5 and float(r["q_uninf_3"]) < 1e-8


def test_experiment_record_contents(capsys):
    code, out, _ = run(["experiment", *SMALL], capsys)
    assert code == 0
    rows = rows_of(out)
    assert [r["point"] for r in rows] == ["0", "1"]
    for r in rows:
        p = ModelParams(float(r["value"]), 0.3, 1.5, 0.8, 1.0)
        assert r["region"] == classify_region(p).value
        assert r["trials"] == "3"
        assert all(float(r[f"se_q{k}"]) >= 0 and float(r[f"se_mse{k}"]) >= 0
                   for k in range(1, 5))
        assert np.allclose([float(r[f"pred_q{k}"]) for k in range(1, 5)],
                           sequential_overlaps(p), atol=1e-12)
        # spherical estimates: per-coordinate MSE = 2 (1 - |q|) trial by trial
        for k in range(1, 5):
            assert float(r[f"mean_mse{k}"]) == pytest.approx(2 * (1 - float(r[f"mean_q{k}"])),
                                                             abs=1e-9)


def test_experiment_is_byte_identical(tmp_path):
    paths = []
    for i in range(2):
        p = tmp_path / f"run{i}.csv"
        assert cli.main(["experiment", *SMALL, "--trials", "1", "-o", str(p)]) == 0
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert b"\r\n" in paths[0].read_bytes()


def test_threads_and_workers_do_not_change_output(tmp_path):
    base = [sys.executable, "-m", "spikedmt", "experiment", "--estimator", "BayesAmp",
            "--init", "random", "--max-iters", "5", *SMALL]
    outs = []
    for extra in (["--threads", "1"], ["--threads", "2"], ["--workers", "2"]):
        res = subprocess.run(base + extra, capture_output=True, check=True,
                             env=dict(os.environ, NUMBA_NUM_THREADS="2"))
        outs.append(res.stdout)
    assert outs[0] == outs[1] == outs[2]


def test_seed_isolation(capsys):
    # point 1 of a two-point sweep equals point 1 of a longer sweep with the same values
    _, a, _ = run(["experiment", "--n1", "30", "--trials", "2", "--steps", "2",
                   "--start", "0.5", "--stop", "0.9"], capsys)
    _, b, _ = run(["experiment", "--n1", "30", "--trials", "2", "--steps", "3",
                   "--start", "0.5", "--stop", "1.3"], capsys)
    ra, rb = rows_of(a), rows_of(b)
    assert ra[1]["value"] == rb[1]["value"]
    assert ra[1]["mean_q3"] == rb[1]["mean_q3"]
    assert cli.trial_seed(0, 1, 0) != cli.trial_seed(0, 0, 1)
    assert cli.trial_seed(0, 1, 0) == cli.trial_seed(0, 1, 0)


@pytest.mark.parametrize("command,extra", [
    ("se", ["--steps", "2"]),
    ("experiment", SMALL),
    ("experiment", ["--estimator", "SeOnly", "--steps", "2"]),
    ("phase-diagram", ["--x-range", "0.5,1.5,3", "--y-range", "0.1,1,2", "--rho-values", "1,2"]),
    ("fixed-points", ["--estimator", "bayes", "--delta-t", "0.24", "--start", "0.95",
                      "--stop", "1.0", "--steps", "2"]),
    ("spinodal", ["--estimator", "bayes", "--start", "0.3", "--stop", "1.6", "--steps", "60",
                  "--curve-values", "0.2,0.24"]),
])
def test_json_output_validates(command, extra, capsys):
    code, out, _ = run([command, *extra, "--format", "json"], capsys)
    assert code == 0
    doc = json.loads(out)
    jsonschema.validate(doc, schema("table.schema.json"))
    assert doc["command"] == command and doc["rows"]


def test_fixed_points_rows(capsys):
    _, out, _ = run(["fixed-points", "--estimator", "bayes", "--delta-t", "0.24",
                     "--steps", "1", "--start", "0.92"], capsys)
    rows = rows_of(out)
    mt = [r for r in rows if r["kind"] == "matrix-tensor" and r["defined"] == "true"]
    assert len(mt) == 3
    for r in rows:
        if r["defined"] == "true":
            assert float(r["residual"]) < 1e-8
        for k in range(1, 5):
            assert float(r[f"mse{k}"]) == pytest.approx(2 * (1 - abs(float(r[f"q{k}"]))))


def test_phase_diagram_ml_on_worse_side(capsys):
    _, out, _ = run(["phase-diagram", "--x-range", "0.1,2,20", "--y-range", "0.05,1.5,20",
                     "--rho-values", "0.5,1,2"], capsys)
    order = {"R0": 0, "Rm": 1, "Rt": 2}
    rows = rows_of(out)
    assert len(rows) == 400
    for r in rows:
        for tag in ("0.5", "1", "2"):
            assert order[r[f"region_ml_rho{tag}"]] <= order[r["region_bayes"]]
            assert float(r[f"dm_threshold_ml_rho{tag}"]) <= float(r["dm_threshold_bayes"])


def test_config_file_and_flag_override(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"params": {"delta_t": 0.5}, "estimator": "SeOnly",
                                "sweep": {"axis": "delta_m", "start": 0.4, "stop": 0.8,
                                          "steps": 3}}))
    _, out, _ = run(["experiment", "--config", str(conf), "--steps", "2",
                     "--format", "json"], capsys)
    doc = json.loads(out)
    assert doc["config"]["params"]["delta_t"] == 0.5
    assert len(doc["rows"]) == 2 and doc["rows"][1]["value"] == 0.8
    assert doc["rows"][0]["trials"] == 0


def error_of(err_text):
    rec = json.loads(err_text.strip().splitlines()[-1])
    jsonschema.validate(rec, schema("error.schema.json"))
    return rec


def test_capacity_error_record(capsys):
    code, out, err = run(["experiment", "--n1", "3000", "--backend", "dense64",
                          "--estimator", "SequentialSpectral"], capsys)
    rec = error_of(err)
    assert code == 3 and out == ""
    assert rec["error"] == "capacity" and rec["suggestion"] == "virtual"


@pytest.mark.parametrize("args", [
    ["experiment", "--estimator", "Magic"],
    ["experiment", "--trials", "0"],
    ["experiment", "--delta-m", "-1"],
    ["se", "--sweep-axis", "gamma"],
    ["fixed-points", "--estimator", "SequentialSpectral"],
    ["phase-diagram", "--x-range", "1,2"],
    ["nonsense"],
])
def test_configuration_error_records(args, capsys):
    code, out, err = run(args, capsys)
    assert code == 2 and out == ""
    assert error_of(err)["error"] == "configuration"


def test_bad_config_file(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text("{not json")
    code, _, err = run(["se", "--config", str(conf)], capsys)
    assert code == 2 and error_of(err)["error"] == "configuration"
    conf.write_text(json.dumps({"colour": "red"}))
    code, _, err = run(["se", "--config", str(conf)], capsys)
    assert code == 2 and "colour" in error_of(err)["message"]


def test_csv_quoting():
    t = cli.Table("se", ["name", "x"])
    t.add(name='a, "b"', x=0.1)
    t.add(name="plain", x=float("inf"))
    text = t.to_csv()
    assert text.splitlines()[1] == '1,"a, ""b""",0.1'
    assert rows_of(text)[0]["name"] == 'a, "b"'
    assert json.loads(t.to_json())["rows"][1]["x"] is None


def test_reproduce_fig1(tmp_path, capsys):
    code, out, _ = run(["reproduce", "fig1", "--out-dir", str(tmp_path)], capsys)
    assert code == 0
    files = sorted(os.listdir(tmp_path))
    assert files == ["fig1_noise.csv", "fig1_ratios.csv"]
    rows = rows_of((tmp_path / "fig1_ratios.csv").read_text())
    # second panel is at dm = 0.7, dt = 0.8: every cell labelled by the Bayes classifier
    for r in rows[::97]:
        p = ModelParams(0.7, 0.8, float(r["alpha2"]), float(r["alpha3"]), 1.0)
        assert r["region_bayes"] == classify_region(p).value
    assert {r["region_bayes"] for r in rows} == {"R0", "Rm", "Rt"}


def test_presets_cover_all_figures():
    for k in range(1, 8):
        jobs = cli.preset_jobs(f"fig{k}")
        assert jobs
        for jb in jobs:
            cli.ExperimentConfig.from_dict(jb["config"])
    assert cli.preset_jobs("fig3", paper_scale=True)[0]["config"]["n1"] == 1000
    assert cli.preset_jobs("fig3", paper_scale=True)[0]["config"]["trials"] == 500
    fig2 = cli.preset_jobs("fig2")[0]
    assert tuple(fig2["extra"]["rho_values"]) == (0.5, 1.0, 2.0, 10.0)
    with pytest.raises(Exception):
        cli.preset_jobs("fig9")
