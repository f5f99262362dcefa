import json

import numpy as np
import pytest

from ensemblectl import cli, studies

SMALL = {
    "study": {"name": "robust_pi", "orders": [10, 2, 2], "threshold": -0.5},
    "bloch": {"B": 0.5, "delta": 0.05, "amplitude_bound": 2, "duration": 4.0},
    "solver": {"max_outer": 2, "max_inner": 80},
}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return path


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def zero_pulse(path, duration=7.5398, n=11):
    t = np.linspace(0, duration, n)
    path.write_text("t,u,v\n" + "".join(f"{float(x)!r},0,0\n" for x in t))
    return path


# -- config parsing ---------------------------------------------------------------------


def test_flatten_nested_and_dotted_documents():
    nested = cli.flatten({"study": {"name": "x", "sweep": {"N": [8]}}, "bloch.B": 1})
    assert nested == {"study.name": "x", "study.sweep.N": [8], "bloch.B": 1}


def test_json_yaml_toml_configs_agree(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps(SMALL))
    (tmp_path / "c.yaml").write_text(
        "study:\n  name: robust_pi\n  orders: [10, 2, 2]\n  threshold: -0.5\n"
        "bloch: {B: 0.5, delta: 0.05, amplitude_bound: 2, duration: 4.0}\n"
        "solver: {max_outer: 2, max_inner: 80}\n")
    (tmp_path / "c.toml").write_text(
        '[study]\nname = "robust_pi"\norders = [10, 2, 2]\nthreshold = -0.5\n'
        "[bloch]\nB = 0.5\ndelta = 0.05\namplitude_bound = 2\nduration = 4.0\n"
        "[solver]\nmax_outer = 2\nmax_inner = 80\n")
    echoes = [cli.parse_config(cli.load_document(tmp_path / f"c.{ext}")).echo for ext in ("json", "yaml", "toml")]
    assert echoes[0] == echoes[1] == echoes[2]
    assert echoes[0]["regularization.resolution_penalty"] == 3000.0


@pytest.mark.parametrize(
    "patch, field",
    [
        ({"bloch.delta": 1.2}, "bloch.delta"),
        ({"bloch.B": "wide"}, "bloch.B"),
        ({"bloch.duration": -1.0}, "bloch.duration"),
        ({"bloch.frequency_profile": "tan"}, "bloch.frequency_profile"),
        ({"study.orders": [1, 2, 2]}, "study"),
        ({"study.orders": [8, 2]}, "study.orders"),
        ({"study.cost_weights": [0, 0, 0]}, "study.cost_weights"),
        ({"study.mode": "later"}, "study.mode"),
        ({"regularization.resolution_penalty": -1}, "regularization"),
        ({"solver.penalty_growth": 0.5}, "solver.penalty_growth"),
        ({"solver.max_outer": 1.5}, "solver.max_outer"),
        ({"formats": ["pdf"]}, "formats"),
        ({"formats": ["convergence_csv"]}, "formats"),
        ({"formats": ["physical_pulse_csv"]}, "nominal_amplitude_hz"),
        ({"nominal_amplitude_hz": 0}, "nominal_amplitude_hz"),
        ({"bloch.rate": 3}, "bloch.rate"),
        ({"study.name": "fig9"}, "study.name"),
    ],
)
def test_invalid_fields_are_named(patch, field):
    flat = {**cli.flatten(SMALL), **patch}
    with pytest.raises(cli.ConfigError) as err:
        cli.parse_config(flat)
    assert str(err.value).startswith(field)


def test_missing_name_and_bad_documents(tmp_path):
    with pytest.raises(cli.ConfigError, match="study.name"):
        cli.parse_config({"bloch.B": 1.0})
    (tmp_path / "c.ini").write_text("x")
    with pytest.raises(cli.ConfigError, match="unsupported"):
        cli.load_document(tmp_path / "c.ini")
    (tmp_path / "c.json").write_text("{nope")
    with pytest.raises(cli.ConfigError, match="cannot parse"):
        cli.load_document(tmp_path / "c.json")
    with pytest.raises(cli.ConfigError, match="cannot read"):
        cli.load_document(tmp_path / "absent.json")


# -- solve -------------------------------------------------------------------------------


def test_solve_writes_outputs_and_manifest_round_trips(tmp_path, capsys):
    doc = {**SMALL, "output_dir": str(tmp_path / "a"), "nominal_amplitude_hz": 10000.0,
           "formats": ["pulse_csv", "robustness_csv", "physical_pulse_csv", "manifest_json"]}
    code, out, _ = run(capsys, "solve", write_config(tmp_path / "c.json", doc))
    assert code == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["manifest.json", "physical_pulse.csv", "pulse.csv", "robustness.csv"]
    assert "average M_z" in out
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["passed"] is True
    assert manifest["results"]["robustness"]["grid"] == [9, 9]
    assert manifest["thresholds"]["threshold"] == -0.5
    assert set(manifest["results"]) >= {"oracle_gap", "solver", "max_control_norm_oversampled"}
    assert (tmp_path / "a" / "physical_pulse.csv").read_text().startswith("t_seconds,amplitude_hz,phase_rad\n")

    code, _, _ = run(capsys, "solve", tmp_path / "a" / "manifest.json", "--output-dir", tmp_path / "b")
    assert code == 0
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_invalid_delta_exits_1_and_writes_nothing(tmp_path, capsys):
    doc = {**SMALL, "bloch": {**SMALL["bloch"], "delta": 1.2}, "output_dir": str(tmp_path / "o")}
    code, _, err = run(capsys, "solve", write_config(tmp_path / "c.json", doc))
    assert code == 1
    assert "bloch.delta" in err
    assert not (tmp_path / "o").exists()


def test_physical_export_without_amplitude_exits_1(tmp_path, capsys):
    doc = {**SMALL, "formats": ["physical_pulse_csv"], "output_dir": str(tmp_path / "o")}
    code, _, err = run(capsys, "solve", write_config(tmp_path / "c.json", doc))
    assert code == 1 and "nominal_amplitude_hz" in err


def test_threshold_failure_exits_2(tmp_path, capsys):
    doc = {**SMALL, "study": {**SMALL["study"], "threshold": -0.9999}, "output_dir": str(tmp_path / "o")}
    code, _, err = run(capsys, "solve", write_config(tmp_path / "c.json", doc))
    assert code == 2 and "threshold" in err
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["passed"] is False


def test_worst_threshold_is_checked(tmp_path, capsys):
    doc = {**SMALL, "study": {**SMALL["study"], "worst_threshold": -0.99999}, "output_dir": str(tmp_path / "o")}
    code, _, _ = run(capsys, "solve", write_config(tmp_path / "c.json", doc))
    assert code == 2


def test_partial_outputs_are_removed_on_error(tmp_path, capsys, monkeypatch):
    def broken(path, report):
        open(path, "w").write("omega,")
        raise OSError("disk full")

    monkeypatch.setattr(studies, "write_robustness_csv", broken)
    doc = {**SMALL, "output_dir": str(tmp_path / "o")}
    code, _, err = run(capsys, "solve", write_config(tmp_path / "c.json", doc))
    assert code == 1 and "disk full" in err
    assert not (tmp_path / "o").exists()


def test_partial_outputs_removed_but_existing_directory_kept(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(studies, "write_robustness_csv", lambda p, r: (_ for _ in ()).throw(OSError("nope")))
    (tmp_path / "o").mkdir()
    (tmp_path / "o" / "keep.txt").write_text("mine")
    doc = {**SMALL, "output_dir": str(tmp_path / "o")}
    code, _, _ = run(capsys, "solve", write_config(tmp_path / "c.json", doc))
    assert code == 1
    assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["keep.txt"]


def test_three_stage_and_time_varying_outputs(tmp_path, capsys):
    doc = {"study": {"name": "three_stage", "orders": [8, 1, 1], "mode": "concatenated"},
           "bloch": {"B": 0.0, "delta": 0.0, "duration": 6.0}, "solver": {"max_outer": 3, "max_inner": 100},
           "output_dir": str(tmp_path / "s")}
    code, out, _ = run(capsys, "solve", write_config(tmp_path / "s.json", doc))
    assert code == 0
    names = {p.name for p in (tmp_path / "s").iterdir()}
    assert {f"pulse_stage{i}.csv" for i in (1, 2, 3)} <= names
    assert {f"robustness_stage{i}.csv" for i in (1, 2, 3)} <= names
    assert out.count("stage") >= 3

    doc = {"study": {"name": "time_varying", "orders": [10, 1, 1], "cost_choice": "time",
                     "cost_weights": [10, 0.1, 0.1], "threshold": 0.9},
           "bloch": {"B": 0.0, "delta": 0.0, "duration": 1.0, "frequency_profile": "sin"},
           "solver": {"max_outer": 4, "max_inner": 200}, "output_dir": str(tmp_path / "t")}
    code, out, _ = run(capsys, "solve", write_config(tmp_path / "t.json", doc))
    assert code == 0 and "M_x(T)" in out
    manifest = json.loads((tmp_path / "t" / "manifest.json").read_text())
    assert manifest["config"]["bloch.frequency_profile"] == "sin"
    assert manifest["results"]["Mx"] >= 0.9


def test_convergence_command_requires_convergence_study(tmp_path, capsys):
    code, _, err = run(capsys, "convergence", write_config(tmp_path / "c.json", SMALL))
    assert code == 1 and "study.name" in err


def test_convergence_command_writes_table(tmp_path, capsys):
    doc = {"study": {"name": "convergence", "sweep": {"N": [6], "N_omega": [1]}, "validation_steps": 400},
           "bloch": {"B": 0.5, "amplitude_bound": 5, "duration": 1.0},
           "solver": {"max_outer": 2, "max_inner": 100}, "output_dir": str(tmp_path / "c")}
    code, _, _ = run(capsys, "convergence", write_config(tmp_path / "c.json", doc))
    assert code == 0
    lines = (tmp_path / "c" / "convergence.csv").read_text().splitlines()
    assert lines[0] == "N,N_omega,avg_Mx" and lines[1].startswith("6,1,")


# -- validate / export-physical -------------------------------------------------------------


def test_validate_zero_pulse_reports_no_inversion(tmp_path, capsys):
    pulse = zero_pulse(tmp_path / "z.csv")
    code, out, _ = run(capsys, "validate", pulse, "--B", 1, "--delta", 0.1, "--grid", "11x3", "--target=-z",
                       "--output", tmp_path / "r.csv")
    assert code == 0
    assert "average M_z(T) = 1.000000" in out
    assert "average = -1.000000" in out
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "omega,epsilon,score" and len(rows) == 1 + 33


def test_validate_rejects_non_monotone_times(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("t,u,v\n0,0,0\n1,0,0\n0.5,0,0\n")
    code, _, err = run(capsys, "validate", bad)
    assert code == 1 and "bad.csv:4" in err


def test_validate_bad_grid(tmp_path, capsys):
    code, _, err = run(capsys, "validate", zero_pulse(tmp_path / "z.csv"), "--grid", "ten")
    assert code == 1 and "--grid" in err


@pytest.mark.parametrize("amp, span", [(10e3, 120e-6), (20e3, 60e-6)])
def test_export_physical_duration(tmp_path, capsys, amp, span):
    out = tmp_path / "phys.csv"
    code, _, _ = run(capsys, "export-physical", zero_pulse(tmp_path / "z.csv"), "--amp-hz", amp, "--output", out)
    assert code == 0
    data = np.loadtxt(out, delimiter=",", skiprows=1)
    assert out.read_text().splitlines()[0] == "t_seconds,amplitude_hz,phase_rad"
    assert data[-1, 0] - data[0, 0] == pytest.approx(span, rel=1e-5)
    assert np.all(data[:, 1] == 0)


def test_export_physical_default_name_and_bad_amplitude(tmp_path, capsys):
    pulse = zero_pulse(tmp_path / "z.csv")
    assert run(capsys, "export-physical", pulse, "--amp-hz", 1000)[0] == 0
    assert (tmp_path / "z_physical.csv").exists()
    code, _, err = run(capsys, "export-physical", pulse, "--amp-hz", -5)
    assert code == 1 and "--amp-hz" in err


def test_export_physical_of_solved_pulse_matches_conversion(tmp_path, capsys):
    pulse = tmp_path / "p.csv"
    t = np.linspace(0, 2.0, 5)
    pulse.write_text("t,u,v\n" + "".join(f"{float(x)!r},{float(np.cos(x))!r},{float(np.sin(x))!r}\n" for x in t))
    run(capsys, "export-physical", pulse, "--amp-hz", 1000, "--output", tmp_path / "o.csv")
    data = np.loadtxt(tmp_path / "o.csv", delimiter=",", skiprows=1)
    assert np.allclose(data[:, 1], 1000.0)
    assert np.allclose(data[:, 2], t, atol=1e-11)
    assert np.allclose(data[:, 0], t / (2 * np.pi * 1000), rtol=1e-11)
