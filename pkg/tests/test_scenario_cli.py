import csv

import numpy as np
import pytest

from qchannel import cli, experiments
from qchannel.scenario import ScenarioError, load_scenario, load_scenario_text, stream

BAD = """\
seed: 1
optics:
  wavelength_um: -0.8
  coherence_dc_um: 100.0
  coherence_pump_um: 10.0
paths:
  lab:
    - {kind: fiber, name: f, delay_um: 10}
    - {kind: rotation, name: r}
    - {kind: connector90, name: c, delay_um: 5}
    - {kind: fiber, name: f}
window_ps: 100
stations:
  alice: {delay_ps: 1000}
  bob: {delay_ps: 1000}
experiments:
  qkd: {alice: alice, bob: bob}
  scan: {path: lab, stage: nowhere}
"""


def test_shipped_scenarios_load(scenarios_dir):
    files = sorted(scenarios_dir.glob("*.yaml"))
    assert len(files) >= 6
    for f in files:
        load_scenario(f)


def test_all_problems_reported_with_lines():
    with pytest.raises(ScenarioError) as err:
        load_scenario_text(BAD, "bad.yaml")
    problems = err.value.problems
    joined = "\n".join(problems)
    assert "bad.yaml:3: optics.wavelength_um" in joined
    assert "bad.yaml:5: optics.coherence_pump_um" in joined
    assert "bad.yaml:9: paths.lab[1].kind" in joined and "connector90" in joined
    assert "bad.yaml:10: paths.lab[2]" in joined
    assert "bad.yaml:11: paths.lab[3].name" in joined
    assert "stations.bob.delay_ps" in joined
    assert "experiments.scan.stage" in joined
    assert "experiments.qkd.alice: unknown path" in joined
    assert len(problems) == 9


def test_invalid_yaml_reports_line():
    with pytest.raises(ScenarioError) as err:
        load_scenario_text("seed: 1\npaths: [\n", "x.yaml")
    assert err.value.problems[0].startswith("x.yaml:")


def test_exponent_without_sign_is_a_number():
    sc = load_scenario_text("optics: {coherence_pump_um: 1.0e6}\npaths: {a: [{kind: fiber, name: f}]}\n")
    assert sc.optics["coherence_pump"] == 1.0e6


def test_seed_streams_are_labelled():
    a1 = stream(5, "source").random(4)
    a2 = stream(5, "source").random(4)
    b = stream(5, "stations").random(4)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, b)


def test_seed_override_reseeds_stations(scenarios_dir):
    s1 = load_scenario(scenarios_dir / "qkd.yaml", 1)
    s2 = load_scenario(scenarios_dir / "qkd.yaml", 2)
    assert s1.stations["alice"].seed != s2.stations["alice"].seed


# --- CLI -----------------------------------------------------------------------------


def test_validation_error_exits_1_before_simulating(tmp_path, monkeypatch, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(BAD)
    called = []
    monkeypatch.setattr(experiments, "cmd_scan", lambda *a, **k: called.append(a))
    assert cli.main(["scan", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert not called
    assert "bad.yaml:3" in capsys.readouterr().err


def test_missing_file_exits_1(tmp_path):
    assert cli.main(["qkd", "--scenario", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 1


def test_orchestration_failure_exits_2(scenarios_dir, tmp_path, capsys):
    code = cli.main(["orchestrate", "--scenario", str(scenarios_dir / "orchestrate_unknown_user.yaml"),
                     "--out", str(tmp_path)])
    assert code == 2
    assert "unknown user" in capsys.readouterr().err
    assert (tmp_path / "orchestrate_trace.csv").exists()


def test_busy_relay_marks_deferred(scenarios_dir, tmp_path):
    assert cli.main(["orchestrate", "--scenario", str(scenarios_dir / "orchestrate_busy_relay.yaml"),
                     "--out", str(tmp_path)]) == 0
    rows = dict(csv.reader(open(tmp_path / "orchestrate_summary.csv")))
    assert rows["deferred_grant"] == "1" and rows["ok"] == "1"


def test_psi_scan_minimum_at_configured_offset(scenarios_dir, tmp_path):
    assert cli.main(["scan", "--state", "psi", "--scenario", str(scenarios_dir / "fig1.yaml"),
                     "--out", str(tmp_path)]) == 0
    data = np.genfromtxt(tmp_path / "scan_psi_lc0.csv", delimiter=",", names=True)
    frac = data["n_corr"] / (data["n_corr"] + data["n_anti"])
    # lead 2000 um plus fiber under test 1500 um
    assert abs(data["offset_um"][np.argmin(frac)] + 3500.0) <= 50.0


def test_figures_flag_writes_png(scenarios_dir, tmp_path):
    assert cli.main(["probe-order", "--scenario", str(scenarios_dir / "fig3.yaml"), "--out", str(tmp_path)]) == 0
    assert cli.main(["scan", "--state", "phi", "--scenario", str(scenarios_dir / "fig1.yaml"),
                     "--out", str(tmp_path), "--figures"]) == 0
    assert (tmp_path / "scan_phi.png").stat().st_size > 1000


def test_csv_format(scenarios_dir, tmp_path):
    cli.main(["scan", "--state", "phi", "--scenario", str(scenarios_dir / "fig1.yaml"), "--out", str(tmp_path)])
    with open(tmp_path / "scan_phi.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["time_s", "offset_um", "p_correlated", "n_corr", "n_anti"]
    assert all(len(r) == 5 for r in rows)
    float(rows[1][1])
