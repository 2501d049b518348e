import csv
import json
import re

import pytest
from hypothesis import given
from hypothesis import strategies as st

from eev.cli import main
from eev.config import MU_BETA_THRESHOLD, ConfigError, SimConfig, format_config, parse_config
from eev.diagnostics import BoundParams, bound_report, averager_from_records, read_records

LAMINAR_INI = """\
[physics]
nu = 0.01

[numerics]
nx = 8
ny = 8
nz = 16
dt = 0.01
t_end = 1.0
spin_up = 0.2

[ensemble]
members = 2
perturbation_amplitude = 0.0

[output]
diag_every = 5
"""


def test_empty_config_gives_defaults():
    assert parse_config("") == SimConfig()


@given(
    st.floats(1e-4, 0.1), st.integers(4, 64), st.integers(1, 16),
    st.one_of(st.none(), st.floats(1e-4, 0.002)), st.sampled_from(["off", "box", "wall"]),
)
def test_format_parse_round_trip(nu, nz, members, tau, cap):
    cfg = SimConfig(nu=nu, nz=nz, members=members, tau=tau, cap_length=cap)
    assert parse_config(format_config(cfg)) == cfg


def test_tau_above_turnover_time_is_rejected_with_location():
    text = "[physics]\nlength = 1.0\n\n[eddy_viscosity]\ntau = 2.0\n"
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert "T*" in str(exc.value) and exc.value.line == 5
    assert exc.value.key == "eddy_viscosity.tau"


def test_unknown_key_and_type_mismatch():
    with pytest.raises(ConfigError, match="unknown key") as exc:
        parse_config("[numerics]\nnx = 8\nbogus = 1\n")
    assert exc.value.line == 3
    with pytest.raises(ConfigError, match="expected int") as exc:
        parse_config("[numerics]\nnx = eight\n")
    assert exc.value.line == 2
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("[plotting]\ncolour = red\n")


def test_mu_beta_above_threshold_is_accepted_but_flagged(tmp_path):
    re_ = 1.0 / 0.01
    mu_beta = MU_BETA_THRESHOLD / re_ + 1e-6
    cfg = parse_config(LAMINAR_INI + f"\n[eddy_viscosity]\nmu_beta = {mu_beta!r}\n")
    assert cfg.mu_beta == mu_beta and not cfg.mu_beta_hypothesis
    cfg_file = tmp_path / "c.ini"
    cfg_file.write_text(format_config(cfg))
    assert main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "run")]) == 0
    rep = json.loads((tmp_path / "run" / "bound_report.json").read_text())
    assert rep["rhs_C"] is None and rep["hypothesis_C"].startswith("hypothesis not met")


def test_print_config(tmp_path, capsys):
    assert main(["print-config"]) == 0
    assert parse_config(capsys.readouterr().out) == SimConfig()


def test_cfl_violation_exits_with_config_error(tmp_path, capsys):
    f = tmp_path / "bad.ini"
    f.write_text("[numerics]\nnx = 8\nny = 8\nnz = 8\ndt = 0.1\nt_end = 1.0\nspin_up = 0.0\n")
    assert main(["run", "--config", str(f), "--out", str(tmp_path / "o")]) == 2
    assert "CFL" in capsys.readouterr().err


def test_missing_config_is_io_error(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path / "o")]) == 4


def test_invalid_thread_override(tmp_path, monkeypatch):
    f = tmp_path / "c.ini"
    f.write_text(LAMINAR_INI)
    monkeypatch.setenv("EEV_THREADS", "many")
    assert main(["run", "--config", str(f), "--out", str(tmp_path / "o")]) == 2


def test_flags_are_long_form_only():
    with pytest.raises(SystemExit):
        main(["run", "-c", "x.ini", "--out", "o"])
    with pytest.raises(SystemExit):
        main(["run", "--conf", "x.ini", "--out", "o"])


@pytest.fixture(scope="module")
def laminar_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("laminar")
    f = base / "laminar.ini"
    f.write_text(LAMINAR_INI)
    assert main(["run", "--config", str(f), "--out", str(base / "a")]) == 0
    assert main(["run", "--config", str(f), "--out", str(base / "b")]) == 0
    return base


def test_laminar_run_flags_and_files(laminar_run):
    rep = json.loads((laminar_run / "a" / "bound_report.json").read_text())
    assert rep["satisfied_A"] and rep["satisfied_B"] and rep["satisfied_C"]
    for name in ("diagnostics.csv", "ledger.csv", "config.ini", "manifest.json"):
        assert (laminar_run / "a" / name).exists()


def test_rerun_gives_identical_manifest(laminar_run):
    a = (laminar_run / "a" / "manifest.json").read_bytes()
    b = (laminar_run / "b" / "manifest.json").read_bytes()
    assert a == b
    assert json.loads(a)["invariants_held"] is True


def test_report_reproduces_stored_report(laminar_run, capsys):
    d = laminar_run / "a"
    assert main(["report", "--run-dir", str(d)]) == 0
    out = capsys.readouterr().out
    diff = float(re.search(r"max relative difference from stored report: (\S+)", out).group(1))
    assert diff <= 1e-12
    cfg = parse_config((d / "config.ini").read_text())
    params = BoundParams.from_config(cfg)
    rep = bound_report(averager_from_records(read_records(d / "diagnostics.csv"), params.spin_up), params)
    assert rep.lhs == pytest.approx(cfg.nu * cfg.lid_velocity**2 / cfg.length**2, rel=0.01)


def test_report_on_truncated_csv_names_columns(laminar_run, tmp_path, capsys):
    d = tmp_path / "cut"
    d.mkdir()
    (d / "config.ini").write_bytes((laminar_run / "a" / "config.ini").read_bytes())
    rows = list(csv.reader((laminar_run / "a" / "diagnostics.csv").read_text().splitlines()))
    with open(d / "diagnostics.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([r[:3] for r in rows])
    assert main(["report", "--run-dir", str(d)]) == 4
    err = capsys.readouterr().err
    assert "missing columns" in err and "eps_model" in err and "KE" in err


def test_report_on_missing_run_dir(tmp_path):
    assert main(["report", "--run-dir", str(tmp_path / "none")]) == 4


def test_hardy_verify_default_suite(tmp_path, capsys):
    code = main(["hardy-verify", "--csv", str(tmp_path / "h.csv")])
    out = capsys.readouterr().out
    c26 = float(re.search(r"^C26,(\S+)$", out, re.M).group(1))
    assert c26 == pytest.approx(0.98014, abs=1e-4)
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert rows and set(rows[0]) == {"inequality", "function", "lhs", "rhs", "ratio", "pass"}
    failed = [(r["inequality"], r["function"], r["ratio"]) for r in rows if r["pass"] != "1"]
    assert code == 0, f"failing checks: {failed}"
