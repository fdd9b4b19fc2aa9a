import json

import numpy as np
import pytest

from qndspin.cli import main
from qndspin.config import ConfigError, config_from_dict, hash_config, parse_config, preset_names
from qndspin.estimator import kf_run
from qndspin.runner import COMMANDS, derive_seeds, run_command
from qndspin.simulator import discretize, read_photocurrent_csv

SMALL = {"experiment": {"n_steps": 3000}}


def _write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def test_minimal_config_resolves_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, {"physical": {"n_rb": 2e14}}))
    r = cfg.resolved()
    assert r["physical"]["n_rb"] == 2e14
    assert r["physical"]["sigma_se"] == 1.9e-14
    assert r["dynamics"]["larmor_hz"] == 1000.0
    assert len(r["dynamics"]["b_field"]) == 3
    assert r["dynamics"]["r_se"] == pytest.approx(1.9e-14 * 2e14 * 4.75e4)
    assert r["dynamics"]["t2_from_se"] is True
    assert r["dynamics"]["t2_inv"] > r["dynamics"]["t1_inv"]
    assert r["experiment"]["seed"] == 20190101
    # resolving is idempotent
    assert config_from_dict(r).resolved() == r


def test_rate_order_error_names_both_fields():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"dynamics": {"t1_inv": 500.0, "t2_inv": 100.0}})
    assert "t2_inv" in str(exc.value) and "t1_inv" in str(exc.value)


def test_unknown_keys_and_bad_values_rejected():
    with pytest.raises(ConfigError, match="physical.density"):
        config_from_dict({"physical": {"density": 1.0}})
    with pytest.raises(ConfigError, match="experiment.n_steps"):
        config_from_dict({"experiment": {"n_steps": 0}})
    with pytest.raises(ConfigError):
        config_from_dict({"schema_version": 2})
    with pytest.raises(ConfigError):
        config_from_dict({"dynamics": {"larmor_hz": 5.0, "b_field": [0.0, 0.0, 1e-6]}})


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config(bad)


def test_paper_fig2_preset_atom_number():
    cfg = parse_config("paper_fig2")
    assert cfg.n_atoms == pytest.approx(5.3e13, rel=0.01)


def test_all_presets_parse():
    names = preset_names()
    assert {"paper_fig1d", "paper_fig2a", "paper_fig2b", "paper_fig3", "paper_fig4"} <= set(names)
    for n in names:
        cfg = parse_config(n)
        assert cfg.measurement.synthetic


def test_config_hash_stable():
    a = parse_config("paper_fig2")
    b = parse_config("paper_fig2")
    assert a.config_hash() == b.config_hash() == hash_config(json.loads(json.dumps(a.resolved())))
    c = config_from_dict({**a.resolved(), "experiment": {**a.resolved()["experiment"], "seed": 1}})
    assert c.config_hash() != a.config_hash()


def test_derive_seeds_deterministic():
    assert derive_seeds(5) == derive_seeds(5)
    s = derive_seeds(5)
    assert len({s["spin"], s["shot"], s["calibration"]}) == 3


def test_simulate_zero_steps_fails_without_files(tmp_path, capsys):
    cfg = _write(tmp_path, {"experiment": {"n_steps": 0}})
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["status"] == "error" and "n_steps" in err["message"]
    assert not out.exists()


def test_numerical_failure_exit_two_leaves_no_files(tmp_path, capsys):
    # 50 samples are too few for the filter covariance to settle
    cfg = _write(tmp_path, {"experiment": {"n_steps": 50}})
    out = tmp_path / "out"
    assert main(["filter", "--config", str(cfg), "--out", str(out)]) == 2
    assert json.loads(capsys.readouterr().err)["error_type"] == "NotConvergedError"
    assert not out.exists() or not any(out.iterdir())
    assert not list(tmp_path.glob(".qndspin-staging-*"))


def test_usage_errors_exit_one(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    assert main(["simulate", "--jobs", "0", "--out", str(tmp_path)]) == 1


def test_simulate_outputs_and_manifest(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL)
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(cfg), "--out", str(out), "--seed", "99"]) == 0
    ok = json.loads(capsys.readouterr().out)
    assert ok["status"] == "ok"
    man = json.loads((out / "manifest-simulate.json").read_text())
    listed = {f["path"] for f in man["files"]}
    assert listed == {p.name for p in out.iterdir()}
    assert man["seeds"]["root"] == 99
    resolved = json.loads((out / "resolved-config-simulate.json").read_text())
    assert hash_config(resolved) == man["config_hash"]
    assert resolved["experiment"]["seed"] == 99
    assert "measurement.g_coupling" in man["synthetic_parameters"]
    traj = np.loadtxt(out / "trajectory.csv", delimiter=",", skiprows=1)
    assert traj.shape == (3000, 4)


def test_filter_on_simulate_output_matches_in_memory(tmp_path):
    cfg = config_from_dict(SMALL)
    run_command("simulate", cfg, tmp_path / "sim")
    run_command("filter", cfg, tmp_path / "flt", input_path=tmp_path / "sim" / "photocurrent.csv")
    system = cfg.system()
    dyn = system.dynamics()
    dm = discretize(dyn, system.measurement.delta)
    rec = read_photocurrent_csv(tmp_path / "sim" / "photocurrent.csv")
    run = kf_run(rec, dm, system.measurement, cfg.prior.mean, cfg.prior_cov())
    got = np.loadtxt(tmp_path / "flt" / "filter.csv", delimiter=",", skiprows=1)
    assert np.array_equal(got[:, 1:4], run.estimates)
    # filter simulating on its own draws the same record as simulate
    run_command("filter", cfg, tmp_path / "flt2")
    assert (tmp_path / "flt2" / "photocurrent.csv").read_bytes() == \
        (tmp_path / "sim" / "photocurrent.csv").read_bytes()
    assert (tmp_path / "flt2" / "filter.csv").read_bytes() == (tmp_path / "flt" / "filter.csv").read_bytes()


def test_input_spacing_mismatch_is_usage_error(tmp_path):
    cfg = _write(tmp_path, SMALL)
    (tmp_path / "pc.csv").write_text("time,I\n0,1\n1e-3,2\n2e-3,3\n")
    rc = main(["filter", "--config", str(cfg), "--out", str(tmp_path / "o"), "--input", str(tmp_path / "pc.csv")])
    assert rc == 1


def test_env_var_sets_output_dir(tmp_path, monkeypatch):
    cfg = _write(tmp_path, {"experiment": {"n_steps": 10}})
    monkeypatch.setenv("QNDSPIN_OUT", str(tmp_path / "env"))
    assert main(["simulate", "--config", str(cfg)]) == 0
    assert (tmp_path / "env" / "trajectory.csv").exists()
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "trajectory.csv").exists()


def test_rerun_is_byte_identical(tmp_path):
    cfg = config_from_dict(SMALL)
    for d in ("a", "b"):
        run_command("simulate", cfg, tmp_path / d)
    for name in ("trajectory.csv", "photocurrent.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resolved_config_reproduces_run(tmp_path):
    cfg = config_from_dict(SMALL)
    run_command("simulate", cfg, tmp_path / "a")
    again = parse_config(tmp_path / "a" / "resolved-config-simulate.json")
    run_command("simulate", again, tmp_path / "b")
    assert (tmp_path / "a" / "photocurrent.csv").read_bytes() == (tmp_path / "b" / "photocurrent.csv").read_bytes()


@pytest.mark.parametrize("cmd", ["witness", "calibrate", "scan-field"])
def test_light_commands_run(tmp_path, cmd):
    cfg = config_from_dict({"experiment": {"n_steps": 3000, "larmor_scan_hz": [1e3, 1e4]}})
    man = run_command(cmd, cfg, tmp_path, jobs=1)
    assert man.command == cmd
    assert all((tmp_path / f["path"]).exists() for f in man.files)


def test_calibrate_recovers_density(tmp_path):
    cfg = parse_config("paper_fig3")
    run_command("calibrate", cfg, tmp_path)
    res = json.loads((tmp_path / "calibration.json").read_text())
    assert res["n_rb"] == pytest.approx(3.6e13, rel=0.05)


def test_presets_subcommand(capsys):
    assert main(["presets"]) == 0
    assert "paper_fig2" in capsys.readouterr().out.split()


def test_commands_list():
    assert set(COMMANDS) == {"simulate", "filter", "spectrum", "calibrate", "witness", "scan-field", "scan-gradient"}
