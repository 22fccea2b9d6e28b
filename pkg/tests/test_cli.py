import json
import struct
import subprocess
import sys

import numpy as np
import pytest

from spde_ergo.cli import main, read_profiles
from spde_ergo.config import ConfigErrors, SCHEMA, parse_config, parse_text

SIM = """\
[grid]
n_cells = 16
[time]
dt = 1e-3
T = 0.05
save_every = 5
[coefficients]
preset = reaction_diffusion
b_coeffs = 0, -1
sigma_const = 1.0
sigma_amp = 0.25
[truncation]
R = 50
[noise]
seed = 42
[experiment]
initial_modes = 1.0, 0.5
n_paths = 5
exit_levels = 0.5, 1.0
"""


def _write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _files(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.suffix in (".csv", ".bin")}


def test_defaults_filled_and_echoed(tmp_path):
    rc = parse_config(_write(tmp_path, "[coefficients]\npreset = burgers\n"))
    assert rc.sim.n_cells == 64 and rc.sim.dt == 1e-4
    text = rc.to_text()
    for section, keys in SCHEMA.items():
        assert f"[{section}]" in text
        for key in keys:
            assert f"\n{key} = " in text
    assert rc.values["coefficients"]["k1"] == 1.0


def test_negative_dt_message(tmp_path):
    with pytest.raises(ConfigErrors) as info:
        parse_config(_write(tmp_path, "[time]\ndt = -1\n"))
    assert "time.dt must be positive" in info.value.errors


def test_hypothesis_violation_names_witness():
    with pytest.raises(ConfigErrors) as info:
        parse_text("[coefficients]\npreset = reaction_diffusion\nb_coeffs = 0, 0, 0, -1\n")
    msg = "\n".join(info.value.errors)
    assert "(H1)" in msg and "r=" in msg


def test_all_errors_reported_with_lines():
    text = "[grid]\nn_cells = 16\nbogus = 1\n[time]\ndt = fast\nT = -3\n[noise]\nseed = -1\n"
    with pytest.raises(ConfigErrors) as info:
        parse_text(text, "x.ini")
    errs = info.value.errors
    assert any("x.ini:3" in e and "grid.bogus" in e for e in errs)
    assert any("x.ini:5" in e and "time.dt" in e for e in errs)
    assert any("noise.seed" in e for e in errs)
    assert len(errs) >= 3


def test_unknown_section():
    with pytest.raises(ConfigErrors, match="unknown section"):
        parse_text("[grids]\nn_cells = 16\n")


def test_config_round_trip():
    rc = parse_text(SIM)
    again = parse_text(rc.to_text())
    assert again.values == rc.values
    assert again.to_text() == rc.to_text()


def test_seed_override():
    assert parse_text(SIM, seed=7).sim.seed == 7


def test_simulate_outputs_and_manifest(tmp_path):
    cfg = _write(tmp_path, SIM)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    out = tmp_path / "a"
    manifest = json.loads((out / "manifest.json").read_text())
    assert sorted(manifest["outputs"]) == sorted(p.name for p in out.iterdir() if p.name != "manifest.json")
    assert manifest["seeds"]["seed"] == 42 and manifest["exit_code"] == 0
    assert manifest["config"] == parse_text(SIM).to_text()
    header = (out / "trajectory.csv").read_text().splitlines()[0]
    assert header == "t,path,h_norm_sq,mode_1,point,sup_abs"
    assert len((out / "exit_times.csv").read_text().splitlines()) == 1 + 5 * 2


def test_simulate_is_byte_reproducible(tmp_path):
    cfg = _write(tmp_path, SIM)
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b")])
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "c"), "--threads", "3"])
    a = _files(tmp_path / "a")
    assert a and a == _files(tmp_path / "b") == _files(tmp_path / "c")


def test_seed_flag_changes_output(tmp_path):
    cfg = _write(tmp_path, SIM)
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "43"])
    assert _files(tmp_path / "a")["trajectory.csv"] != _files(tmp_path / "b")["trajectory.csv"]


def test_profile_binary_layout(tmp_path):
    cfg = _write(tmp_path, SIM)
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")])
    raw = (tmp_path / "a" / "profiles.bin").read_bytes()
    n_cells, n_samples = struct.unpack("<II", raw[:8])
    assert (n_cells, n_samples) == (16, 11)
    assert len(raw) == 8 + 8 * n_samples * n_cells
    n, t, u = read_profiles(tmp_path / "a" / "profiles.bin")
    np.testing.assert_allclose(t, np.arange(11) * 5e-3)
    rc = parse_text(SIM)
    np.testing.assert_array_equal(u[0], rc.sim.initial_values())


def test_replay_is_byte_identical(tmp_path):
    cfg = _write(tmp_path, SIM)
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")])
    assert main(["replay", "--manifest", str(tmp_path / "a" / "manifest.json")]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "a" / "replay")


def test_kernel_test_rows(tmp_path):
    assert main(["kernel-test", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "kernel_test.csv").read_text().splitlines()
    assert lines[0] == "identity,parameters,max_error"
    rows = {line.split(",")[0]: float(line.split(",")[-1]) for line in lines[1:]}
    assert set(rows) == {"semigroup", "heat_equation", "orthonormality", "dy_finite_difference",
                         "J_bound_gauss", "J_bound_gauss_dy"}
    assert rows["semigroup"] <= 1e-6 and rows["heat_equation"] <= 1e-4
    assert rows["J_bound_gauss"] == 0 and rows["J_bound_gauss_dy"] == 0


def test_steer_near_zero_noise_inconclusive(tmp_path, capsys):
    text = """\
[grid]
n_cells = 16
[time]
dt = 1e-3
T = 1.0
[coefficients]
preset = burgers
sigma_const = 1e-3
[truncation]
R = 20
[experiment]
n_paths = 20
n_pilot = 20
"""
    code = main(["steer", "--config", str(_write(tmp_path, text)), "--out", str(tmp_path / "s")])
    assert code == 4
    summary = json.loads((tmp_path / "s" / "steer_summary.json").read_text())
    assert summary["status"] == "inconclusive"
    assert "inconclusive" in capsys.readouterr().err


def test_invariant_and_couple(tmp_path):
    text = SIM.replace("T = 0.05", "T = 5.0") + "burn_in = 0.5\nf2_modes = 3.0\nuniqueness = true\nn_boot = 20\n"
    cfg = _write(tmp_path, text)
    assert main(["invariant", "--config", str(cfg), "--out", str(tmp_path / "i")]) == 0
    summary = json.loads((tmp_path / "i" / "invariant_summary.json").read_text())
    assert summary["burn_in"] == 0.5 and "normality_p" in summary["mode_1"]
    assert main(["couple", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "uniqueness.csv").exists() and (tmp_path / "c" / "coupling.csv").exists()


def test_gradient_csv(tmp_path):
    text = SIM.replace("T = 0.05", "T = 0.02") + "n_samples = 200\ndirection_modes = 1.0\n"
    cfg = _write(tmp_path, text)
    assert main(["gradient", "--config", str(cfg), "--out", str(tmp_path / "g"), "--threads", "2"]) == 0
    lines = (tmp_path / "g" / "gradient.csv").read_text().splitlines()
    assert lines[0] == "t,estimator,std_err,fd_reference,n_samples"
    t, est, err, fd, n = map(float, lines[1].split(","))
    assert n == 200 and err > 0 and abs(est - fd) <= 5 * err


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["simulate", "--config", str(_write(tmp_path, "[time]\ndt = -1\n"))]) == 2
    assert "time.dt must be positive" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "missing.ini")]) == 2


def test_blow_up_exit_code(tmp_path, capsys):
    text = """\
[grid]
n_cells = 16
[time]
dt = 1e-3
T = 1.0
[coefficients]
preset = custom
b_coeffs = 0, 1
sigma_const = 0
[experiment]
initial_modes = 1e305
"""
    code = main(["simulate", "--config", str(_write(tmp_path, text)), "--out", str(tmp_path / "b")])
    assert code == 3
    assert "blow-up" in capsys.readouterr().err
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert manifest["exit_code"] == 3 and "t_fail" in manifest["summary"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "spde_ergo.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "0.1.0"
