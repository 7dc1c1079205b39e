import json
from pathlib import Path

import numpy as np
import pytest

from fockbox import cli, config as cfg
from fockbox.storage import read_trajectory, sha256_file

BASE = """
[grid]
d = 1
N = 32
L = 10.0

[potential]
point_masses = [[0.7, 0.2], [-0.7, 0.2]]

[distribution]
family = "gaussian"
rho = 0.4
sigma = 0.8
occupation_cutoff = 1e-10

[backend]
kind = "orbital"

[perturbation]
orbital_bumps = [[2, 5, 0.001, 0.0]]

[time]
T = 0.5
dt = 0.005
checkpoint_stride = 20

[run]
seed = 7
workers = 1

[hypotheses]
threshold_mode = "configured"
threshold = 2.0
"""


@pytest.fixture()
def base_config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(BASE)
    return path


def run_cli(*argv):
    return cli.main(list(argv))


class TestConfig:
    def test_round_trip_bit_identical(self, base_config):
        parsed, _ = cfg.load_file(base_config)
        canon = cfg.dumps(parsed)
        assert cfg.dumps(cfg.loads(canon)) == canon
        assert cfg.loads(canon) == parsed

    def test_missing_field_names_it(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[grid]\nd = 1\nL = 10.0\n")
        with pytest.raises(cfg.ConfigError) as err:
            cfg.build_grid(cfg.load_file(path)[0])
        assert "grid.N" in str(err.value)

    def test_malformed_exit_code(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text("[grid]\nd = 1\nL = 10.0\n")
        code = run_cli("evolve", str(path), "--out", str(tmp_path / "o"))
        assert code == cli.EXIT_CONFIG
        assert "grid.N" in capsys.readouterr().err


class TestCheckHypotheses:
    def test_pass_exit_zero(self, base_config, tmp_path):
        out = tmp_path / "cert"
        code = run_cli("check-hypotheses", str(base_config), "--out", str(out))
        assert code == cli.EXIT_OK
        cert = json.loads((out / "certificate.json").read_text())
        assert cert["passed"] is True
        assert (out / "certificate.png").exists()

    def test_free_potential_passes(self, tmp_path):
        text = BASE.replace("point_masses = [[0.7, 0.2], [-0.7, 0.2]]", "point_masses = []")
        path = tmp_path / "free.toml"
        path.write_text(text)
        assert run_cli("check-hypotheses", str(path), "--out", str(tmp_path / "o")) == 0

    def test_non_elliptic_fails_exit_two(self, tmp_path):
        text = """
[grid]
d = 1
N = 128
L = 20.0

[potential]
density = "gaussian"
density_amplitude = -1.2
density_width = 1.0

[distribution]
family = "fermi_dirac"
rho = 4.0
T = 2.0
mu = -1.0

[hypotheses]
threshold_mode = "configured"
threshold = 1000.0
"""
        path = tmp_path / "dense.toml"
        path.write_text(text)
        code = run_cli("check-hypotheses", str(path), "--out", str(tmp_path / "o"))
        assert code == cli.EXIT_HYPOTHESIS_FAIL

    def test_warning_only_exit_three(self, tmp_path):
        text = """
[grid]
d = 1
N = 16
L = 30.0

[potential]
point_masses = []

[distribution]
family = "fermi_dirac"
rho = 1.0
T = 10.0
mu = 0.0

[hypotheses]
threshold_mode = "configured"
threshold = 1000.0
"""
        path = tmp_path / "warn.toml"
        path.write_text(text)
        code = run_cli("check-hypotheses", str(path), "--out", str(tmp_path / "o"))
        assert code == cli.EXIT_WARNINGS


class TestEvolve:
    def test_writes_trajectory_and_kernels(self, base_config, tmp_path):
        out = tmp_path / "traj"
        assert run_cli("evolve", str(base_config), "--out", str(out)) == 0
        states, manifest, vkernels, seps = read_trajectory(out)
        assert manifest["status"] == "completed"
        assert len(states) == 6
        assert vkernels is not None and vkernels.shape[0] == 6
        assert seps == ((0.0,), (0.7,), (-0.7,))
        rows = (out / "observers.csv").read_text().splitlines()
        assert rows[0] == "time,observable,value"
        assert (out / "observers.png").exists()

    def test_equilibrium_observers_stationary(self, tmp_path):
        text = BASE.replace("orbital_bumps = [[2, 5, 0.001, 0.0]]", "orbital_bumps = []")
        text = text.replace("dt = 0.005", "dt = 0.001").replace(
            "checkpoint_stride = 20", "checkpoint_stride = 100"
        )
        path = tmp_path / "eq.toml"
        path.write_text(text)
        out = tmp_path / "eqtraj"
        assert run_cli("evolve", str(path), "--out", str(out)) == 0
        rows = [
            line.split(",")
            for line in (out / "observers.csv").read_text().splitlines()[1:]
        ]
        drift = [float(v) for _, name, v in rows if name == "mass_drift_rel"]
        zs = [float(v) for _, name, v in rows if name == "z_l2"]
        assert max(drift) < 1e-10
        assert max(zs) < 1e-9

    def test_deterministic_across_worker_counts(self, base_config, tmp_path):
        hashes = []
        for workers in (1, 2, 8):
            out = tmp_path / f"w{workers}"
            code = run_cli(
                "evolve", str(base_config), "--out", str(out), "--workers", str(workers)
            )
            assert code == 0
            hashes.append(sha256_file(out / "observers.csv"))
            manifest = json.loads((out / "manifest.json").read_text())
            assert manifest["observers_sha256"] == hashes[-1]
        assert len(set(hashes)) == 1

    def test_blow_up_exit_four(self, tmp_path):
        text = BASE.replace('point_masses = [[0.7, 0.2], [-0.7, 0.2]]', 'point_masses = [[0.0, 2000.0]]')
        text = text.replace("dt = 0.005", "dt = 0.25")
        path = tmp_path / "blow.toml"
        path.write_text(text)
        out = tmp_path / "blowout"
        code = run_cli("evolve", str(path), "--out", str(out))
        assert code == cli.EXIT_BLOWUP
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "blow-up"
        assert "last_good_time" in manifest

    def test_monte_carlo_backend(self, tmp_path):
        text = BASE.replace('kind = "orbital"', 'kind = "monte_carlo"\nM = 16')
        path = tmp_path / "mc.toml"
        path.write_text(text)
        out = tmp_path / "mctraj"
        assert run_cli("evolve", str(path), "--out", str(out)) == 0
        states, manifest, _, _ = read_trajectory(out)
        assert states[0].fields.shape[0] == 16


class TestLinearResponse:
    def test_from_trajectory(self, base_config, tmp_path):
        traj = tmp_path / "traj"
        assert run_cli("evolve", str(base_config), "--out", str(traj)) == 0
        out = tmp_path / "lr"
        code = run_cli(
            "linear-response", str(base_config), "--out", str(out), "--trajectory", str(traj)
        )
        # default synthetic source unless config says trajectory; pass config with source
        text = BASE + '\n[linear_response]\nsource = "trajectory"\ntrajectory = "%s"\n' % traj
        path = tmp_path / "lr.toml"
        path.write_text(text)
        code = run_cli("linear-response", str(path), "--out", str(out))
        assert code == 0
        verdict = json.loads((out / "response.json").read_text())
        assert verdict["invertible"] is True
        assert verdict["operator_norm"] < 1.0
        assert (out / "block_norms.csv").exists()
        assert (out / "block_norms.png").exists()

    def test_delta_config_trivially_invertible(self, tmp_path):
        text = BASE.replace(
            "point_masses = [[0.7, 0.2], [-0.7, 0.2]]", "point_masses = [[0.0, 0.7]]"
        )
        text += '\n[linear_response]\nsource = "synthetic"\nT = 1.0\nn_t = 12\nsynthetic_seed = 4\n'
        path = tmp_path / "delta.toml"
        path.write_text(text)
        out = tmp_path / "lrdelta"
        assert run_cli("linear-response", str(path), "--out", str(out)) == 0
        verdict = json.loads((out / "response.json").read_text())
        assert verdict["verdict"] == "trivially-invertible"
        assert verdict["operator_norm"] < 1e-10

    def test_not_certified_exit_five(self, tmp_path):
        text = BASE.replace("rho = 0.4", "rho = 2.5")
        text += '\n[linear_response]\nsource = "synthetic"\nT = 2.0\nn_t = 24\n'
        path = tmp_path / "big.toml"
        path.write_text(text)
        out = tmp_path / "lrbig"
        code = run_cli("linear-response", str(path), "--out", str(out))
        assert code == cli.EXIT_NOT_CERTIFIED
        verdict = json.loads((out / "response.json").read_text())
        assert verdict["invertible"] is False
        assert verdict["operator_norm"] >= 1.0


class TestScatter:
    def test_extraction_and_too_short(self, base_config, tmp_path):
        traj = tmp_path / "traj"
        assert run_cli("evolve", str(base_config), "--out", str(traj)) == 0
        out = tmp_path / "sc"
        text = BASE + f'\n[scatter]\ntrajectory = "{traj}"\n'
        path = tmp_path / "sc.toml"
        path.write_text(text)
        assert run_cli("scatter", str(path), "--out", str(out)) == 0
        report = json.loads((out / "scattering.json").read_text())
        assert report["T"] == 0.5
        assert (out / "residuals.csv").exists()
        # too short
        text2 = BASE + f'\n[scatter]\ntrajectory = "{traj}"\nT_extract = 9.0\n'
        path2 = tmp_path / "sc2.toml"
        path2.write_text(text2)
        assert run_cli("scatter", str(path2), "--out", str(out)) == cli.EXIT_MODULE_INPUT


class TestDecay:
    def test_free_slope_and_wrap_error(self, tmp_path):
        text = """
[grid]
d = 1
N = 16
L = 5.0

[decay]
d = 1
N = 1024
L = 120.0
shell = 1
t_min = 1.0
t_max = 7.0
n_samples = 16
potential = "free"
"""
        path = tmp_path / "decay.toml"
        path.write_text(text)
        out = tmp_path / "dec"
        assert run_cli("decay", str(path), "--out", str(out)) == 0
        payload = json.loads((out / "decay.json").read_text())
        assert abs(payload["slope"] + 0.5) < 0.05
        text2 = text.replace("t_max = 7.0", "t_max = 40.0")
        path2 = tmp_path / "decay2.toml"
        path2.write_text(text2)
        code = run_cli("decay", str(path2), "--out", str(tmp_path / "dec2"))
        assert code == cli.EXIT_WRAP_WINDOW

    def test_identical_runs_byte_identical_outputs(self, base_config, tmp_path):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            assert run_cli("evolve", str(base_config), "--out", str(out)) == 0
            outs.append(sha256_file(out / "observers.csv"))
        assert outs[0] == outs[1]
