"""Stage commands, artifact determinism, exit codes, configuration parsing."""

import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from koopctrl.cli import cmd_certify, cmd_dmd, cmd_simulate, cmd_synthesize, main
from koopctrl.config import ConfigError, load_config
from koopctrl.pde import (
    SpatialGrid,
    StateProfile,
    assemble_operator,
    eigensolve_reference,
    simulate,
    trajectory_to_npz,
)

REDUCED = """
[grid]
n = 401

[sampling]
m = 120
t_s = 0.004

[data]
dt = 5e-5
snapshots = 14

[dmd]
n = 11

[synthesis]
n_starts = 6
seed = 7

[verification]
n_tail = 20
n_check = 5
t_final = 0.5
dt = 2e-4
fit_start = 0.15

[output]
traj_stride = 20
"""


@pytest.fixture(scope="module")
def reduced_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "reduced.toml"
    path.write_text(REDUCED)
    return path


class TestConfig:
    def test_defaults_are_benchmark_preset(self):
        cfg = load_config()
        assert cfg.grid.n == 2001
        assert cfg.sampling.m == 500
        assert cfg.sampling.t_s == 0.004
        assert cfg.dmd.n == 11
        assert cfg.synthesis.targets == [-7.0034, -10.771, -52.729]
        assert cfg.plant.rho == 1.0

    def test_syntax_error_carries_line_number(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[plant]\nrho = = 1.0\n")
        with pytest.raises(ConfigError, match="line 2"):
            load_config(bad)

    def test_unknown_key_is_reported_with_path(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[plant]\nrho = 1.0\nwhatever = 3\n")
        with pytest.raises(ConfigError, match=r"\[plant\].whatever"):
            load_config(bad)

    def test_misaligned_sampling_rejected(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[sampling]\nt_s = 0.004\n\n[data]\ndt = 3e-5\n")
        with pytest.raises(ConfigError, match="integer multiple"):
            load_config(bad)

    def test_exit_code_3_on_config_error(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[nosuchblock]\nx = 1\n")
        rc = main(["--config", str(bad), "--out", str(tmp_path / "o"), "simulate"])
        assert rc == 3

    def test_exit_code_4_on_numerical_failure(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text('[plant]\na_table = "missing.csv"\n')
        rc = main(["--config", str(bad), "--out", str(tmp_path / "o"), "simulate"])
        assert rc == 4


def _bundle_files(out: Path) -> list[str]:
    return sorted(p.name for p in out.iterdir() if p.is_file())


class TestPipeline:
    def test_rerun_is_byte_identical(self, reduced_config, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            rc = main(
                ["--config", str(reduced_config), "--out", str(out), "reproduce-example"]
            )
            assert rc in (0, 2)
        files = _bundle_files(out_a)
        assert files == _bundle_files(out_b)
        for name in files:
            assert filecmp.cmp(out_a / name, out_b / name, shallow=False), name

    def test_stage_split_matches_monolith(self, reduced_config, tmp_path):
        mono, staged = tmp_path / "mono", tmp_path / "staged"
        rc = main(["--config", str(reduced_config), "--out", str(mono), "reproduce-example"])
        assert rc in (0, 2)
        for stage in ("simulate", "dmd", "synthesize", "certify", "verify"):
            rc = main(["--config", str(reduced_config), "--out", str(staged), stage])
            assert rc == 0
        for name in _bundle_files(staged):
            if name == "manifest.json":
                continue  # records which stages ran, differs by design
            assert filecmp.cmp(mono / name, staged / name, shallow=False), name

    def test_seed_flag_changes_synthesis(self, reduced_config, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out, seed in ((out_a, "1"), (out_b, "2")):
            for stage in ("simulate", "dmd", "synthesize"):
                rc = main(
                    [
                        "--config",
                        str(reduced_config),
                        "--out",
                        str(out),
                        "--seed",
                        seed,
                        stage,
                    ]
                )
                assert rc == 0
        a = json.loads((out_a / "synthesis.json").read_text())
        b = json.loads((out_b / "synthesis.json").read_text())
        assert a["P"] != b["P"]

    def test_acceptance_gate_fails_on_slow_targets(self, tmp_path):
        cfg_path = tmp_path / "slow.toml"
        cfg_path.write_text(
            REDUCED + "\n[synthesis.targets]\n"
        )
        # targets too slow to meet the decay threshold
        cfg_path.write_text(
            REDUCED.replace(
                "[synthesis]", "[synthesis]\ntargets = [-1.0, -2.0, -3.0]\nn = 3"
            )
        )
        rc = main(["--config", str(cfg_path), "--out", str(tmp_path / "o"), "reproduce-example"])
        assert rc == 2
        acceptance = json.loads((tmp_path / "o" / "acceptance.json").read_text())
        failed = {c["name"] for c in acceptance["checks"] if not c["ok"]}
        assert "closed_loop_alpha_at_most_-6.5" in failed


class TestStageBehaviors:
    def test_dmd_on_single_mode_trajectory(self, tmp_path):
        cfg = load_config(
            text="[grid]\nn = 401\n\n[sampling]\nm = 60\nt_s = 0.004\n\n"
            "[data]\ndt = 1e-4\nsnapshots = 5\n\n[dmd]\nn = 1\nauto_select = true\n"
            "tol = 1e-8\nn_max = 3\nwith_oracle = false\n\n"
            "[synthesis]\nn = 1\ntargets = [-5.0]\n"
        )
        grid = SpatialGrid(401)
        plant = cfg.plant.build(Path())
        pair = eigensolve_reference(assemble_operator(plant, grid), 1)[0]
        traj = simulate(plant, grid, StateProfile(pair.mode.copy()), None, None, 0.016, 1e-4)
        out = tmp_path / "o"
        out.mkdir()
        trajectory_to_npz(traj, out / "trajectory_openloop.npz")
        cmd_dmd(cfg, out)
        spectrum = json.loads((out / "spectrum.json").read_text())
        assert spectrum["order"] == 1
        assert len(spectrum["modes"]) == 1
        assert abs(spectrum["modes"][0]["lambda_hat_re"] - pair.eigenvalue) < 1e-6

    def test_dmd_on_injected_single_mode_csv(self, tmp_path):
        from koopctrl.observables import DataMatrix, SamplingConfig, data_matrix_to_csv

        cfg = load_config(
            text="[grid]\nn = 401\n\n[dmd]\nn = 1\nwith_oracle = false\n\n"
            "[synthesis]\nn = 1\ntargets = [-5.0]\n"
        )
        mu = 0.82
        centers = np.linspace(0.1, 0.9, 9)
        mode = np.cos(2.0 * centers)
        vals = np.column_stack([mode, mu * mode])
        data = DataMatrix(
            values=vals, config=SamplingConfig(centers=centers, epsilon=0.0, t_s=0.01), n=1
        )
        out = tmp_path / "o"
        out.mkdir()
        data_matrix_to_csv(data, out / "data_matrix_injected.csv")
        cmd_dmd(cfg, out)
        spectrum = json.loads((out / "spectrum.json").read_text())
        assert len(spectrum["modes"]) == 1
        assert abs(spectrum["modes"][0]["mu_re"] - mu) < 1e-12
        assert abs(spectrum["modes"][0]["lambda_hat_re"] - np.log(mu) / 0.01) < 1e-9

    def test_certify_with_zero_bounds(self, reduced_config, tmp_path):
        cfg = load_config(reduced_config)
        cfg.verification.zero_bounds = True
        out = tmp_path / "o"
        cmd_simulate(cfg, out)
        cmd_dmd(cfg, out)
        cmd_synthesize(cfg, out)
        cmd_certify(cfg, out)
        cert = json.loads((out / "certificate.json").read_text())
        assert cert["gamma"] == pytest.approx(-1.0)
        assert cert["eps_lambda"] == 0.0 and cert["eps_B"] == 0.0 and cert["c_phi"] == 0.0

    def test_manifest_indexes_stages(self, reduced_config, tmp_path):
        cfg = load_config(reduced_config)
        out = tmp_path / "o"
        cmd_simulate(cfg, out)
        cmd_dmd(cfg, out)
        manifest = json.loads((out / "manifest.json").read_text())
        assert "simulate" in manifest["stages"]
        assert "trajectory_openloop.npz" in manifest["stages"]["simulate"]["files"]
        assert "spectrum.json" in manifest["stages"]["dmd"]["files"]

    def test_data_matrix_csv_is_ingestible(self, reduced_config, tmp_path):
        from koopctrl.observables import data_matrix_from_csv

        cfg = load_config(reduced_config)
        out = tmp_path / "o"
        cmd_simulate(cfg, out)
        cmd_dmd(cfg, out)
        data = data_matrix_from_csv(out / "data_matrix.csv")
        assert data.values.shape == (120, 12)
        assert data.open_loop
