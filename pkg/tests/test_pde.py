"""Discretization, reference eigensolver and Crank-Nicolson integrator."""

import numpy as np
import pytest

from conftest import make_neumann_plant, make_benchmark_plant
from koopctrl.pde import (
    ParabolicPlant,
    SpatialGrid,
    StateProfile,
    Trajectory,
    assemble_operator,
    closed_loop_simulate,
    eigensolve_reference,
    plant_grid_from_toml,
    plant_grid_to_toml,
    simulate,
    trajectory_from_csv,
    trajectory_from_npz,
    trajectory_to_csv,
    trajectory_to_npz,
)


def neumann_eig(k: int, shift: float = 7.0) -> float:
    return shift - (k * np.pi) ** 2


class TestAssembleOperator:
    def test_pure_neumann_laplacian_n3(self):
        plant = ParabolicPlant.from_poly(1.0, [0.0], 0.0, 0.0)
        op = assemble_operator(plant, SpatialGrid(3))
        h = 0.5
        expected = np.array(
            [
                [-2 / h**2, 2 / h**2, 0],
                [1 / h**2, -2 / h**2, 1 / h**2],
                [0, 2 / h**2, -2 / h**2],
            ]
        )
        np.testing.assert_allclose(op.dense(), expected)
        assert op.g1[0] == -2 / h and np.all(op.g1[1:] == 0)
        assert op.g2[-1] == 2 / h and np.all(op.g2[:-1] == 0)

    def test_reaction_term_is_additive(self):
        grid = SpatialGrid(17)
        base = assemble_operator(ParabolicPlant.from_poly(1.0, [0.0], 0.0, 0.0), grid)
        shifted = assemble_operator(ParabolicPlant.from_poly(1.0, [7.0], 0.0, 0.0), grid)
        np.testing.assert_allclose(shifted.dense(), base.dense() + 7.0 * np.eye(17))

    def test_benchmark_plant_dominant_eigenvalue(self, benchmark_reference):
        assert abs(benchmark_reference[0].eigenvalue - 7.0034) < 0.05

    def test_degenerate_grid_rejected(self):
        with pytest.raises(ValueError):
            SpatialGrid(2)

    def test_nonpositive_diffusion_rejected(self):
        with pytest.raises(ValueError):
            ParabolicPlant.from_poly(0.0, [1.0], 0.0, 0.0)


class TestEigensolveReference:
    def test_neumann_closed_form(self):
        plant = make_neumann_plant()
        pairs = eigensolve_reference(assemble_operator(plant, SpatialGrid(2001)), 3)
        for k, pair in enumerate(pairs):
            assert abs(pair.eigenvalue - neumann_eig(k)) < 1e-3
        grid = SpatialGrid(2001)
        np.testing.assert_allclose(pairs[0].mode, np.ones(2001), atol=1e-9)
        np.testing.assert_allclose(
            pairs[1].mode, np.sqrt(2) * np.cos(np.pi * grid.z), atol=1e-6
        )

    def test_fd_convergence_is_second_order(self):
        plant = make_neumann_plant()
        errors = []
        for n in (101, 201, 401):
            pairs = eigensolve_reference(assemble_operator(plant, SpatialGrid(n)), 3)
            errors.append(abs(pairs[2].eigenvalue - neumann_eig(2)))
        order1 = np.log2(errors[0] / errors[1])
        order2 = np.log2(errors[1] / errors[2])
        assert abs(order1 - 2.0) < 0.2
        assert abs(order2 - 2.0) < 0.2

    def test_orthonormality(self, benchmark_reference, ref_grid):
        k = 8
        gram = np.array(
            [
                [ref_grid.inner(benchmark_reference[i].mode, benchmark_reference[j].mode) for j in range(k)]
                for i in range(k)
            ]
        )
        assert np.max(np.abs(gram - np.eye(k))) < 1e-8

    def test_sign_convention_and_unit_norm(self, benchmark_reference, ref_grid):
        for pair in benchmark_reference[:10]:
            assert pair.mode[0] > 0
            assert abs(ref_grid.norm(pair.mode) - 1.0) < 1e-12

    def test_eigenvalue_growth_quadratic(self, benchmark_reference):
        ratios = np.array(
            [abs(benchmark_reference[i - 1].eigenvalue) / i**2 for i in range(10, 31)]
        )
        assert np.max(ratios) / np.min(ratios) < 1.5
        assert abs(ratios[-1] / ratios[10] - 1.0) < 0.1

    def test_count_validation(self, benchmark_plant):
        op = assemble_operator(benchmark_plant, SpatialGrid(11))
        with pytest.raises(ValueError):
            eigensolve_reference(op, 12)


class TestSimulate:
    def test_zero_dynamics(self, benchmark_plant):
        grid = SpatialGrid(101)
        traj = simulate(benchmark_plant, grid, StateProfile(np.zeros(101)), None, None, 0.01, 1e-3)
        assert np.all(traj.states == 0.0)

    def test_eigenvector_decay_oracle(self, benchmark_plant, benchmark_reference, ref_grid):
        pair = benchmark_reference[2]
        traj = simulate(
            benchmark_plant, ref_grid, StateProfile(pair.mode.copy()), None, None, 0.05, 1e-5
        )
        exact = np.exp(pair.eigenvalue * 0.05) * pair.mode
        rel = ref_grid.norm(traj.states[-1] - exact) / ref_grid.norm(exact)
        assert rel < 1e-4

    def test_crank_nicolson_second_order(self, benchmark_plant):
        grid = SpatialGrid(201)
        pair = eigensolve_reference(assemble_operator(benchmark_plant, grid), 3)[2]
        exact = np.exp(pair.eigenvalue * 0.05) * pair.mode
        errors = []
        for dt in (4e-4, 2e-4, 1e-4):
            traj = simulate(benchmark_plant, grid, StateProfile(pair.mode.copy()), None, None, 0.05, dt)
            errors.append(grid.norm(traj.states[-1] - exact) / grid.norm(exact))
        order1 = np.log2(errors[0] / errors[1])
        order2 = np.log2(errors[1] / errors[2])
        assert abs(order1 - 2.0) < 0.2
        assert abs(order2 - 2.0) < 0.2

    def test_constant_input_reaches_analytic_steady_state(self):
        # stable plant: steady state solves A x = -g2 * u0 exactly, and the
        # Crank-Nicolson fixed point coincides with it (dt small enough that
        # the weakly damped stiff ringing of the trapezoidal rule dies out)
        plant = ParabolicPlant.from_poly(1.0, [-1.0], 0.0, 0.0)
        grid = SpatialGrid(201)
        op = assemble_operator(plant, grid)
        steady = np.linalg.solve(op.dense(), -op.g2 * 1.0)
        traj = simulate(
            plant, grid, StateProfile(np.zeros(201)), None, lambda t: 1.0, 20.0, 1e-3
        )
        assert grid.norm(traj.states[-1] - steady) / grid.norm(steady) < 1e-7

    def test_pulse_concentrates_near_left_boundary(self, benchmark_pulse_ic, ref_grid):
        x0 = benchmark_pulse_ic.values
        assert ref_grid.norm(x0) > 0
        w = ref_grid.weights
        left_mass = np.sum((w * x0**2)[ref_grid.z <= 0.5])
        right_mass = np.sum((w * x0**2)[ref_grid.z > 0.5])
        assert left_mass > right_mass

    def test_time_grid_validation(self, benchmark_plant):
        grid = SpatialGrid(51)
        with pytest.raises(ValueError):
            simulate(benchmark_plant, grid, StateProfile(np.zeros(51)), None, None, 0.0105, 1e-3)
        with pytest.raises(ValueError):
            simulate(benchmark_plant, grid, StateProfile(np.zeros(51)), None, None, 0.01, -1e-3)


class TestClosedLoopSimulate:
    def test_zero_gain_matches_open_loop(self, benchmark_plant):
        grid = SpatialGrid(201)
        rng = np.random.default_rng(7)
        x0 = StateProfile(rng.standard_normal(201))
        modes = rng.standard_normal((3, 201))
        open_traj = simulate(benchmark_plant, grid, x0, None, None, 0.02, 1e-4)
        closed_traj = closed_loop_simulate(
            benchmark_plant, grid, x0, np.zeros((2, 3)), modes, 0.02, 1e-4
        )
        np.testing.assert_array_equal(open_traj.states, closed_traj.states)

    def test_untouched_modes_decay_at_open_loop_rate(
        self, benchmark_plant, ref_grid, benchmark_reference, oracle_synthesis, oracle_model
    ):
        rng = np.random.default_rng(3)
        amps = np.concatenate(([1.0], 0.1 * rng.standard_normal(7)))
        x0 = amps @ np.array([p.mode for p in benchmark_reference[3:11]])
        traj = closed_loop_simulate(
            benchmark_plant,
            ref_grid,
            StateProfile(x0),
            oracle_synthesis.gain,
            oracle_model.modes,
            0.08,
            1e-5,
        )
        from koopctrl.stability import decay_fit

        alpha, _ = decay_fit(traj, 0.03)
        lam4 = benchmark_reference[3].eigenvalue
        assert abs(alpha - lam4) / abs(lam4) < 0.05

    def test_gain_shape_validation(self, benchmark_plant):
        grid = SpatialGrid(51)
        with pytest.raises(ValueError):
            closed_loop_simulate(
                benchmark_plant,
                grid,
                StateProfile(np.zeros(51)),
                np.zeros((2, 3)),
                np.zeros((2, 51)),
                0.01,
                1e-3,
            )


class TestSerialization:
    def test_trajectory_csv_round_trip(self, benchmark_plant, tmp_path):
        grid = SpatialGrid(11)
        rng = np.random.default_rng(0)
        traj = simulate(
            benchmark_plant, grid, StateProfile(rng.standard_normal(11)), None, None, 0.01, 1e-3
        )
        path = tmp_path / "traj.csv"
        trajectory_to_csv(traj, path)
        back = trajectory_from_csv(path)
        np.testing.assert_allclose(back.states, traj.states, rtol=0, atol=0)
        np.testing.assert_allclose(back.t, traj.t)

    def test_trajectory_npz_round_trip(self, benchmark_plant, tmp_path):
        grid = SpatialGrid(11)
        rng = np.random.default_rng(1)
        traj = simulate(
            benchmark_plant,
            grid,
            StateProfile(rng.standard_normal(11)),
            lambda t: np.sin(t),
            None,
            0.01,
            1e-3,
        )
        path = tmp_path / "traj.npz"
        trajectory_to_npz(traj, path)
        back = trajectory_from_npz(path)
        np.testing.assert_array_equal(back.states, traj.states)
        np.testing.assert_array_equal(back.u1, traj.u1)

    def test_plant_toml_round_trip(self):
        plant = make_benchmark_plant()
        grid = SpatialGrid(101)
        text = plant_grid_to_toml(plant, grid, a_coeffs=[5.0, 8.0, -8.0])
        plant2, grid2, coeffs = plant_grid_from_toml(text)
        assert grid2.n == 101
        assert coeffs == [5.0, 8.0, -8.0]
        np.testing.assert_allclose(
            plant2.reaction_samples(grid.z), plant.reaction_samples(grid.z)
        )
        assert plant2.q0 == plant.q0 and plant2.q1 == plant.q1

    def test_plant_toml_sample_table(self):
        plant = make_benchmark_plant()
        grid = SpatialGrid(51)
        text = plant_grid_to_toml(plant, grid)
        plant2, _, coeffs = plant_grid_from_toml(text)
        assert coeffs is None
        np.testing.assert_allclose(
            plant2.reaction_samples(grid.z), plant.reaction_samples(grid.z), atol=1e-12
        )

    def test_trajectory_guards(self):
        grid = SpatialGrid(5)
        with pytest.raises(ValueError):
            Trajectory(
                t=np.array([0.0, 0.0]),
                states=np.zeros((2, 5)),
                u1=np.zeros(2),
                u2=np.zeros(2),
                grid=grid,
            )
