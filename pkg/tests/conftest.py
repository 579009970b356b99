"""Shared fixtures: benchmark plant, cached pipeline stages, small helpers.

The diffusion-reaction benchmark pipeline (pulse preparation, open-loop data
run, identification, synthesis) is expensive enough to share; everything is
seeded, so session scope does not leak state between tests.
"""

from __future__ import annotations

import numpy as np
import pytest

from koopctrl.assign import build_modal_model, optimize_parameters, parametric_gain
from koopctrl.dmd import extract_spectrum, fit_companion
from koopctrl.observables import SamplingConfig, build_data_matrix
from koopctrl.pde import (
    Eigenpair,
    ParabolicPlant,
    SpatialGrid,
    StateProfile,
    assemble_operator,
    eigensolve_reference,
    simulate,
)

BENCHMARK_TARGETS = np.array([-7.0034, -10.771, -52.729])
OPTIMIZER_SEED = 20240101


def make_benchmark_plant(rho: float = 1.0) -> ParabolicPlant:
    return ParabolicPlant.from_poly(rho, [5.0, 8.0, -8.0], 2.0, 1.0)


def make_neumann_plant(shift: float = 7.0) -> ParabolicPlant:
    return ParabolicPlant.from_poly(1.0, [shift], 0.0, 0.0)


def modal_data_matrix(
    reference: list[Eigenpair],
    grid: SpatialGrid,
    config: SamplingConfig,
    amplitudes: np.ndarray,
    n_cols: int,
) -> np.ndarray:
    """Snapshot matrix built directly from the modal expansion.

    Columns are exact geometric sequences in the discrete eigenpairs, which is
    the cleanest realization of an initial state spanned by finitely many
    modes: no time integration enters at all.
    """
    mus = np.array([np.exp(p.eigenvalue * config.t_s) for p in reference])
    sensor_modes = np.array([np.interp(config.centers, grid.z, p.mode) for p in reference])
    cols = [
        (amplitudes * mus**k) @ sensor_modes
        for k in range(n_cols)
    ]
    return np.column_stack(cols)


@pytest.fixture(scope="session")
def benchmark_plant():
    return make_benchmark_plant()


@pytest.fixture(scope="session")
def ref_grid():
    return SpatialGrid(2001)


@pytest.fixture(scope="session")
def benchmark_reference(benchmark_plant, ref_grid):
    op = assemble_operator(benchmark_plant, ref_grid)
    return eigensolve_reference(op, 60)


@pytest.fixture(scope="session")
def benchmark_pulse_ic(benchmark_plant, ref_grid):
    pulse = lambda t: 10.0 if (t + 0.1 >= 0 and t < 0) else 0.0  # noqa: E731
    prep = simulate(
        benchmark_plant,
        ref_grid,
        StateProfile(np.zeros(ref_grid.n), -0.1),
        pulse,
        None,
        0.1,
        1e-4,
        t0=-0.1,
    )
    return prep.final_profile


@pytest.fixture(scope="session")
def benchmark_traj(benchmark_plant, ref_grid, benchmark_pulse_ic):
    return simulate(
        benchmark_plant,
        ref_grid,
        StateProfile(benchmark_pulse_ic.values, 0.0),
        None,
        None,
        0.052,
        1e-5,
    )


@pytest.fixture(scope="session")
def benchmark_sampling():
    return SamplingConfig.equispaced(500, 0.004)


@pytest.fixture(scope="session")
def benchmark_data(benchmark_traj, benchmark_sampling):
    return build_data_matrix(benchmark_traj, benchmark_sampling, 11)


@pytest.fixture(scope="session")
def benchmark_spectrum(benchmark_data, ref_grid):
    return extract_spectrum(benchmark_data, fit_companion(benchmark_data), ref_grid)


@pytest.fixture(scope="session")
def benchmark_model(benchmark_spectrum):
    return build_modal_model(benchmark_spectrum, 3, 1.0)


@pytest.fixture(scope="session")
def benchmark_synthesis(benchmark_model):
    params, _ = optimize_parameters(
        benchmark_model, BENCHMARK_TARGETS, box_bound=1.0, n_starts=50, seed=OPTIMIZER_SEED
    )
    return parametric_gain(benchmark_model, BENCHMARK_TARGETS, params)


@pytest.fixture(scope="session")
def oracle_model(benchmark_reference, ref_grid):
    """Modal model assembled from the reference eigensolver (no data path)."""
    from koopctrl.assign import ModalModel

    n = 3
    lambdas = np.array([p.eigenvalue for p in benchmark_reference[:n]])
    rows = np.array([[-p.mode[0], p.mode[-1]] for p in benchmark_reference[:n]])
    modes = np.array([p.mode for p in benchmark_reference[:n]])
    tail = np.array([p.eigenvalue for p in benchmark_reference[n : n + 8]])
    return ModalModel(
        lambdas=lambdas,
        input_matrix=rows,
        modes=modes,
        rho_hat=1.0,
        grid=ref_grid,
        tail_lambdas=tail,
    )


@pytest.fixture(scope="session")
def oracle_synthesis(oracle_model):
    params, _ = optimize_parameters(
        oracle_model, BENCHMARK_TARGETS, box_bound=1.0, n_starts=20, seed=OPTIMIZER_SEED
    )
    return parametric_gain(oracle_model, BENCHMARK_TARGETS, params)
