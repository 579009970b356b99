"""Ground-truth continuum model for a boundary-actuated 1-D diffusion-reaction system.

Finite differences on a uniform grid over [0, 1], Robin boundary conditions
folded in through second-order ghost-node elimination, Crank-Nicolson time
stepping and a tridiagonal reference eigensolver.  Everything downstream
(sensor sampling, spectral identification, gain synthesis, verification)
treats this module as the plant and as the oracle.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal, solve_banded

__all__ = [
    "ParabolicPlant",
    "SpatialGrid",
    "StateProfile",
    "Trajectory",
    "Eigenpair",
    "DiscreteOperator",
    "assemble_operator",
    "eigensolve_reference",
    "simulate",
    "closed_loop_simulate",
    "trajectory_to_csv",
    "trajectory_from_csv",
    "trajectory_to_npz",
    "trajectory_from_npz",
    "plant_grid_to_toml",
    "plant_grid_from_toml",
]

Signal = Callable[[float], float]


class NumericalError(RuntimeError):
    """A linear solve or eigensolve failed beyond recovery."""


@dataclass(frozen=True)
class ParabolicPlant:
    """Diffusion-reaction plant  x_t = rho*x'' + a(z)*x  with Robin actuation.

    Parameters
    ----------
    rho : float
        Diffusion coefficient, > 0.
    a : callable
        Reaction coefficient a(z), vectorised over z in [0, 1].
    q0, q1 : float
        Robin coefficients:  x'(0) = q0*x(0) + u1,  x'(1) = q1*x(1) + u2.
    """

    rho: float
    a: Callable[[np.ndarray], np.ndarray]
    q0: float
    q1: float

    def __post_init__(self) -> None:
        if not self.rho > 0:
            raise ValueError(f"diffusion coefficient must be positive, got {self.rho}")

    @classmethod
    def from_poly(cls, rho: float, coeffs: Sequence[float], q0: float, q1: float) -> "ParabolicPlant":
        """Plant with a polynomial reaction profile, ``coeffs`` in ascending powers."""
        c = np.asarray(coeffs, dtype=float)
        return cls(rho=rho, a=lambda z: np.polynomial.polynomial.polyval(z, c), q0=q0, q1=q1)

    def reaction_samples(self, z: np.ndarray) -> np.ndarray:
        vals = np.asarray(self.a(np.asarray(z, dtype=float)), dtype=float)
        vals = np.broadcast_to(vals, np.shape(z)).copy()
        if not np.all(np.isfinite(vals)):
            raise ValueError("reaction coefficient evaluates to non-finite values")
        return vals


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform grid on [0, 1] with ``n`` nodes; carries trapezoid quadrature weights."""

    n: int
    z: np.ndarray = field(init=False, repr=False, compare=False)
    h: float = field(init=False, repr=False, compare=False)
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.n < 3:
            raise ValueError(f"grid needs at least 3 nodes, got {self.n}")
        z = np.linspace(0.0, 1.0, self.n)
        w = np.full(self.n, z[1] - z[0])
        w[0] *= 0.5
        w[-1] *= 0.5
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "h", float(z[1] - z[0]))
        object.__setattr__(self, "weights", w)

    def inner(self, u: np.ndarray, v: np.ndarray) -> complex | float:
        """Trapezoid L2 inner product; conjugates the second argument."""
        return np.sum(self.weights * u * np.conj(v))

    def norm(self, u: np.ndarray) -> float:
        return float(np.sqrt(np.real(self.inner(u, u))))


@dataclass(frozen=True)
class StateProfile:
    """State x(z, t) sampled on a grid at a fixed time."""

    values: np.ndarray
    t: float = 0.0

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("state profile contains non-finite entries")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class Trajectory:
    """Time history of state profiles plus the boundary input records.

    ``states[k]`` is the profile at ``t[k]``; the stamps are uniformly spaced
    by ``dt``.  ``u1``/``u2`` hold the input values at the stamps.
    """

    t: np.ndarray
    states: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    grid: SpatialGrid

    def __post_init__(self) -> None:
        if len(self.t) != self.states.shape[0]:
            raise ValueError("time stamps and state rows disagree")
        if self.states.shape[1] != self.grid.n:
            raise ValueError("state width does not match grid")
        steps = np.diff(self.t)
        if np.any(steps <= 0):
            raise ValueError("time stamps must be strictly increasing")
        if np.max(steps) - np.min(steps) > 1e-9 * np.max(steps):
            raise ValueError("time stamps must be uniformly spaced")

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def profile(self, k: int) -> StateProfile:
        return StateProfile(self.states[k], float(self.t[k]))

    @property
    def final_profile(self) -> StateProfile:
        return self.profile(len(self.t) - 1)

    def norms(self) -> np.ndarray:
        """Trapezoid L2 norm of every stored profile."""
        w = self.grid.weights
        return np.sqrt(np.einsum("kj,j->k", self.states**2, w))


@dataclass(frozen=True)
class Eigenpair:
    """Reference eigenpair: real eigenvalue and a unit-L2 grid-sampled eigenvector.

    Sign convention: mode value at z = 0 is positive.
    """

    eigenvalue: float
    mode: np.ndarray


@dataclass(frozen=True)
class DiscreteOperator:
    """Tridiagonal discretisation of rho*d_zz + a(z) with Robin rows eliminated.

    ``lower``/``diag``/``upper`` are the matrix bands; ``g1``/``g2`` the
    boundary input channels so that  x_dot = A x + g1*u1 + g2*u2.
    """

    grid: SpatialGrid
    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    g1: np.ndarray
    g2: np.ndarray

    def dense(self) -> np.ndarray:
        n = self.grid.n
        mat = np.zeros((n, n))
        idx = np.arange(n)
        mat[idx, idx] = self.diag
        mat[idx[:-1], idx[:-1] + 1] = self.upper
        mat[idx[1:], idx[1:] - 1] = self.lower
        return mat

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = self.diag * x
        y[:-1] += self.upper * x[1:]
        y[1:] += self.lower * x[:-1]
        return y


def assemble_operator(plant: ParabolicPlant, grid: SpatialGrid) -> DiscreteOperator:
    """Second-order finite-difference operator with ghost-node Robin boundaries.

    Interior rows are the standard central stencil.  At both ends the ghost
    node is eliminated using the centered boundary-condition discretisation,
    which keeps O(h^2) accuracy and produces the input couplings
    g1 = -2*rho/h at node 0 and g2 = +2*rho/h at node n-1.
    """
    n, h = grid.n, grid.h
    rho = plant.rho
    avals = plant.reaction_samples(grid.z)

    diag = -2.0 * rho / h**2 + avals
    lower = np.full(n - 1, rho / h**2)
    upper = np.full(n - 1, rho / h**2)

    # ghost elimination: x'(0) = q0 x(0) + u1 and x'(1) = q1 x(1) + u2
    diag[0] += -2.0 * rho * plant.q0 / h
    upper[0] = 2.0 * rho / h**2
    diag[-1] += 2.0 * rho * plant.q1 / h
    lower[-1] = 2.0 * rho / h**2

    g1 = np.zeros(n)
    g1[0] = -2.0 * rho / h
    g2 = np.zeros(n)
    g2[-1] = 2.0 * rho / h
    return DiscreteOperator(grid=grid, lower=lower, diag=diag, upper=upper, g1=g1, g2=g2)


def eigensolve_reference(op: DiscreteOperator, count: int) -> list[Eigenpair]:
    """Largest ``count`` eigenpairs of the discrete operator, decreasing order.

    The operator is similar to a symmetric tridiagonal matrix through the
    square root of the trapezoid weights, so the spectrum is real by
    construction and the weighted similarity returns eigenvectors that are
    already unit vectors in the discrete L2 norm.
    """
    n = op.grid.n
    if not 1 <= count <= n:
        raise ValueError(f"count must be in [1, {n}], got {count}")
    sqrt_w = np.sqrt(op.grid.weights)
    offdiag = np.sqrt(op.upper * op.lower)
    try:
        vals, vecs = eigh_tridiagonal(
            op.diag, offdiag, select="i", select_range=(n - count, n - 1)
        )
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NumericalError(f"reference eigensolve failed: {exc}") from exc

    pairs = []
    for k in range(count - 1, -1, -1):
        mode = vecs[:, k] / sqrt_w
        if mode[0] == 0.0 or mode[-1] == 0.0:
            raise NumericalError(f"eigenvector {count - k} vanishes at a boundary node")
        if mode[0] < 0:
            mode = -mode
        pairs.append(Eigenpair(eigenvalue=float(vals[k]), mode=mode))
    return pairs


def _cn_bands(op: DiscreteOperator, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Banded (I - dt/2 A) for the solver and bands of (I + dt/2 A) for the matvec."""
    n = op.grid.n
    ab = np.zeros((3, n))
    ab[0, 1:] = -0.5 * dt * op.upper
    ab[1, :] = 1.0 - 0.5 * dt * op.diag
    ab[2, :-1] = -0.5 * dt * op.lower
    diag_p = 1.0 + 0.5 * dt * op.diag
    upper_p = 0.5 * dt * op.upper
    lower_p = 0.5 * dt * op.lower
    return ab, lower_p, diag_p, upper_p


def _plus_matvec(lower_p, diag_p, upper_p, x):
    y = diag_p * x
    y[:-1] += upper_p * x[1:]
    y[1:] += lower_p * x[:-1]
    return y


def _check_step_count(t_final: float, dt: float) -> int:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_final < dt:
        raise ValueError("t_final must be at least dt")
    steps = int(round(t_final / dt))
    if abs(steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError(f"t_final = {t_final} is not an integer multiple of dt = {dt}")
    return steps


def simulate(
    plant: ParabolicPlant,
    grid: SpatialGrid,
    x0: StateProfile,
    u1: Signal | None,
    u2: Signal | None,
    t_final: float,
    dt: float,
    t0: float = 0.0,
) -> Trajectory:
    """Crank-Nicolson integration of the boundary-driven plant.

    Inputs are evaluated at the midpoint of every step; the trajectory is
    returned at every internal step.  ``t0`` shifts the time stamps, which is
    convenient for pre-conditioning runs that end at t = 0.
    """
    if len(x0.values) != grid.n:
        raise ValueError("initial profile does not match grid")
    steps = _check_step_count(t_final, dt)
    op = assemble_operator(plant, grid)
    ab, lower_p, diag_p, upper_p = _cn_bands(op, dt)

    f1 = u1 if u1 is not None else (lambda t: 0.0)
    f2 = u2 if u2 is not None else (lambda t: 0.0)

    t = t0 + dt * np.arange(steps + 1)
    states = np.empty((steps + 1, grid.n))
    states[0] = x0.values
    u1_rec = np.array([f1(tk) for tk in t], dtype=float)
    u2_rec = np.array([f2(tk) for tk in t], dtype=float)

    x = x0.values.copy()
    for k in range(steps):
        tm = t0 + (k + 0.5) * dt
        rhs = _plus_matvec(lower_p, diag_p, upper_p, x)
        rhs += dt * (op.g1 * f1(tm) + op.g2 * f2(tm))
        try:
            x = solve_banded((1, 1), ab, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"Crank-Nicolson solve failed at step {k}: {exc}") from exc
        states[k + 1] = x
    return Trajectory(t=t, states=states, u1=u1_rec, u2=u2_rec, grid=grid)


def closed_loop_simulate(
    plant: ParabolicPlant,
    grid: SpatialGrid,
    x0: StateProfile,
    gain: np.ndarray,
    modes: np.ndarray,
    t_final: float,
    dt: float,
) -> Trajectory:
    """Crank-Nicolson integration with implicit boundary state feedback.

    The feedback  u = -K * <x, modes>  (trapezoid quadrature functionals) is
    folded into the Crank-Nicolson system as a low-rank correction, handled
    with the Woodbury identity so the scheme stays unconditionally stable and
    every step still costs one tridiagonal solve.

    Parameters
    ----------
    gain : (2, n) array
        Feedback gain; row 0 drives u1, row 1 drives u2.
    modes : (n, grid.n) array
        Functional kernels evaluated on the grid.
    """
    gain = np.atleast_2d(np.asarray(gain, dtype=float))
    modes = np.atleast_2d(np.asarray(modes, dtype=float))
    if gain.shape[0] != 2 or gain.shape[1] != modes.shape[0]:
        raise ValueError(f"gain shape {gain.shape} does not match {modes.shape[0]} modes")
    if modes.shape[1] != grid.n:
        raise ValueError("modes are not sampled on the given grid")
    if len(x0.values) != grid.n:
        raise ValueError("initial profile does not match grid")

    steps = _check_step_count(t_final, dt)
    op = assemble_operator(plant, grid)
    ab, lower_p, diag_p, upper_p = _cn_bands(op, dt)

    # feedback coupling A_cl = A - U V^T with U = [g1 g2], V^T = K Phi^T W
    u_cols = np.column_stack([op.g1, op.g2])
    vt = gain @ (modes * grid.weights)  # (2, n_grid)
    z_cols = solve_banded((1, 1), ab, u_cols)  # (I - dt/2 A)^{-1} U
    cap = np.eye(2) + 0.5 * dt * (vt @ z_cols)
    try:
        cap_inv = np.linalg.inv(cap)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"closed-loop Crank-Nicolson system is singular: {exc}") from exc

    t = dt * np.arange(steps + 1)
    states = np.empty((steps + 1, grid.n))
    states[0] = x0.values
    u_rec = np.empty((steps + 1, 2))

    x = x0.values.copy()
    u_rec[0] = -(vt @ x)
    for k in range(steps):
        rhs = _plus_matvec(lower_p, diag_p, upper_p, x) - 0.5 * dt * (u_cols @ (vt @ x))
        y = solve_banded((1, 1), ab, rhs)
        x = y - z_cols @ (cap_inv @ (0.5 * dt * (vt @ y)))
        states[k + 1] = x
        u_rec[k + 1] = -(vt @ x)
    return Trajectory(t=t, states=states, u1=u_rec[:, 0], u2=u_rec[:, 1], grid=grid)


# ---------------------------------------------------------------------------
# serialization


def trajectory_to_csv(traj: Trajectory, path: str | Path, stride: int = 1) -> None:
    """CSV with columns t, x(z_0), ..., x(z_{n-1}); optional time decimation."""
    header = "t," + ",".join(f"x[{z:.12g}]" for z in traj.grid.z)
    data = np.column_stack([traj.t, traj.states])[::stride]
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def trajectory_from_csv(path: str | Path) -> Trajectory:
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    z = np.array([float(c[2:-1]) for c in header[1:]])
    grid = SpatialGrid(len(z))
    if not np.allclose(grid.z, z, atol=1e-9):
        raise ValueError("trajectory CSV is not on a uniform [0, 1] grid")
    t = raw[:, 0]
    states = raw[:, 1:]
    zeros = np.zeros(len(t))
    return Trajectory(t=t, states=states, u1=zeros, u2=zeros.copy(), grid=grid)


def trajectory_to_npz(traj: Trajectory, path: str | Path) -> None:
    """Binary columnar form: arrays t, states, u1, u2, z."""
    np.savez(path, t=traj.t, states=traj.states, u1=traj.u1, u2=traj.u2, z=traj.grid.z)


def trajectory_from_npz(path: str | Path) -> Trajectory:
    with np.load(path) as data:
        z = data["z"]
        grid = SpatialGrid(len(z))
        if not np.allclose(grid.z, z, atol=1e-12):
            raise ValueError("stored grid is not uniform on [0, 1]")
        return Trajectory(
            t=data["t"], states=data["states"], u1=data["u1"], u2=data["u2"], grid=grid
        )


def plant_grid_to_toml(plant: ParabolicPlant, grid: SpatialGrid, a_coeffs: Sequence[float] | None = None) -> str:
    """TOML block for plant and grid parameters.

    When the reaction profile came from polynomial coefficients, pass them in
    ``a_coeffs`` so the block round-trips; otherwise the profile is stored as
    a dense sample table.
    """
    buf = io.StringIO()
    buf.write("[plant]\n")
    buf.write(f"rho = {float(plant.rho)!r}\n")
    buf.write(f"q0 = {float(plant.q0)!r}\n")
    buf.write(f"q1 = {float(plant.q1)!r}\n")
    if a_coeffs is not None:
        buf.write("a_poly = [" + ", ".join(repr(float(c)) for c in a_coeffs) + "]\n")
    else:
        samples = plant.reaction_samples(grid.z)
        buf.write("a_samples = [" + ", ".join(repr(float(v)) for v in samples) + "]\n")
    buf.write("\n[grid]\n")
    buf.write(f"n = {grid.n}\n")
    return buf.getvalue()


def plant_grid_from_toml(text: str) -> tuple[ParabolicPlant, SpatialGrid, list[float] | None]:
    try:
        import tomllib
    except ImportError:  # Python < 3.11
        import tomli as tomllib

    doc = tomllib.loads(text)
    pb = doc["plant"]
    gb = doc["grid"]
    grid = SpatialGrid(int(gb["n"]))
    coeffs = pb.get("a_poly")
    if coeffs is not None:
        plant = ParabolicPlant.from_poly(pb["rho"], coeffs, pb["q0"], pb["q1"])
        return plant, grid, [float(c) for c in coeffs]
    samples = np.asarray(pb["a_samples"], dtype=float)
    if len(samples) != grid.n:
        raise ValueError("reaction sample table does not match grid size")
    from scipy.interpolate import CubicSpline

    a_fun = CubicSpline(grid.z, samples)
    plant = ParabolicPlant(rho=pb["rho"], a=a_fun, q0=pb["q0"], q1=pb["q1"])
    return plant, grid, None
