"""Closed-loop verification: Lyapunov certificate, spectrum checks, decay fits.

Certifies exponential stability of the data-driven loop from the identified
model plus identification error bounds, verifies the assigned spectrum
against the discretized closed-loop operator and estimates empirical decay
rates from simulated trajectories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded
from scipy.sparse.linalg import LinearOperator, eigs

from koopctrl.assign import GainSynthesis, ModalModel
from koopctrl.pde import (
    DiscreteOperator,
    Eigenpair,
    NumericalError,
    ParabolicPlant,
    SpatialGrid,
    Trajectory,
    assemble_operator,
    eigensolve_reference,
)

__all__ = [
    "ErrorBounds",
    "RobustnessCertificate",
    "SpectrumVerification",
    "lyapunov_solve",
    "error_bounds",
    "certify",
    "decay_fit",
    "verify_closed_loop_spectrum",
    "closed_loop_adjoint_modes",
    "certificate_to_json",
    "spectrum_report_to_csv",
]

_DENSE_EIG_LIMIT = 700


@dataclass(frozen=True)
class ErrorBounds:
    """Identification error bounds feeding the stability certificate.

    ``c_phi`` is the span-restricted functional-error constant: it bounds the
    feedback functional error only for states inside the span of the first n
    reference modes, which is all finite data can support.
    """

    eps_lambda: float
    eps_B: float
    c_phi: float
    input_matrix_true: np.ndarray | None = None


@dataclass(frozen=True)
class RobustnessCertificate:
    """Lyapunov-based exponential-stability certificate for the data-driven loop.

    ``passed`` requires the certified margin gamma to be negative and the
    certified rate alpha_hat to separate the untouched tail from zero.
    """

    lyapunov: np.ndarray
    eps_lambda: float
    eps_B: float
    c_phi: float
    gamma: float
    alpha_hat: float
    lambda_tail_max: float
    gain_norm: float
    lambda_max_pi: float
    lambda_min_pi: float
    passed: bool
    c_phi_scope: str = "span-restricted"


@dataclass(frozen=True)
class SpectrumVerification:
    """Distances of assigned and tail eigenvalues of the discretized loop.

    ``target_errors[i]`` is the distance of target i to the nearest
    closed-loop eigenvalue; ``tail_displacements`` are relative shifts of the
    next ``n_check`` open-loop eigenvalues.
    """

    targets: np.ndarray
    matched: np.ndarray
    target_errors: np.ndarray
    tail_open: np.ndarray
    tail_matched: np.ndarray
    tail_displacements: np.ndarray

    @property
    def max_target_error(self) -> float:
        return float(np.max(self.target_errors))

    @property
    def max_tail_displacement(self) -> float:
        return float(np.max(self.tail_displacements)) if len(self.tail_displacements) else 0.0


def lyapunov_solve(a_cl: np.ndarray) -> np.ndarray:
    """Solve  A^T P + P A = -I  by dense Kronecker vectorization.

    Requires a Hurwitz input; the residual of the returned matrix is checked
    below 1e-10 and the result is symmetrized.  Fine for the modal sizes in
    play (n up to about 15).
    """
    a_cl = np.asarray(a_cl, dtype=float)
    n = a_cl.shape[0]
    if a_cl.shape != (n, n):
        raise ValueError("closed-loop matrix must be square")
    eigvals = np.linalg.eigvals(a_cl)
    if np.max(eigvals.real) >= 0:
        raise ValueError(f"matrix is not Hurwitz: max Re eig = {np.max(eigvals.real):.6g}")
    eye = np.eye(n)
    system = np.kron(eye, a_cl.T) + np.kron(a_cl.T, eye)
    try:
        vec = np.linalg.solve(system, -eye.flatten(order="F"))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Lyapunov system singular: {exc}") from exc
    pi = vec.reshape((n, n), order="F")
    pi = 0.5 * (pi + pi.T)
    residual = np.linalg.norm(a_cl.T @ pi + pi @ a_cl + eye)
    if residual > 1e-10:
        raise NumericalError(f"Lyapunov residual {residual:.3e} exceeds 1e-10")
    if np.min(np.linalg.eigvalsh(pi)) <= 0:
        raise NumericalError("Lyapunov solution is not positive definite")
    return pi


def error_bounds(
    identified: ModalModel, reference: list[Eigenpair], rho_true: float
) -> ErrorBounds:
    """Identification error bounds against a reference oracle.

    Identified and reference modes are paired by eigenvalue proximity, which
    must be a bijection.  The functional-error constant is the spectral norm
    of the cross-Gramian of the mode errors against the reference modes,
    valid on the span of the first n reference modes.
    """
    n = identified.n
    if len(reference) < n:
        raise ValueError(f"need at least {n} reference eigenpairs")
    ref_lams = np.array([p.eigenvalue for p in reference])
    pairing = [int(np.argmin(np.abs(ref_lams - lam))) for lam in identified.lambdas]
    if len(set(pairing)) != n:
        raise ValueError(f"nearest-eigenvalue pairing is not a bijection: {pairing}")

    lam_ref = ref_lams[pairing]
    eps_lambda = float(np.max(np.abs(identified.lambdas - lam_ref)))

    b_true = np.array(
        [
            [-rho_true * reference[j].mode[0], rho_true * reference[j].mode[-1]]
            for j in pairing
        ]
    )
    eps_b = float(np.linalg.norm(identified.input_matrix - b_true, 2))

    grid = identified.grid
    gram = np.empty((n, n))
    for i in range(n):
        delta = reference[pairing[i]].mode - identified.modes[i]
        for j in range(n):
            gram[i, j] = np.real(grid.inner(reference[pairing[j]].mode, delta))
    c_phi = float(np.linalg.norm(gram, 2))
    return ErrorBounds(
        eps_lambda=eps_lambda, eps_B=eps_b, c_phi=c_phi, input_matrix_true=b_true
    )


def certify(
    synth: GainSynthesis, bounds: ErrorBounds, lambda_tail_max: float
) -> RobustnessCertificate:
    """Evaluate the Lyapunov robustness certificate for a synthesized loop.

    gamma = 2*((eps_lambda + eps_B*|K|) * lam_max(Pi) + c_phi*|Pi B K|) - 1
    and the certified rate is alpha_hat = gamma / (2 lam_max(Pi)).  The
    certificate passes only when gamma < 0 and the untouched tail decays
    faster than the certified rate.  It may fail closed; that is a result,
    not an error.
    """
    model = synth.model
    a_cl = np.diag(model.lambdas) - model.input_matrix @ synth.gain
    pi = lyapunov_solve(a_cl)
    pi_eigs = np.linalg.eigvalsh(pi)
    lam_max_pi = float(pi_eigs[-1])
    lam_min_pi = float(pi_eigs[0])
    gain_norm = float(np.linalg.norm(synth.gain, 2))
    b_for_cert = bounds.input_matrix_true
    if b_for_cert is None:
        b_for_cert = model.input_matrix
    coupling = float(np.linalg.norm(pi @ b_for_cert @ synth.gain, 2))
    gamma = 2.0 * (
        (bounds.eps_lambda + bounds.eps_B * gain_norm) * lam_max_pi + bounds.c_phi * coupling
    ) - 1.0
    alpha_hat = gamma / (2.0 * lam_max_pi)
    passed = bool(gamma < 0.0 and lambda_tail_max < alpha_hat < 0.0)
    return RobustnessCertificate(
        lyapunov=pi,
        eps_lambda=bounds.eps_lambda,
        eps_B=bounds.eps_B,
        c_phi=bounds.c_phi,
        gamma=float(gamma),
        alpha_hat=float(alpha_hat),
        lambda_tail_max=float(lambda_tail_max),
        gain_norm=gain_norm,
        lambda_max_pi=lam_max_pi,
        lambda_min_pi=lam_min_pi,
        passed=passed,
    )


def decay_fit(traj: Trajectory, t_start: float) -> tuple[float, float]:
    """Least-squares exponential fit of the trajectory norm history.

    Fits  log |x(t)| = log(M |x(0)|) + alpha * t  over [t_start, t_final],
    truncating once the norm reaches numerical zero.  Returns the fitted rate
    and the overshoot constant M.
    """
    norms = traj.norms()
    norm0 = norms[0]
    if norm0 <= 0:
        raise ValueError("trajectory starts at zero; nothing to fit")
    mask = traj.t >= t_start
    dead = norms < 1e-14
    if np.any(dead):
        first_dead = int(np.argmax(dead))
        keep = np.zeros_like(mask)
        keep[:first_dead] = True
        mask &= keep
    if np.sum(mask) < 2:
        raise ValueError("fewer than two usable samples after t_start")
    slope, intercept = np.polyfit(traj.t[mask], np.log(norms[mask]), 1)
    return float(slope), float(np.exp(intercept) / norm0)


def _closed_loop_pieces(
    op: DiscreteOperator, synth: GainSynthesis, modes: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Low-rank factors U, V^T of the feedback coupling A_cl = A - U V^T."""
    modes = np.atleast_2d(np.asarray(modes, dtype=float))
    u_cols = np.column_stack([op.g1, op.g2])
    vt = synth.gain @ (modes * op.grid.weights)
    return u_cols, vt


def _closed_loop_dense(op: DiscreteOperator, u_cols: np.ndarray, vt: np.ndarray) -> np.ndarray:
    return op.dense() - u_cols @ vt


def _leading_eigs_lowrank(
    op: DiscreteOperator,
    u_cols: np.ndarray,
    vt: np.ndarray,
    count: int,
    sigma: float,
) -> np.ndarray:
    """Leading eigenvalues of A - U V^T by shift-inverted Arnoldi.

    The shifted inverse applies through one banded tridiagonal solve plus a
    rank-2 Woodbury correction, so each Arnoldi step is O(grid size).
    Deterministic via a fixed start vector.
    """
    n_grid = op.grid.n
    ab = np.zeros((3, n_grid))
    ab[0, 1:] = op.upper
    ab[1, :] = op.diag - sigma
    ab[2, :-1] = op.lower

    z_cols = solve_banded((1, 1), ab, u_cols)
    cap = np.eye(u_cols.shape[1]) - vt @ z_cols
    cap_inv = np.linalg.inv(cap)

    def apply_inverse(b: np.ndarray) -> np.ndarray:
        y = solve_banded((1, 1), ab, b)
        return y + z_cols @ (cap_inv @ (vt @ y))

    opinv = LinearOperator((n_grid, n_grid), matvec=apply_inverse)

    def matvec(x: np.ndarray) -> np.ndarray:
        return op.matvec(x) - u_cols @ (vt @ x)

    a_op = LinearOperator((n_grid, n_grid), matvec=matvec)
    v0 = np.full(n_grid, 1.0 / np.sqrt(n_grid))
    vals = eigs(
        a_op,
        k=count,
        sigma=sigma,
        OPinv=opinv,
        v0=v0,
        return_eigenvectors=False,
        tol=1e-12,
        maxiter=5000,
    )
    order = np.lexsort((vals.imag, -vals.real))
    return vals[order]


def _tridiag_t_matvec(op: DiscreteOperator, x: np.ndarray) -> np.ndarray:
    y = op.diag * x
    y[:-1] += op.lower * x[1:]
    y[1:] += op.upper * x[:-1]
    return y


def verify_closed_loop_spectrum(
    plant: ParabolicPlant,
    grid: SpatialGrid,
    synth: GainSynthesis,
    modes: np.ndarray,
    n_check: int,
) -> SpectrumVerification:
    """Eigensolve the discretized closed loop and compare with the assignment.

    Assembles the open-loop operator plus the low-rank boundary-feedback
    coupling built from the quadrature functionals, extracts the leading
    eigenvalues (dense solve on small grids, shift-inverted Arnoldi on large
    ones) and reports per-target distances plus the relative displacement of
    the next ``n_check`` open-loop eigenvalues.
    """
    op = assemble_operator(plant, grid)
    n = synth.model.n
    count = n + n_check
    open_pairs = eigensolve_reference(op, count)
    open_lams = np.array([p.eigenvalue for p in open_pairs])

    u_cols, vt = _closed_loop_pieces(op, synth, modes)
    if grid.n <= _DENSE_EIG_LIMIT:
        closed = np.linalg.eigvals(_closed_loop_dense(op, u_cols, vt))
        order = np.lexsort((closed.imag, -closed.real))
        closed = closed[order][:count]
    else:
        sigma = float(max(np.max(open_lams), np.max(synth.targets.real)) + 50.0)
        closed = _leading_eigs_lowrank(op, u_cols, vt, count, sigma)

    targets = synth.targets
    matched = np.empty(len(targets), dtype=complex)
    target_errors = np.empty(len(targets))
    for i, tgt in enumerate(targets):
        k = int(np.argmin(np.abs(closed - tgt)))
        matched[i] = closed[k]
        target_errors[i] = abs(closed[k] - tgt)

    tail_open = open_lams[n:count]
    tail_matched = np.empty(len(tail_open), dtype=complex)
    tail_disp = np.empty(len(tail_open))
    for j, lam in enumerate(tail_open):
        k = int(np.argmin(np.abs(closed - lam)))
        tail_matched[j] = closed[k]
        tail_disp[j] = abs(closed[k] - lam) / max(1.0, abs(lam))
    return SpectrumVerification(
        targets=targets,
        matched=matched,
        target_errors=target_errors,
        tail_open=tail_open,
        tail_matched=tail_matched,
        tail_displacements=tail_disp,
    )


def closed_loop_adjoint_modes(
    plant: ParabolicPlant,
    grid: SpatialGrid,
    synth: GainSynthesis,
    modes: np.ndarray,
    eigenvalues: np.ndarray,
) -> np.ndarray:
    """Eigenvectors of the adjoint of the discretized closed-loop operator.

    The adjoint is taken in the trapezoid inner product, so its eigenvectors
    are the weighted left eigenvectors of the closed-loop matrix.  One inverse
    iteration per requested eigenvalue refines the dense-solve or Arnoldi
    eigenvector to machine precision; results are unit-L2 normalized with a
    positive value at z = 0.
    """
    op = assemble_operator(plant, grid)
    u_cols, vt = _closed_loop_pieces(op, synth, modes)
    out = np.empty((len(eigenvalues), grid.n))
    w = grid.weights
    for i, lam in enumerate(np.asarray(eigenvalues, dtype=float)):
        shifted = lam + 1e-7 * max(1.0, abs(lam))
        ab = np.zeros((3, grid.n))
        ab[0, 1:] = op.lower  # transposed bands
        ab[1, :] = op.diag - shifted
        ab[2, :-1] = op.upper
        z_cols = solve_banded((1, 1), ab, vt.T)
        cap = np.eye(2) - u_cols.T @ z_cols
        cap_inv = np.linalg.inv(cap)

        vec = np.full(grid.n, 1.0 / np.sqrt(grid.n))
        for _ in range(50):
            y = solve_banded((1, 1), ab, vec)
            y = y + z_cols @ (cap_inv @ (u_cols.T @ y))
            y /= np.linalg.norm(y)
            resid = _tridiag_t_matvec(op, y) - vt.T @ (u_cols.T @ y) - lam * y
            vec = y
            if np.linalg.norm(resid) < 1e-9 * max(1.0, abs(lam)):
                break
        adjoint_mode = vec / w
        adjoint_mode /= grid.norm(adjoint_mode)
        if adjoint_mode[0] < 0:
            adjoint_mode = -adjoint_mode
        out[i] = adjoint_mode
    return out


# ---------------------------------------------------------------------------
# serialization


def certificate_to_json(cert: RobustnessCertificate, path: str | Path | None = None) -> str:
    doc = {
        "pass": cert.passed,
        "gamma": cert.gamma,
        "alpha_hat": cert.alpha_hat,
        "eps_lambda": cert.eps_lambda,
        "eps_B": cert.eps_B,
        "c_phi": cert.c_phi,
        "c_phi_scope": cert.c_phi_scope,
        "lambda_tail_max": cert.lambda_tail_max,
        "gain_norm": cert.gain_norm,
        "lambda_max_pi": cert.lambda_max_pi,
        "lambda_min_pi": cert.lambda_min_pi,
        "lyapunov": [[float(v) for v in row] for row in cert.lyapunov],
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


def spectrum_report_to_csv(report: SpectrumVerification, path: str | Path) -> None:
    """Flat diagnostic rows (index, open_loop, closed_loop, displacement).

    For the assigned block the reference value in the ``open_loop`` column is
    the assignment target and the displacement is the absolute miss; tail rows
    carry the open-loop eigenvalue and the relative shift.
    """
    with open(path, "w") as fh:
        fh.write("index,open_loop,closed_loop,displacement\n")
        idx = 1
        for tgt, got, err in zip(report.targets, report.matched, report.target_errors):
            fh.write(f"{idx},{float(tgt.real)!r},{float(got.real)!r},{float(err)!r}\n")
            idx += 1
        for lam, got, disp in zip(report.tail_open, report.tail_matched, report.tail_displacements):
            fh.write(f"{idx},{float(lam)!r},{float(got.real)!r},{float(disp)!r}\n")
            idx += 1
