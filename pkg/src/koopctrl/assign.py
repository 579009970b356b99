"""Finite-dimensional modal model and boundary-gain synthesis.

Builds the diagonal modal model (eigenvalues plus boundary input vectors)
from an identified spectrum, checks assignability, computes the parametric
feedback gain placing a requested self-conjugate eigenvalue set, derives the
resulting closed-loop functional kernels and optimizes the free parameter
vectors for a small gain norm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from koopctrl.dmd import KoopmanSpectrum
from koopctrl.pde import Eigenpair, SpatialGrid

__all__ = [
    "ModalModel",
    "GainSynthesis",
    "AssignabilityReport",
    "ClosedLoopEigenstructure",
    "build_modal_model",
    "assignability_check",
    "parametric_gain",
    "closed_loop_eigenstructure",
    "optimize_parameters",
    "synthesis_to_json",
    "synthesis_from_json",
]

_REAL_TOL = 1e-10


@dataclass(frozen=True)
class ModalModel:
    """Diagonal modal model of the leading dynamics.

    ``lambdas`` are the identified eigenvalues in strictly decreasing order,
    ``input_matrix`` the (n, 2) boundary couplings  rho * (-mode(0), mode(1))
    per mode, ``modes`` the unit-L2 kernels on ``grid`` that realize the
    feedback functionals, and ``tail_lambdas`` whatever further eigenvalue
    estimates the identification provided beyond the first n.
    """

    lambdas: np.ndarray
    input_matrix: np.ndarray
    modes: np.ndarray
    rho_hat: float
    grid: SpatialGrid
    tail_lambdas: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        if np.any(np.diff(self.lambdas) >= 0):
            raise ValueError("modal eigenvalues must be strictly decreasing")
        if np.any(np.linalg.norm(self.input_matrix, axis=1) == 0.0):
            raise ValueError("input matrix has a zero row; model not assignable")

    @property
    def n(self) -> int:
        return len(self.lambdas)


@dataclass(frozen=True)
class AssignabilityReport:
    """Outcome of every structural check, in order of evaluation."""

    checks: list[tuple[str, bool, str]]

    @property
    def ok(self) -> bool:
        return all(passed for _, passed, _ in self.checks)

    def failures(self) -> list[str]:
        return [f"{name}: {detail}" for name, passed, detail in self.checks if not passed]


@dataclass(frozen=True)
class GainSynthesis:
    """Result of the parametric gain computation.

    ``params`` is the (2, n) parameter matrix, ``mode_matrix`` the stacked
    resolvent directions it generates, ``gain`` the real (2, n) feedback gain
    and ``achieved`` the closed-loop spectrum of the modal model, matched to
    ``targets`` during construction.
    """

    targets: np.ndarray
    params: np.ndarray
    mode_matrix: np.ndarray
    gain: np.ndarray
    achieved: np.ndarray
    cond_mode_matrix: float
    model: ModalModel


@dataclass(frozen=True)
class ClosedLoopEigenstructure:
    """Closed-loop functional kernels and quadratic-closeness diagnostics.

    ``coefficients[i]`` expands kernel i in the feedback modes; beyond the
    assigned block the open-loop mode itself is added on top.  ``partial_sums``
    accumulates  sum_i ||psi_tilde_i - phi_i||^2  against the reference modes.
    """

    coefficients: list[np.ndarray]
    kernels: np.ndarray
    partial_sums: np.ndarray
    n_assigned: int


def build_modal_model(
    spectrum: KoopmanSpectrum, n: int, rho_hat: float
) -> ModalModel:
    """Leading-n modal model with boundary couplings from the mode endpoints.

    The mode values at z = 0 and z = 1 come from the cubic extrapolation of
    the sensor interpolant (sensors are interior).  Near-vanishing endpoint
    values make the corresponding row of the input matrix unreliable and are
    rejected as near-uncontrollable.
    """
    if rho_hat <= 0:
        raise ValueError("diffusion estimate must be positive")
    if len(spectrum.pairs) < n:
        raise ValueError(f"spectrum provides {len(spectrum.pairs)} modes, need {n}")
    lambdas = np.empty(n)
    rows = np.empty((n, 2))
    modes = np.empty((n, spectrum.grid.n))
    for i, pair in enumerate(spectrum.pairs[:n]):
        lam = pair.lambda_hat
        if abs(lam.imag) > 1e-6 * max(1.0, abs(lam.real)):
            raise ValueError(f"mode {i + 1} has a complex eigenvalue {lam}; expected real")
        mode = np.real(pair.mode_grid)
        left, right = mode[0], mode[-1]
        if abs(left) < 1e-6 or abs(right) < 1e-6:
            raise ValueError(
                f"near-uncontrollable mode {i + 1}: boundary values ({left:.2e}, {right:.2e})"
            )
        lambdas[i] = lam.real
        rows[i] = (rho_hat * -left, rho_hat * right)
        modes[i] = mode
    tail = np.array([p.lambda_hat.real for p in spectrum.pairs[n:]])
    return ModalModel(
        lambdas=lambdas,
        input_matrix=rows,
        modes=modes,
        rho_hat=rho_hat,
        grid=spectrum.grid,
        tail_lambdas=tail,
    )


def _is_self_conjugate(values: np.ndarray, tol: float = 1e-9) -> bool:
    remaining = list(values)
    while remaining:
        v = remaining.pop()
        if abs(v.imag) <= tol:
            continue
        match = None
        for k, w in enumerate(remaining):
            if abs(w - np.conj(v)) <= tol * max(1.0, abs(v)):
                match = k
                break
        if match is None:
            return False
        remaining.pop(match)
    return True


def assignability_check(model: ModalModel, targets: np.ndarray) -> AssignabilityReport:
    """Structural feasibility of placing ``targets`` on the modal model."""
    targets = np.asarray(targets, dtype=complex)
    checks: list[tuple[str, bool, str]] = []

    diffs = np.diff(model.lambdas)
    checks.append(
        (
            "distinct open-loop eigenvalues",
            bool(np.all(diffs < 0)),
            f"min gap {np.min(-diffs):.3e}" if len(diffs) else "single mode",
        )
    )

    row_norms = np.linalg.norm(model.input_matrix, axis=1)
    zero_rows = np.where(row_norms < 1e-12)[0]
    checks.append(
        (
            "input matrix rows nonzero",
            zero_rows.size == 0,
            "all nonzero" if zero_rows.size == 0 else f"zero row at index {zero_rows[0] + 1}",
        )
    )

    tol = 1e-8 * max(1.0, float(np.max(np.abs(model.lambdas))))
    clash = [
        (t, lam)
        for t in targets
        for lam in model.lambdas
        if abs(t - lam) < tol
    ]
    checks.append(
        (
            "targets disjoint from assigned spectrum",
            not clash,
            "resolvent singular: target "
            + (f"{clash[0][0]} hits eigenvalue {clash[0][1]}" if clash else "none"),
        )
    )

    tail_clash = [
        (t, lam) for t in targets for lam in model.tail_lambdas if abs(t - lam) < tol
    ]
    checks.append(
        (
            "targets disjoint from estimated tail",
            not tail_clash,
            f"target {tail_clash[0][0]} hits tail estimate {tail_clash[0][1]}"
            if tail_clash
            else "clear",
        )
    )

    tgt_diff = [
        (i, j)
        for i in range(len(targets))
        for j in range(i + 1, len(targets))
        if abs(targets[i] - targets[j]) < tol
    ]
    checks.append(
        (
            "targets distinct",
            not tgt_diff,
            f"targets {tgt_diff[0][0] + 1} and {tgt_diff[0][1] + 1} coincide" if tgt_diff else "ok",
        )
    )

    checks.append(
        (
            "targets self-conjugate",
            _is_self_conjugate(targets),
            "closed under conjugation" if _is_self_conjugate(targets) else "unpaired complex target",
        )
    )
    return AssignabilityReport(checks=checks)


def _mode_matrix(model: ModalModel, targets: np.ndarray, params: np.ndarray) -> np.ndarray:
    """Stacked resolvent directions (Lambda - target_i I)^{-1} B p_i as columns."""
    cols = []
    for i, tgt in enumerate(targets):
        denom = model.lambdas - tgt
        cols.append((model.input_matrix @ params[:, i]) / denom)
    return np.column_stack(cols)


def parametric_gain(
    model: ModalModel, targets: np.ndarray, params: np.ndarray
) -> GainSynthesis:
    """Feedback gain placing ``targets`` with parameter directions ``params``.

    The achieved modal closed-loop spectrum is recomputed by a direct
    eigensolve and must match the targets to 1e-8 relative; the gain must come
    out real whenever targets and parameter columns are conjugate-symmetric.
    """
    targets = np.asarray(targets, dtype=complex)
    params = np.asarray(params, dtype=complex)
    n = model.n
    if targets.shape != (n,):
        raise ValueError(f"expected {n} targets, got {targets.shape}")
    if params.shape != (2, n):
        raise ValueError(f"parameter matrix must be (2, {n}), got {params.shape}")
    report = assignability_check(model, targets)
    if not report.ok:
        raise ValueError("assignability failed: " + "; ".join(report.failures()))
    for i in range(n):
        for j in range(n):
            if abs(targets[j] - np.conj(targets[i])) < 1e-12 * max(1.0, abs(targets[i])):
                if not np.allclose(params[:, j], np.conj(params[:, i]), atol=1e-12):
                    raise ValueError(
                        f"parameter columns {i + 1}/{j + 1} are not conjugate-paired with targets"
                    )

    vmat = _mode_matrix(model, targets, params)
    cond = float(np.linalg.cond(vmat))
    if not np.isfinite(cond) or cond > 1e14:
        raise ValueError(f"resolvent directions are linearly dependent (cond = {cond:.3e})")
    gain_c = params @ np.linalg.inv(vmat)
    imag_max = float(np.max(np.abs(gain_c.imag)))
    if imag_max > _REAL_TOL * max(1.0, float(np.max(np.abs(gain_c.real)))):
        raise ValueError(f"gain has imaginary residue {imag_max:.3e}; check conjugate pairing")
    gain = gain_c.real

    closed = np.diag(model.lambdas) - model.input_matrix @ gain
    achieved = np.linalg.eigvals(closed)
    tgt_sorted = targets[np.lexsort((targets.imag, -targets.real))]
    ach_sorted = achieved[np.lexsort((achieved.imag, -achieved.real))]
    rel = np.abs(ach_sorted - tgt_sorted) / np.maximum(1.0, np.abs(tgt_sorted))
    if np.max(rel) > 1e-8:
        raise ValueError(f"achieved spectrum misses targets by {np.max(rel):.3e} relative")
    return GainSynthesis(
        targets=targets,
        params=params,
        mode_matrix=vmat,
        gain=gain,
        achieved=ach_sorted,
        cond_mode_matrix=cond,
        model=model,
    )


def closed_loop_eigenstructure(
    synth: GainSynthesis,
    model: ModalModel,
    reference: list[Eigenpair],
    n_tail: int,
    rho: float | None = None,
) -> ClosedLoopEigenstructure:
    """Closed-loop functional kernels for the assigned block and the tail.

    ``reference`` supplies eigenpairs 1..n+n_tail (oracle or extended
    identification); the first n are only used in the quadratic-closeness
    sums, the rest enter the tail kernels.  ``rho`` scales the tail boundary
    couplings and defaults to the model estimate.
    """
    n = model.n
    if len(reference) < n + n_tail:
        raise ValueError(f"need {n + n_tail} reference eigenpairs, got {len(reference)}")
    if rho is None:
        rho = model.rho_hat
    vinv = np.linalg.inv(synth.mode_matrix)
    tgt_diag = synth.targets

    coefficients: list[np.ndarray] = []
    kernels = np.empty((n + n_tail, model.grid.n))
    closeness = np.empty(n + n_tail)
    for i in range(n):
        cbar = vinv[i, :]
        coeff = np.conj(cbar)
        kernel = np.real(coeff @ model.modes)
        coefficients.append(coeff)
        kernels[i] = kernel
        closeness[i] = model.grid.norm(kernel - reference[i].mode) ** 2
    for k in range(n_tail):
        pair = reference[n + k]
        lam = pair.eigenvalue
        denom = tgt_diag - lam
        if np.min(np.abs(denom)) < 1e-9 * max(1.0, abs(lam)):
            raise ValueError(f"target collides with tail eigenvalue {lam}")
        b_tail = rho * np.array([-pair.mode[0], pair.mode[-1]])
        cbar = ((b_tail @ synth.params) / denom) @ vinv
        coeff = np.conj(cbar)
        kernel = np.real(coeff @ model.modes) + pair.mode
        coefficients.append(coeff)
        kernels[n + k] = kernel
        closeness[n + k] = model.grid.norm(kernel - pair.mode) ** 2
    return ClosedLoopEigenstructure(
        coefficients=coefficients,
        kernels=kernels,
        partial_sums=np.cumsum(closeness),
        n_assigned=n,
    )


def _conjugate_pair_indices(targets: np.ndarray) -> list[tuple[int, int]]:
    """Pair index map: (i, i) for real targets, (i, j) with j = conj partner."""
    pairs: list[tuple[int, int]] = []
    used: set[int] = set()
    for i, t in enumerate(targets):
        if i in used:
            continue
        if abs(t.imag) <= 1e-12 * max(1.0, abs(t)):
            pairs.append((i, i))
            used.add(i)
            continue
        partner = None
        for j in range(i + 1, len(targets)):
            if j not in used and abs(targets[j] - np.conj(t)) <= 1e-9 * max(1.0, abs(t)):
                partner = j
                break
        if partner is None:
            raise ValueError(f"target {t} has no conjugate partner")
        pairs.append((i, partner))
        used.update((i, partner))
    return pairs


def optimize_parameters(
    model: ModalModel,
    targets: np.ndarray,
    box_bound: float = 1.0,
    n_starts: int = 50,
    seed: int = 0,
) -> tuple[np.ndarray, float]:
    """Multi-start Nelder-Mead search for parameters minimizing the gain norm.

    Parameter entries are confined to [-box_bound, box_bound]; conjugate
    target pairs share one complex parameter column.  Singular direction
    matrices are rejected through a penalty.  Deterministic for a fixed seed;
    ties resolve to the earliest start.  Returns the best parameter matrix and
    the achieved spectral norm of the gain.
    """
    targets = np.asarray(targets, dtype=complex)
    n = model.n
    report = assignability_check(model, targets)
    if not report.ok:
        raise ValueError("assignability failed: " + "; ".join(report.failures()))
    pair_idx = _conjugate_pair_indices(targets)

    def unpack(theta: np.ndarray) -> np.ndarray:
        params = np.zeros((2, n), dtype=complex)
        pos = 0
        for i, j in pair_idx:
            if i == j:
                params[:, i] = theta[pos : pos + 2]
                pos += 2
            else:
                col = theta[pos : pos + 2] + 1j * theta[pos + 2 : pos + 4]
                params[:, i] = col
                params[:, j] = np.conj(col)
                pos += 4
        return params

    dim = sum(2 if i == j else 4 for i, j in pair_idx)

    def objective(theta: np.ndarray) -> float:
        params = unpack(theta)
        vmat = _mode_matrix(model, targets, params)
        try:
            cond = np.linalg.cond(vmat)
        except np.linalg.LinAlgError:
            return 1e12
        if not np.isfinite(cond) or cond > 1e12:
            return 1e12
        gain = params @ np.linalg.inv(vmat)
        return float(np.linalg.norm(gain.real, 2) + np.max(np.abs(gain.imag)) * 1e6)

    rng = np.random.default_rng(seed)
    starts = rng.uniform(-box_bound, box_bound, size=(n_starts, dim))
    bounds = [(-box_bound, box_bound)] * dim
    best_theta = None
    best_val = np.inf
    for theta0 in starts:
        res = minimize(
            objective,
            theta0,
            method="Nelder-Mead",
            bounds=bounds,
            options={"maxiter": 400 * dim, "xatol": 1e-10, "fatol": 1e-12},
        )
        if res.fun < best_val:
            best_val = float(res.fun)
            best_theta = res.x
    if best_theta is None or best_val >= 1e12:
        raise ValueError("all optimizer starts were infeasible")
    params = unpack(best_theta)
    synth = parametric_gain(model, targets, params)
    return params, float(np.linalg.norm(synth.gain, 2))


# ---------------------------------------------------------------------------
# serialization


def synthesis_to_json(synth: GainSynthesis, path: str | Path | None = None) -> str:
    doc = {
        "targets": [[t.real, t.imag] for t in synth.targets],
        "P": [[[v.real, v.imag] for v in row] for row in synth.params],
        "K": [[float(v) for v in row] for row in synth.gain],
        "achieved_spectrum": [[v.real, v.imag] for v in synth.achieved],
        "cond_V": synth.cond_mode_matrix,
        "gain_norm": float(np.linalg.norm(synth.gain, 2)),
        "model": {
            "lambdas": [float(v) for v in synth.model.lambdas],
            "input_matrix": [[float(v) for v in row] for row in synth.model.input_matrix],
            "rho_hat": synth.model.rho_hat,
            "tail_lambdas": [float(v) for v in synth.model.tail_lambdas],
        },
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


def synthesis_from_json(text: str, spectrum: KoopmanSpectrum) -> GainSynthesis:
    """Rebuild a synthesis result; the spectrum supplies the mode kernels."""
    doc = json.loads(text)
    lambdas = np.array(doc["model"]["lambdas"])
    model = build_modal_model(spectrum, len(lambdas), float(doc["model"]["rho_hat"]))
    targets = np.array([complex(re, im) for re, im in doc["targets"]])
    params = np.array(
        [[complex(re, im) for re, im in row] for row in doc["P"]]
    )
    return parametric_gain(model, targets, params)
