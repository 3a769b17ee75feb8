"""Measurement-guided 3D face fitting.

Finds shape coefficients whose reconstructed mesh reproduces the target
measurements: minimize  lam * ||beta||_prior^2 + sum_k z_k (Q_k(mesh(beta)) -
target_k)^2  by damped Gauss-Newton (Levenberg-Marquardt).  Q_k is the k-th
measurement of the reconstructed mesh and z_k the per-measurement selection
weight (1 for statistically predictable measurements, 0 otherwise).

The solve runs on coefficients scaled by eigenvalue square roots, so the
ridge term acts as a Mahalanobis prior on plausible faces; targets must be
in measurement units (denormalize predictions first).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    AMDefinition,
    DegenerateMeasurementError,
    LandmarkMap,
    Mesh,
    compute_am,
    compute_am_gradient,
)
from .shapespace import ShapeBasis, unflatten
from .stats import TestReport, filtered_indices

DEFAULT_LAMBDA = 1e-3
DEFAULT_MAX_ITERATIONS = 500
STEP_TOL = 1e-8
REL_OBJECTIVE_TOL = 1e-10
FLAT_ITERATIONS = 5


@dataclass(frozen=True)
class ReconstructionProblem:
    basis: ShapeBasis
    landmarks: LandmarkMap
    am_defs: list[AMDefinition]
    targets: np.ndarray                 # (K,) in measurement units
    weights: np.ndarray                 # (K,) nonnegative selection weights z
    lam: float = DEFAULT_LAMBDA
    max_iterations: int = DEFAULT_MAX_ITERATIONS

    def __post_init__(self):
        targets = np.asarray(self.targets, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        k = len(self.am_defs)
        if targets.shape != (k,) or weights.shape != (k,):
            raise ValueError(f"targets and weights must have shape ({k},)")
        if np.any(weights < 0.0):
            raise ValueError("selection weights must be nonnegative")
        if self.lam < 0.0:
            raise ValueError("lambda must be nonnegative")
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "weights", weights)


@dataclass
class FitResult:
    beta: np.ndarray
    mesh: Mesh
    objective_trace: np.ndarray  # objective at accepted iterates, non-increasing
    converged: bool
    n_iterations: int


def _coefficient_scale(basis: ShapeBasis) -> np.ndarray:
    eig = np.maximum(basis.eigenvalues, 1e-12 * max(float(basis.eigenvalues[0]), 1e-30))
    return np.sqrt(eig)


def _mesh_of(basis: ShapeBasis, beta: np.ndarray) -> Mesh:
    return unflatten(basis.mean_shape + basis.projection @ beta, basis.topology_id)


def residuals_and_jacobian(problem: ReconstructionProblem, gamma: np.ndarray,
                           with_jacobian: bool = True):
    """Stacked residuals (active measurements, then ridge rows) and their
    Jacobian w.r.t. the scaled coefficients gamma (beta = scale * gamma)."""
    basis = problem.basis
    scale = _coefficient_scale(basis)
    beta = scale * gamma
    mesh = _mesh_of(basis, beta)
    active = np.flatnonzero(problem.weights > 0.0)
    d = basis.dim
    res = np.empty(active.shape[0] + d)
    jac = np.empty((active.shape[0] + d, d)) if with_jacobian else None
    for row, k in enumerate(active):
        definition = problem.am_defs[k]
        w = np.sqrt(problem.weights[k])
        res[row] = w * (compute_am(mesh, problem.landmarks, definition) - problem.targets[k])
        if with_jacobian:
            g = compute_am_gradient(mesh, problem.landmarks, definition)
            drow = np.zeros(d)
            for idx, vec in g.items():
                drow += vec @ basis.projection[3 * idx : 3 * idx + 3, :]
            jac[row] = w * drow * scale
    sq = np.sqrt(problem.lam)
    res[active.shape[0]:] = sq * gamma
    if with_jacobian:
        jac[active.shape[0]:] = sq * np.eye(d)
    return res, jac


def _objective(problem: ReconstructionProblem, gamma: np.ndarray) -> float:
    try:
        res, _ = residuals_and_jacobian(problem, gamma, with_jacobian=False)
    except DegenerateMeasurementError:
        return np.inf
    return float(res @ res)


def fit(problem: ReconstructionProblem) -> FitResult:
    """Damped Gauss-Newton from the mean face (beta = 0).

    Damping grows on rejected steps; convergence at step norm < 1e-8 or five
    consecutive accepted iterations with relative objective decrease < 1e-10.
    Hitting the iteration cap returns the best iterate with converged=False.
    """
    basis = problem.basis
    d = basis.dim
    scale = _coefficient_scale(basis)
    gamma = np.zeros(d)

    if not np.any(problem.weights > 0.0):
        # pure ridge: the mean face is the optimum
        mesh = _mesh_of(basis, np.zeros(d))
        return FitResult(np.zeros(d), mesh, np.zeros(1), True, 0)

    objective = _objective(problem, gamma)
    if not np.isfinite(objective):
        raise ValueError("objective is non-finite at the initial (mean face) iterate")
    trace = [objective]
    mu = 1e-4
    converged = False
    flat_streak = 0
    iterations = 0

    for iterations in range(1, problem.max_iterations + 1):
        res, jac = residuals_and_jacobian(problem, gamma)
        jtj = jac.T @ jac
        jtr = jac.T @ res
        accepted = False
        while mu < 1e14:
            try:
                step = np.linalg.solve(jtj + mu * np.eye(d), -jtr)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            candidate = gamma + step
            cand_obj = _objective(problem, candidate)
            if cand_obj < objective:
                accepted = True
                break
            mu *= 10.0
        if not accepted:
            converged = True  # no descent direction left at any damping
            break

        rel_drop = (objective - cand_obj) / max(objective, 1e-300)
        gamma = candidate
        objective = cand_obj
        trace.append(objective)
        mu = max(mu / 3.0, 1e-12)

        if np.linalg.norm(step) < STEP_TOL:
            converged = True
            break
        flat_streak = flat_streak + 1 if rel_drop < REL_OBJECTIVE_TOL else 0
        if flat_streak >= FLAT_ITERATIONS:
            converged = True
            break

    beta = scale * gamma
    return FitResult(beta, _mesh_of(basis, beta), np.array(trace), converged, iterations)


def per_vertex_error(mesh_hat: Mesh, ground_truth: Mesh) -> np.ndarray:
    """Euclidean distance per vertex, in mm."""
    if mesh_hat.n_vertices != ground_truth.n_vertices or (
        mesh_hat.topology_id != ground_truth.topology_id
    ):
        raise ValueError(
            f"topology mismatch: {mesh_hat.topology_id}/{mesh_hat.n_vertices} vs "
            f"{ground_truth.topology_id}/{ground_truth.n_vertices}"
        )
    return np.linalg.norm(mesh_hat.vertices - ground_truth.vertices, axis=1)


def filtered_error_maps(error_fields: np.ndarray, uncertainties: np.ndarray,
                        levels=(1.0, 0.75, 0.5), order_keys=None) -> dict[float, np.ndarray]:
    """Mean per-vertex error fields at each confidence level.

    error_fields: (n_speakers, T) per-speaker per-vertex errors;
    uncertainties: (n_speakers,) aggregate calibrated uncertainty per fit
    (mean over the selected measurements).  Each level keeps the
    lowest-uncertainty fraction (stable ties) and averages the retained rows.
    """
    error_fields = np.asarray(error_fields, dtype=np.float64)
    uncertainties = np.asarray(uncertainties, dtype=np.float64)
    if error_fields.shape[0] != uncertainties.shape[0]:
        raise ValueError("one uncertainty per error field required")
    if error_fields.shape[0] == 0:
        raise ValueError("no fits to aggregate")
    out = {}
    for level in levels:
        idx = filtered_indices(uncertainties, level, order_keys)
        if idx.size == 0:
            raise ValueError(f"level {level} retains no fits")
        out[level] = error_fields[idx].mean(axis=0)
    return out


def select_top_ams(report: TestReport, count: int = 10, level: float = 1.0):
    """Selection weights: 1 for the `count` predictable AMs with the highest
    1 - CI_u (stable tie-break by AM id), 0 otherwise.

    Returns (weights aligned with report.am_ids, chosen AM ids).  Fewer
    predictable AMs than requested selects them all with a warning.
    """
    entries = [e for e in report.entries if e.level == level and e.predictable]
    entries.sort(key=lambda e: (-(1.0 - e.ci_upper), e.am_id))
    if len(entries) < count:
        warnings.warn(
            f"only {len(entries)} predictable AMs available (requested {count}); using all",
            stacklevel=2,
        )
    chosen = [e.am_id for e in entries[:count]]
    weights = np.array([1.0 if am in chosen else 0.0 for am in report.am_ids])
    return weights, chosen


def apply_confidence_weighting(weights: np.ndarray, calibrated: np.ndarray) -> np.ndarray:
    """Optional mode: scale selection weights by inverse calibrated
    uncertainty (normalized to keep the weight mass); off by default."""
    weights = np.asarray(weights, dtype=np.float64)
    calibrated = np.asarray(calibrated, dtype=np.float64)
    if np.any(calibrated <= 0.0):
        raise ValueError("calibrated uncertainties must be positive")
    scaled = weights / calibrated
    total = scaled.sum()
    if total <= 0.0:
        return scaled
    return scaled * (weights.sum() / total)
